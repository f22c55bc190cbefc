//! Leap-flow consistency distillation over synthetic scene-trajectory latents.

pub mod checkpoint;
pub mod config;
pub mod consistency;
pub mod ddpnet;
pub mod error;
pub mod eval;
pub mod net;
pub mod par;
pub mod pipeline;
pub mod prior;
pub mod rng;
pub mod schedule;
pub mod teacher;

pub use config::RunConfig;
pub use consistency::{ConsistencyModel, DistillConfig, Distiller, Metric, MetricKind};
pub use ddpnet::{BanditTransition, DdpConfig, PolicyNet, PolicyTrainer};
pub use error::{Error, Result};
pub use eval::{EvalConfig, EvalReport};
pub use net::{Activation, NetParams, NetSpec, Optimizer, OptimizerConfig, OptimizerKind};
pub use prior::{DatasetSpec, DegradeSpec, Family, SceneSample, Split};
pub use schedule::{NoiseSchedule, ScheduleConfig, ScheduleKind};
pub use teacher::{GaussianOracle, NoisePredictor, SolverKind, TeacherConfig, TeacherModel};
