//! Run configuration: TOML with one table per module.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/demo"
//!
//! [schedule]
//! kind = "vp_cosine"
//! t_prime = 0.6
//!
//! [distill]
//! iterations = 2000
//! ```
//!
//! Every key is optional and defaults as documented on the section types.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consistency::DistillConfig;
use crate::ddpnet::DdpConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::prior::DatasetSpec;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::teacher::TeacherConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetSpec,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub ddp: DdpConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            schedule: ScheduleConfig::default(),
            dataset: DatasetSpec::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            ddp: DdpConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configuration is always serialisable")
    }

    /// Dataset spec carrying the run seed.
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed,
            ..self.dataset.clone()
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let sched = self.schedule()?;
        self.dataset.validate()?;
        let n_grid = sched.grid().len();
        if let Some(&bad) = self.eval.steps.iter().find(|&&n| n < 1 || n > n_grid) {
            return Err(Error::Config(format!("eval.steps entry {bad} outside 1..={n_grid}")));
        }
        if self.ddp.n_arms < 1 {
            return Err(Error::Config("ddp.n_arms must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ddp.active_fraction) {
            return Err(Error::Config(format!(
                "ddp.active_fraction must lie in [0, 1], got {}",
                self.ddp.active_fraction
            )));
        }
        for (name, b) in [("teacher.batch", self.teacher.batch), ("distill.batch", self.distill.batch)] {
            if b == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, r) in [("teacher.ema_rate", self.teacher.ema_rate), ("distill.ema_rate", self.distill.ema_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        if let Some(t) = self.eval.fixed_leap {
            if !(sched.eps()..=sched.t_prime()).contains(&t) {
                return Err(Error::Config(format!("eval.fixed_leap = {t} outside [eps, t_prime]")));
            }
        }
        if self.eval.ablation_seeds < 1 {
            return Err(Error::Config("eval.ablation_seeds must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml_str("[distill]\niteratons = 5\n").unwrap_err();
        assert!(err.to_string().contains("iteratons"), "{err}");
        let err = RunConfig::from_toml_str("sed = 1\n").unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.distill.huber_c = Some(0.01);
        cfg.eval.steps = vec![1, 2];
        cfg.dataset.degradation.noise_scale = 0.1 + 0.2;
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("[schedule]\nt_prime = 2.0\n").is_err());
        assert!(RunConfig::from_toml_str("[eval]\nsteps = [0]\n").is_err());
        assert!(RunConfig::from_toml_str("[ddp]\nactive_fraction = 1.5\n").is_err());
    }
}
