//! Shared finite-difference helpers and small fixtures.
#![allow(dead_code)]

use leapflow::consistency::distill_loss_and_grad;
use leapflow::ddpnet::arm_times;
use leapflow::net::NetParams;
use leapflow::prior::make_dataset;
use leapflow::rng;
use leapflow::{
    Activation, BanditTransition, ConsistencyModel, DatasetSpec, DdpConfig, Metric, MetricKind, NoiseSchedule,
    PolicyNet, SceneSample, ScheduleConfig, Split, TeacherConfig, TeacherModel,
};

pub const H: f64 = 1e-5;

/// Norm-wise relative error between two gradients.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

pub fn central_diff(params: &mut NetParams, mut loss: impl FnMut(&NetParams) -> f64) -> Vec<f64> {
    (0..params.flat().len())
        .map(|i| {
            let x = params.flat()[i];
            params.flat_mut()[i] = x + H;
            let up = loss(params);
            params.flat_mut()[i] = x - H;
            let down = loss(params);
            params.flat_mut()[i] = x;
            (up - down) / (2.0 * H)
        })
        .collect()
}

pub struct Config {
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub metric: MetricKind,
}

pub fn configs() -> Vec<Config> {
    vec![
        Config { seed: 1, hidden: vec![8], activation: Activation::Silu, metric: MetricKind::PseudoHuber },
        Config { seed: 2, hidden: vec![6, 5], activation: Activation::Tanh, metric: MetricKind::L2 },
        Config { seed: 3, hidden: vec![10], activation: Activation::Tanh, metric: MetricKind::PseudoHuber },
        Config { seed: 4, hidden: vec![4, 4, 4], activation: Activation::Silu, metric: MetricKind::L2 },
        Config { seed: 5, hidden: vec![7, 3], activation: Activation::Silu, metric: MetricKind::PseudoHuber },
        Config { seed: 6, hidden: vec![5], activation: Activation::Tanh, metric: MetricKind::L2 },
    ]
}

pub fn small_data(seed: u64) -> Vec<SceneSample> {
    let spec = DatasetSpec {
        latent_dim: 8,
        frames: 4,
        n_train: 6,
        n_eval: 1,
        seed,
        ..DatasetSpec::default()
    };
    make_dataset(&spec, Split::Train).unwrap()
}

pub fn small_teacher(c: &Config) -> TeacherModel {
    let cfg = TeacherConfig {
        hidden: c.hidden.clone(),
        activation: c.activation,
        time_embed_dim: 4,
        ..TeacherConfig::default()
    };
    let sched = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
    TeacherModel::init(&cfg, sched, 8, c.seed).unwrap()
}

/// Moves every parameter off its initial value so no layer sits at zero.
pub fn jitter(p: &mut NetParams, seed: u64, scale: f64) {
    let mut r = rng::stream(seed, 0x99, 0);
    for v in p.flat_mut() {
        *v += scale * rng::normal(&mut r);
    }
}

pub fn student_pair(c: &Config) -> (TeacherModel, ConsistencyModel) {
    let teacher = small_teacher(c);
    let mut student = ConsistencyModel::from_teacher(&teacher, 0.5, 0.95).unwrap();
    jitter(&mut student.params, c.seed + 100, 0.1);
    let mut r = rng::stream(c.seed, 0x98, 0);
    for v in student.params.ema_flat_mut() {
        *v += 0.1 * rng::normal(&mut r);
    }
    (teacher, student)
}

pub fn distill_loss(student: &ConsistencyModel, teacher: &TeacherModel, batch: &[&SceneSample], metric: Metric, seed: u64) -> f64 {
    distill_loss_and_grad(student, teacher, batch, metric, true, seed).unwrap().loss
}

/// Relative error of the teacher loss gradient against central differences.
pub fn teacher_fd_error(c: &Config) -> f64 {
    let data = small_data(c.seed);
    let batch: Vec<&SceneSample> = data.iter().collect();
    let mut t = small_teacher(c);
    jitter(&mut t.params, c.seed, 0.1);
    let (_, grad) = t.loss_and_grad(&batch, c.seed).unwrap();
    let (sched, solver) = (t.sched.clone(), t.solver);
    let mut params = t.params.clone();
    let fd = central_diff(&mut params, |p| {
        let m = TeacherModel::new(p.clone(), sched.clone(), solver).unwrap();
        m.loss_and_grad(&batch, c.seed).unwrap().0
    });
    rel_err(&grad, &fd)
}

/// Central differences of the distillation loss in the live weights; with
/// `tied`, the target weights move along with them.
fn distill_fd(student: &ConsistencyModel, teacher: &TeacherModel, batch: &[&SceneSample], metric: Metric, seed: u64, tied: bool) -> Vec<f64> {
    let mut s = student.clone();
    (0..s.params.flat().len())
        .map(|i| {
            let x = s.params.flat()[i];
            let at = |v: f64, s: &mut ConsistencyModel| {
                s.params.flat_mut()[i] = v;
                if tied {
                    s.params.ema_flat_mut()[i] = v;
                }
                distill_loss(s, teacher, batch, metric, seed)
            };
            let up = at(x + H, &mut s);
            let down = at(x - H, &mut s);
            at(x, &mut s);
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Relative error of the distillation gradient against central differences
/// with the target weights held fixed.
pub fn student_fd_error(c: &Config) -> f64 {
    let data = small_data(c.seed);
    let batch: Vec<&SceneSample> = data.iter().collect();
    let (teacher, student) = student_pair(c);
    let metric = Metric::new(c.metric, None, 8).unwrap();
    let grad = distill_loss_and_grad(&student, &teacher, &batch, metric, true, c.seed).unwrap().grad;
    rel_err(&grad, &distill_fd(&student, &teacher, &batch, metric, c.seed, false))
}

/// Relative distance between the distillation gradient and the derivative
/// obtained when live and target weights start equal and move together.
pub fn student_tied_distance(c: &Config) -> f64 {
    let data = small_data(c.seed);
    let batch: Vec<&SceneSample> = data.iter().collect();
    let (teacher, mut student) = student_pair(c);
    student.params.sync_ema();
    let metric = Metric::new(c.metric, None, 8).unwrap();
    let grad = distill_loss_and_grad(&student, &teacher, &batch, metric, true, c.seed).unwrap().grad;
    rel_err(&grad, &distill_fd(&student, &teacher, &batch, metric, c.seed, true))
}

pub fn sampled_transitions(policy: &PolicyNet, data: &[SceneSample], seed: u64) -> Vec<BanditTransition> {
    let mut r = rng::stream(seed, 0x97, 0);
    data.iter()
        .map(|s| {
            let (arm, log_prob) = policy.sample_arm(&s.x0_r, &mut r).unwrap();
            BanditTransition {
                state: s.x0_r.clone(),
                arm,
                log_prob,
                reward: -rng::uniform(&mut r),
            }
        })
        .collect()
}

pub fn log_prob(policy: &PolicyNet, tr: &BanditTransition) -> f64 {
    policy.policy_forward(&tr.state).unwrap()[tr.arm].ln()
}

/// Relative error of the REINFORCE gradient against central differences of
/// the surrogate loss.
pub fn policy_fd_error(c: &Config) -> f64 {
    let sched = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
    let cfg = DdpConfig {
        n_arms: 4 + c.seed as usize % 3,
        hidden: c.hidden.clone(),
        activation: c.activation,
        ..DdpConfig::default()
    };
    let mut policy = PolicyNet::init(&cfg, &sched, 8, c.seed).unwrap();
    jitter(&mut policy.params, c.seed, 0.3);
    let data = small_data(c.seed);
    let trs = sampled_transitions(&policy, &data, c.seed);
    let baseline = -0.4;
    let (_, grad) = policy.reinforce_loss_and_grad(&trs, baseline).unwrap();
    let times = arm_times(&sched, cfg.n_arms);
    let mut params = policy.params.clone();
    let fd = central_diff(&mut params, |p| {
        let pol = PolicyNet::new(p.clone(), times.clone()).unwrap();
        -trs.iter().map(|t| (t.reward - baseline) * log_prob(&pol, t)).sum::<f64>() / trs.len() as f64
    });
    rel_err(&grad, &fd)
}
