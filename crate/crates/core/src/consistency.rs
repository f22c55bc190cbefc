//! Consistency student and leap-flow distillation.
//!
//! The student is `f(x, t) = c_skip(t) x + c_out(t) F(x, t, cond)` with
//! `c_skip(eps) = 1` and `c_out(eps) = 0`, so `f(., eps)` is the identity.
//! Distillation pairs adjacent grid times `t_n < t_{n+1}`: the live student at
//! `(x_{t_{n+1}}, t_{n+1})` is pulled toward the EMA student evaluated on the
//! teacher's one-step estimate of `x_{t_n}`. In leap-flow mode the corrupted
//! latent is built from the coarse prior and `t_{n+1}` never exceeds `T'`;
//! in standard mode it is built from ground truth over the whole grid.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::net::{NetParams, Optimizer, OptimizerConfig};
use crate::par;
use crate::prior::SceneSample;
use crate::rng::{self, domain};
use crate::schedule::NoiseSchedule;
use crate::teacher::{solver_step, NoisePredictor, TeacherModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    L2,
    PseudoHuber,
}

/// Distance between two latents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    /// Squared Euclidean distance.
    L2,
    /// `sqrt(|a - b|^2 + c^2) - c`.
    PseudoHuber { c: f64 },
}

impl Metric {
    pub fn new(kind: MetricKind, huber_c: Option<f64>, latent_dim: usize) -> Result<Self> {
        match kind {
            MetricKind::L2 => Ok(Metric::L2),
            MetricKind::PseudoHuber => {
                let c = huber_c.unwrap_or(0.001 * (latent_dim as f64).sqrt());
                if !(c > 0.0) {
                    return Err(Error::Config(format!("pseudo-Huber c must be positive, got {c}")));
                }
                Ok(Metric::PseudoHuber { c })
            }
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match *self {
            Metric::L2 => sq,
            Metric::PseudoHuber { c } => (sq + c * c).sqrt() - c,
        }
    }

    /// `(d(a, b), d/da d(a, b))`.
    pub fn distance_and_grad(&self, a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let sq: f64 = diff.iter().map(|d| d * d).sum();
        match *self {
            Metric::L2 => (sq, diff.iter().map(|d| 2.0 * d).collect()),
            Metric::PseudoHuber { c } => {
                let r = (sq + c * c).sqrt();
                (r - c, diff.iter().map(|d| d / r).collect())
            }
        }
    }
}

/// The `[distill]` section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub metric: MetricKind,
    /// Defaults to `0.001 * sqrt(latent_dim)`.
    pub huber_c: Option<f64>,
    pub iterations: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub ema_rate: f64,
    pub sigma_data: f64,
    /// Corrupt the coarse prior with times capped at `T'` (leap flow) rather
    /// than ground truth over the full grid.
    pub leap: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::PseudoHuber,
            huber_c: None,
            iterations: 2000,
            batch: 64,
            optimizer: OptimizerConfig::adam(1e-3),
            ema_rate: 0.95,
            sigma_data: 0.5,
            leap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyModel {
    /// Body `F` plus its EMA shadow.
    pub params: NetParams,
    pub sched: NoiseSchedule,
    pub sigma_data: f64,
    pub iteration: u64,
}

impl ConsistencyModel {
    pub fn new(params: NetParams, sched: NoiseSchedule, sigma_data: f64) -> Result<Self> {
        let spec = params.spec();
        if spec.output_dim() != spec.data_dim() {
            return Err(Error::Shape {
                context: "consistency body output",
                expected: spec.data_dim(),
                got: spec.output_dim(),
            });
        }
        if !(sigma_data > 0.0) {
            return Err(Error::Config(format!("sigma_data must be positive, got {sigma_data}")));
        }
        Ok(Self {
            params,
            sched,
            sigma_data,
            iteration: 0,
        })
    }

    /// Student whose body starts as a copy of the teacher's network, with the
    /// EMA shadow synced to it.
    pub fn from_teacher(teacher: &TeacherModel, sigma_data: f64, ema_rate: f64) -> Result<Self> {
        let p = &teacher.params;
        let params = NetParams::from_flat(p.spec().clone(), p.flat().to_vec(), p.flat().to_vec(), ema_rate)?;
        Self::new(params, teacher.sched.clone(), sigma_data)
    }

    pub fn latent_dim(&self) -> usize {
        self.params.spec().data_dim()
    }

    pub fn c_skip(&self, t: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        let u = t - self.sched.eps();
        sd2 / (u * u + sd2)
    }

    pub fn c_out(&self, t: f64) -> f64 {
        let sd = self.sigma_data;
        sd * (t - self.sched.eps()) / (sd * sd + t * t).sqrt()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let (lo, hi) = (self.sched.eps(), self.sched.t_max());
        if !(lo..=hi).contains(&t) {
            return Err(Error::Domain {
                what: "t",
                value: t,
                lo,
                hi,
            });
        }
        Ok(())
    }

    fn cond<'a>(&self, cond: Option<&'a [f64]>) -> Option<&'a [f64]> {
        if self.params.spec().cond_dim > 0 {
            cond
        } else {
            None
        }
    }

    fn combine(&self, x: &[f64], body: &[f64], t: f64) -> Vec<f64> {
        let (cs, co) = (self.c_skip(t), self.c_out(t));
        x.iter().zip(body).map(|(xi, fi)| cs * xi + co * fi).collect()
    }

    /// `f_theta(x, t)` with the live parameters.
    pub fn forward(&self, x: &[f64], t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_time(t)?;
        let body = self.params.forward(x, t / self.sched.t_max(), self.cond(cond))?;
        Ok(self.combine(x, &body, t))
    }

    /// `f_theta-(x, t)` with the EMA parameters.
    pub fn forward_ema(&self, x: &[f64], t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_time(t)?;
        let body = self.params.forward_ema(x, t / self.sched.t_max(), self.cond(cond))?;
        Ok(self.combine(x, &body, t))
    }

    /// One-step generation from the coarse prior at leap time `t_leap`.
    pub fn one_step_generate(&self, sample: &SceneSample, t_leap: f64, noise: &[f64]) -> Result<Vec<f64>> {
        let (lo, hi) = (self.sched.eps(), self.sched.t_prime());
        if !(lo..=hi).contains(&t_leap) {
            return Err(Error::Domain {
                what: "t_leap",
                value: t_leap,
                lo,
                hi,
            });
        }
        let xt = self.sched.forward_diffuse(&sample.x0_r, noise, t_leap)?;
        self.forward(&xt, t_leap, Some(&sample.cond))
    }

    /// Alternating denoise / re-noise sampling: one-step generation at
    /// `t_leap`, then `n_steps - 1` further evaluations at decreasing grid
    /// times, each after re-noising the current estimate with fresh noise.
    pub fn multistep_generate(
        &self,
        sample: &SceneSample,
        t_leap: f64,
        n_steps: usize,
        rng: &mut rng::Rng,
    ) -> Result<Vec<f64>> {
        if n_steps < 1 {
            return Err(Error::Index {
                index: 0,
                lo: 1,
                hi: self.sched.grid().len(),
            });
        }
        let noise = rng::normal_vec(rng, sample.x0_r.len());
        let mut x = self.one_step_generate(sample, t_leap, &noise)?;
        let times = crate::teacher::step_times(&self.sched, t_leap, n_steps);
        for &t in &times[1..n_steps] {
            let z = rng::normal_vec(rng, x.len());
            let xt = self.sched.forward_diffuse(&x, &z, t)?;
            x = self.forward(&xt, t, Some(&sample.cond))?;
        }
        Ok(x)
    }

    /// Generation from pure noise at `T` (standard consistency sampling).
    pub fn generate_from_noise(&self, noise: &[f64], cond: Option<&[f64]>) -> Result<Vec<f64>> {
        self.forward(noise, self.sched.t_max(), cond)
    }

    /// Largest pairwise distance between student outputs along one teacher
    /// probability-flow trajectory through `t_list` (ascending, within
    /// `[eps, T']`). The trajectory starts from the coarse prior corrupted to
    /// the largest listed time and visits every grid point in between.
    pub fn self_consistency_gap(
        &self,
        teacher: &TeacherModel,
        x0r: &[f64],
        cond: Option<&[f64]>,
        t_list: &[f64],
        noise: &[f64],
    ) -> Result<f64> {
        let (lo, hi) = (self.sched.eps(), self.sched.t_prime());
        if t_list.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("t_list must be sorted ascending".into()));
        }
        for &t in t_list {
            if !(lo..=hi).contains(&t) {
                return Err(Error::Domain {
                    what: "t_list entry",
                    value: t,
                    lo,
                    hi,
                });
            }
        }
        let Some(&t_top) = t_list.last() else {
            return Ok(0.0);
        };
        if t_list.len() == 1 {
            return Ok(0.0);
        }
        let mut x = self.sched.forward_diffuse(x0r, noise, t_top)?;
        let mut outputs = Vec::with_capacity(t_list.len());
        let mut t_cur = t_top;
        outputs.push(self.forward(&x, t_cur, cond)?);
        for &target in t_list.iter().rev().skip(1) {
            let mut stops: Vec<f64> = self
                .sched
                .grid()
                .iter()
                .copied()
                .filter(|&g| g < t_cur && g > target)
                .rev()
                .collect();
            stops.push(target);
            for s in stops {
                x = solver_step(teacher, teacher.solver, &x, t_cur, s, cond)?;
                t_cur = s;
            }
            outputs.push(self.forward(&x, t_cur, cond)?);
        }
        let mut gap: f64 = 0.0;
        for i in 0..outputs.len() {
            for j in i + 1..outputs.len() {
                let d: f64 = outputs[i]
                    .iter()
                    .zip(&outputs[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                gap = gap.max(d);
            }
        }
        Ok(gap)
    }
}

/// Noise estimate implied by the consistency output:
/// `eps_hat = (x - alpha_t f(x, t)) / sigma_t`.
impl NoisePredictor for ConsistencyModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn predict_eps(&self, x: &[f64], t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        let f = self.forward(x, t, cond)?;
        let (a, s) = self.sched.alpha_sigma(t)?;
        if s == 0.0 {
            return Err(Error::Singular(format!("sigma vanishes at t = {t}")));
        }
        Ok(x.iter().zip(&f).map(|(xi, fi)| (xi - a * fi) / s).collect())
    }
}

/// Loss and gradient of one distillation batch, before any update.
#[derive(Debug, Clone)]
pub struct DistillGrad {
    pub loss: f64,
    pub t_mean: f64,
    pub grad: Vec<f64>,
}

/// Per-sample draw of one distillation term.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillDraw {
    pub grid_index: usize,
    pub t_n: f64,
    pub t_next: f64,
    pub noise: Vec<f64>,
}

/// Draws the grid index and noise for batch element `b` of `iteration`.
pub fn draw_term(sched: &NoiseSchedule, leap: bool, latent_dim: usize, seed: u64, iteration: u64, b: usize) -> Result<DistillDraw> {
    let mut r = rng::stream2(seed, domain::DISTILL, iteration, b as u64);
    let grid_index = if leap {
        let idx = sched.leap_indices();
        if idx.is_empty() {
            return Err(Error::Config("no grid time lies within (eps, T']".into()));
        }
        idx[rng::below(&mut r, idx.len())]
    } else {
        1 + rng::below(&mut r, sched.grid().len() - 1)
    };
    let (t_n, t_next) = sched.grid_index_pair(grid_index)?;
    if leap && t_next > sched.t_prime() {
        return Err(Error::Contract(format!(
            "sampled t_next = {t_next} exceeds leap cap {}",
            sched.t_prime()
        )));
    }
    let noise = rng::normal_vec(&mut r, latent_dim);
    Ok(DistillDraw {
        grid_index,
        t_n,
        t_next,
        noise,
    })
}

/// Evaluates the distillation loss `mean_b d(f_theta(x_{n+1}), f_theta-(x_hat_n))`
/// and its gradient with respect to the live parameters. The EMA branch is a
/// constant target: no gradient flows through it.
pub fn distill_loss_and_grad(
    student: &ConsistencyModel,
    teacher: &TeacherModel,
    batch: &[&SceneSample],
    metric: Metric,
    leap: bool,
    seed: u64,
) -> Result<DistillGrad> {
    if batch.is_empty() {
        return Err(Error::Config("distillation batch is empty".into()));
    }
    let iter = student.iteration;
    let sched = &student.sched;
    let t_max = sched.t_max();
    let dim = student.latent_dim();
    let scale = 1.0 / batch.len() as f64;
    let (parts, grad) = par::try_map_accumulate(batch.len(), student.params.flat().len(), |b, acc| {
        let s = batch[b];
        check_len("distillation sample", dim, &s.x0)?;
        let draw = draw_term(sched, leap, dim, seed, iter, b)?;
        let source = if leap { &s.x0_r } else { &s.x0 };
        let cond = Some(s.cond.as_slice());
        let x_next = sched.forward_diffuse(source, &draw.noise, draw.t_next)?;
        let x_hat = solver_step(teacher, teacher.solver, &x_next, draw.t_next, draw.t_n, cond)?;
        let target = student.forward_ema(&x_hat, draw.t_n, cond)?;

        let (body, cache) = student
            .params
            .forward_cached(&x_next, draw.t_next / t_max, student.cond(cond))?;
        let pred = student.combine(&x_next, &body, draw.t_next);
        let (loss, dpred) = metric.distance_and_grad(&pred, &target);
        let c_out = student.c_out(draw.t_next);
        let up: Vec<f64> = dpred.iter().map(|g| g * c_out * scale).collect();
        student.params.backward_into(&cache, &up, acc)?;
        Ok((loss, draw.t_next))
    })?;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() * scale;
    let t_mean = parts.iter().map(|p| p.1).sum::<f64>() * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: format!("distillation loss at iteration {iter}"),
            index: 0,
        });
    }
    check_finite(format!("distillation gradient at iteration {iter}"), &grad)?;
    Ok(DistillGrad { loss, t_mean, grad })
}

/// Drives the distillation loop: minibatch draw, loss/gradient, optimizer
/// step, EMA update.
#[derive(Debug, Clone)]
pub struct Distiller {
    pub cfg: DistillConfig,
    pub metric: Metric,
    pub opt: Optimizer,
    pub seed: u64,
}

/// Outcome of one [`Distiller::step`].
#[derive(Debug, Clone)]
pub struct StepStats {
    pub iteration: u64,
    pub loss: f64,
    pub t_mean: f64,
    /// Dataset indices used in this iteration's batch.
    pub batch: Vec<usize>,
}

impl Distiller {
    pub fn new(cfg: DistillConfig, student: &ConsistencyModel, seed: u64) -> Result<Self> {
        let metric = Metric::new(cfg.metric, cfg.huber_c, student.latent_dim())?;
        let opt = Optimizer::new(cfg.optimizer.clone(), student.params.flat().len())?;
        Ok(Self { cfg, metric, opt, seed })
    }

    pub fn draw_batch(&self, iteration: u64, n_data: usize) -> Vec<usize> {
        let mut r = rng::stream2(self.seed, domain::DISTILL, iteration, u64::MAX);
        (0..self.cfg.batch).map(|_| rng::below(&mut r, n_data)).collect()
    }

    /// Applies one update to `student` on a batch given by dataset indices.
    pub fn step_on(
        &mut self,
        student: &mut ConsistencyModel,
        teacher: &TeacherModel,
        batch: &[&SceneSample],
    ) -> Result<(f64, f64)> {
        let g = distill_loss_and_grad(student, teacher, batch, self.metric, self.cfg.leap, self.seed)?;
        self.opt.step(&mut student.params, &g.grad)?;
        student.params.ema_update();
        student.iteration += 1;
        Ok((g.loss, g.t_mean))
    }

    pub fn step(
        &mut self,
        student: &mut ConsistencyModel,
        teacher: &TeacherModel,
        data: &[SceneSample],
    ) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::Config("distillation set is empty".into()));
        }
        let iteration = student.iteration;
        let idx = self.draw_batch(iteration, data.len());
        let batch: Vec<&SceneSample> = idx.iter().map(|&i| &data[i]).collect();
        let (loss, t_mean) = self.step_on(student, teacher, &batch)?;
        Ok(StepStats {
            iteration,
            loss,
            t_mean,
            batch: idx,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, NetSpec};
    use crate::rng::stream;
    use crate::schedule::ScheduleConfig;
    use crate::teacher::SolverKind;

    fn toy(dim: usize, seed: u64) -> (ConsistencyModel, TeacherModel) {
        let sched = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let spec = NetSpec::mlp(dim, &[6], dim, Activation::Tanh, 4, dim).unwrap();
        let tp = NetParams::init(spec.clone(), 0.9, 0.5, &mut stream(seed, 0, 0)).unwrap();
        let teacher = TeacherModel::new(tp, sched.clone(), SolverKind::Ddim).unwrap();
        let sp = NetParams::init(spec, 0.9, 1.0, &mut stream(seed, 0, 1)).unwrap();
        (ConsistencyModel::new(sp, sched, 0.5).unwrap(), teacher)
    }

    fn sample(dim: usize, seed: u64) -> SceneSample {
        let mut r = stream(seed, 9, 0);
        SceneSample {
            x0: rng::normal_vec(&mut r, dim),
            x0_r: rng::normal_vec(&mut r, dim),
            cond: rng::normal_vec(&mut r, dim),
            q: 0.5,
        }
    }

    #[test]
    fn boundary_is_identity() {
        let (m, _) = toy(4, 1);
        let x = vec![0.3, -2.0, 5.0, 1e-3];
        assert_eq!(m.forward(&x, m.sched.eps(), Some(&[0.0; 4])).unwrap(), x);
        assert_eq!(m.c_skip(m.sched.eps()), 1.0);
        assert_eq!(m.c_out(m.sched.eps()), 0.0);
    }

    #[test]
    fn zero_body_gives_skip_scaled_input() {
        let (m, _) = toy(2, 1);
        let zero = ConsistencyModel::new(NetParams::zeros(m.params.spec().clone(), 0.9).unwrap(), m.sched.clone(), 0.5).unwrap();
        let x = [1.0, -3.0];
        let out = zero.forward(&x, 0.4, Some(&[0.0, 0.0])).unwrap();
        let cs = zero.c_skip(0.4);
        assert_eq!(out, vec![cs, -3.0 * cs]);
    }

    #[test]
    fn coefficients_at_half_sigma_data() {
        let (m, _) = toy(2, 1);
        let t = m.sched.eps() + 0.5;
        assert!((m.c_skip(t) - 0.5).abs() < 1e-15);
        let expected = 0.5 * 0.5 / (0.25 + t * t).sqrt();
        assert!((m.c_out(t) - expected).abs() < 1e-15);
        // Full output with the fixture body.
        let x = [0.2, -0.1];
        let c = [0.0, 0.0];
        let body = m.params.forward(&x, t, Some(&c)).unwrap();
        let out = m.forward(&x, t, Some(&c)).unwrap();
        for i in 0..2 {
            assert!((out[i] - (0.5 * x[i] + expected * body[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_time_rejected() {
        let (m, _) = toy(2, 1);
        assert!(m.forward(&[0.0, 0.0], 1.2, Some(&[0.0, 0.0])).is_err());
        assert!(m.forward(&[0.0, 0.0], 0.0, Some(&[0.0, 0.0])).is_err());
        let s = sample(2, 3);
        assert!(matches!(m.one_step_generate(&s, 0.7, &[0.0, 0.0]), Err(Error::Domain { .. })));
    }

    #[test]
    fn metric_symmetry() {
        for metric in [Metric::L2, Metric::PseudoHuber { c: 0.01 }] {
            let a = [0.3, -1.0, 2.0];
            let b = [1.0, 0.5, -0.2];
            assert_eq!(metric.distance(&a, &b), metric.distance(&b, &a));
            assert_eq!(metric.distance(&a, &a), 0.0);
        }
    }

    #[test]
    fn single_time_gap_is_zero() {
        let (m, t) = toy(2, 1);
        let g = m
            .self_consistency_gap(&t, &[0.1, 0.2], Some(&[0.0, 0.0]), &[0.3], &[0.5, 0.5])
            .unwrap();
        assert_eq!(g, 0.0);
        assert!(m
            .self_consistency_gap(&t, &[0.1, 0.2], Some(&[0.0, 0.0]), &[0.3, 0.2], &[0.5, 0.5])
            .is_err());
    }

    #[test]
    fn one_step_at_boundary_returns_noised_prior() {
        let (m, _) = toy(2, 1);
        let s = sample(2, 4);
        let noise = [0.7, -0.3];
        let out = m.one_step_generate(&s, m.sched.eps(), &noise).unwrap();
        let expected = m.sched.forward_diffuse(&s.x0_r, &noise, m.sched.eps()).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn frozen_configuration_has_constant_loss() {
        let (mut m, t) = toy(3, 2);
        m.params = NetParams::from_flat(m.params.spec().clone(), m.params.flat().to_vec(), m.params.flat().to_vec(), 1.0).unwrap();
        let cfg = DistillConfig {
            batch: 4,
            optimizer: OptimizerConfig::sgd(0.0),
            ema_rate: 1.0,
            ..Default::default()
        };
        let data: Vec<SceneSample> = (0..4).map(|i| sample(3, i)).collect();
        let batch: Vec<&SceneSample> = data.iter().collect();
        let mut d = Distiller::new(cfg, &m, 11).unwrap();
        let before = (m.params.flat().to_vec(), m.params.ema_flat().to_vec());
        let mut losses = Vec::new();
        for _ in 0..3 {
            m.iteration = 0;
            losses.push(d.step_on(&mut m, &t, &batch).unwrap().0);
        }
        assert_eq!(before, (m.params.flat().to_vec(), m.params.ema_flat().to_vec()));
        assert!(losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn leap_draws_respect_cap() {
        let sched = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        for i in 0..10_000u64 {
            let d = draw_term(&sched, true, 1, 3, i / 64, (i % 64) as usize).unwrap();
            assert!(d.t_next <= sched.t_prime());
            assert!(d.t_n < d.t_next);
        }
    }
}
