//! The teacher noise predictor, closed-form Gaussian oracle, and the
//! deterministic probability-flow solvers built on top of them.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::net::{Activation, NetParams, NetSpec, Optimizer, OptimizerConfig};
use crate::par;
use crate::prior::SceneSample;
use crate::rng::{self, domain};
use crate::schedule::NoiseSchedule;

/// Below this `alpha` a corrupted latent carries no usable information about
/// the data and the data estimate falls back to the zero-mean prior.
pub const ALPHA_SINGULAR: f64 = 1e-8;

/// Noise and data estimates for a corrupted latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub eps: Vec<f64>,
    pub x0: Vec<f64>,
}

/// Anything that estimates the noise in `x_t = alpha_t x0 + sigma_t eps`.
pub trait NoisePredictor: Sync {
    fn schedule(&self) -> &NoiseSchedule;

    fn predict_eps(&self, x: &[f64], t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>>;

    /// Noise estimate together with `x0_hat = (x - sigma eps_hat) / alpha`.
    fn predict(&self, x: &[f64], t: f64, cond: Option<&[f64]>) -> Result<Prediction> {
        let eps = self.predict_eps(x, t, cond)?;
        let x0 = x0_from_eps(self.schedule(), x, &eps, t)?;
        Ok(Prediction { eps, x0 })
    }
}

/// `(x - sigma_t eps) / alpha_t`, or zeros where `alpha_t` vanishes.
pub fn x0_from_eps(sched: &NoiseSchedule, x: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len("noise estimate", x.len(), eps)?;
    let (a, s) = sched.alpha_sigma(t)?;
    if a < ALPHA_SINGULAR {
        return Ok(vec![0.0; x.len()]);
    }
    Ok(x.iter().zip(eps).map(|(xi, ei)| (xi - s * ei) / a).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Predict `x0_hat`, then re-noise deterministically to the target time.
    #[default]
    Ddim,
    /// Literal Euler step along the probability-flow drift.
    Euler,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Ddim => "ddim",
            SolverKind::Euler => "euler",
        }
    }
}

/// Probability-flow drift `dx/dt` in terms of a noise estimate.
pub fn pf_ode_drift(sched: &NoiseSchedule, x: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    use crate::schedule::ScheduleKind;
    let (a, s) = sched.alpha_sigma(t)?;
    let t_max = sched.t_max();
    let (da, ds) = match sched.kind() {
        ScheduleKind::VpCosine => {
            let w = std::f64::consts::FRAC_PI_2 / t_max;
            (-w * s, w * a)
        }
        ScheduleKind::VpLinear => {
            let c = 1.0 - crate::schedule::VP_LINEAR_ALPHA2_FLOOR;
            if s == 0.0 {
                return Err(Error::Singular(format!("drift of vp_linear at t = {t}")));
            }
            (-c / (2.0 * t_max * a), c / (2.0 * t_max * s))
        }
        ScheduleKind::EdmIdentity => (0.0, 1.0),
    };
    if a < ALPHA_SINGULAR {
        return Err(Error::Singular(format!("alpha vanishes at t = {t}")));
    }
    let cx = da / a;
    let ce = ds - s * da / a;
    Ok(x.iter().zip(eps).map(|(xi, ei)| cx * xi + ce * ei).collect())
}

/// One deterministic step from `t_from` down to `t_to` (clamped at `eps`).
pub fn solver_step<P: NoisePredictor + ?Sized>(
    model: &P,
    solver: SolverKind,
    x: &[f64],
    t_from: f64,
    t_to: f64,
    cond: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let sched = model.schedule();
    let t_to = t_to.max(sched.eps());
    if t_to > t_from {
        return Err(Error::Domain {
            what: "t_to",
            value: t_to,
            lo: sched.eps(),
            hi: t_from,
        });
    }
    if t_from > sched.t_max() {
        return Err(Error::Domain {
            what: "t_from",
            value: t_from,
            lo: sched.eps(),
            hi: sched.t_max(),
        });
    }
    if t_to == t_from {
        return Ok(x.to_vec());
    }
    let (_, s_from) = sched.alpha_sigma(t_from)?;
    if s_from == 0.0 {
        return Err(Error::Singular(format!("sigma vanishes at t_from = {t_from}")));
    }
    match solver {
        SolverKind::Ddim => {
            let p = model.predict(x, t_from, cond)?;
            let (a_to, s_to) = sched.alpha_sigma(t_to)?;
            Ok(p.x0.iter().zip(&p.eps).map(|(x0, e)| a_to * x0 + s_to * e).collect())
        }
        SolverKind::Euler => {
            let eps = model.predict_eps(x, t_from, cond)?;
            let drift = pf_ode_drift(sched, x, &eps, t_from)?;
            let h = t_to - t_from;
            Ok(x.iter().zip(&drift).map(|(xi, d)| xi + h * d).collect())
        }
    }
}

/// Times visited by an `n_steps` sampler starting at `t_start`: the start
/// followed by `n_steps` grid points evenly spaced in index down to `eps`.
pub fn step_times(sched: &NoiseSchedule, t_start: f64, n_steps: usize) -> Vec<f64> {
    let top = sched.index_at_or_below(t_start);
    let mut times = Vec::with_capacity(n_steps + 1);
    times.push(t_start);
    for j in 1..=n_steps {
        let idx = ((top * (n_steps - j)) as f64 / n_steps as f64).round() as usize;
        times.push(sched.grid()[idx]);
    }
    times
}

/// Deterministic multi-step sampling from `start` at `t_start` down to `eps`.
pub fn sample<P: NoisePredictor + ?Sized>(
    model: &P,
    solver: SolverKind,
    n_steps: usize,
    start: &[f64],
    t_start: f64,
    cond: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let sched = model.schedule();
    let n_grid = sched.grid().len();
    if n_steps < 1 || n_steps > n_grid {
        return Err(Error::Index {
            index: n_steps,
            lo: 1,
            hi: n_grid,
        });
    }
    if t_start > sched.t_max() {
        return Err(Error::Domain {
            what: "t_start",
            value: t_start,
            lo: sched.eps(),
            hi: sched.t_max(),
        });
    }
    let times = step_times(sched, t_start, n_steps);
    let mut x = start.to_vec();
    for w in times.windows(2) {
        x = solver_step(model, solver, &x, w[0], w[1], cond)?;
    }
    Ok(x)
}

/// Closed-form noise and data estimates for diagonal Gaussian data.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
    sched: NoiseSchedule,
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, cov_diag: Vec<f64>, sched: NoiseSchedule) -> Result<Self> {
        check_len("oracle covariance", mean.len(), &cov_diag)?;
        if let Some(i) = cov_diag.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Config(format!("oracle variance at {i} must be positive")));
        }
        Ok(Self { mean, cov_diag, sched })
    }

    /// Score of the marginal at time `t`.
    pub fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let (a, s) = self.sched.alpha_sigma(t)?;
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.cov_diag))
            .map(|(xi, (m, v))| -(xi - a * m) / (a * a * v + s * s))
            .collect())
    }
}

impl NoisePredictor for GaussianOracle {
    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn predict_eps(&self, x: &[f64], t: f64, _cond: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(self.predict(x, t, None)?.eps)
    }

    fn predict(&self, x: &[f64], t: f64, _cond: Option<&[f64]>) -> Result<Prediction> {
        check_len("oracle input", self.mean.len(), x)?;
        let (a, s) = self.sched.alpha_sigma(t)?;
        let mut eps = Vec::with_capacity(x.len());
        let mut x0 = Vec::with_capacity(x.len());
        for ((xi, m), v) in x.iter().zip(&self.mean).zip(&self.cov_diag) {
            let r = (xi - a * m) / (a * a * v + s * s);
            eps.push(s * r);
            x0.push(m + a * v * r);
        }
        Ok(Prediction { eps, x0 })
    }
}

/// The `[teacher]` section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
    pub iterations: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub ema_rate: f64,
    pub solver: SolverKind,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            activation: Activation::Silu,
            time_embed_dim: 8,
            iterations: 2000,
            batch: 64,
            optimizer: OptimizerConfig::adam(1e-3),
            ema_rate: 0.95,
            solver: SolverKind::Ddim,
        }
    }
}

/// Epsilon-predicting network `eps_phi(x_t, t, cond)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    pub params: NetParams,
    pub sched: NoiseSchedule,
    pub solver: SolverKind,
    pub iteration: u64,
}

impl TeacherModel {
    pub fn new(params: NetParams, sched: NoiseSchedule, solver: SolverKind) -> Result<Self> {
        let spec = params.spec();
        if spec.output_dim() != spec.data_dim() {
            return Err(Error::Shape {
                context: "teacher output",
                expected: spec.data_dim(),
                got: spec.output_dim(),
            });
        }
        Ok(Self {
            params,
            sched,
            solver,
            iteration: 0,
        })
    }

    /// Freshly initialised teacher for latents of `latent_dim` with a
    /// conditioning latent of the same size.
    pub fn init(cfg: &TeacherConfig, sched: NoiseSchedule, latent_dim: usize, seed: u64) -> Result<Self> {
        let spec = NetSpec::mlp(
            latent_dim,
            &cfg.hidden,
            latent_dim,
            cfg.activation,
            cfg.time_embed_dim,
            latent_dim,
        )?;
        let params = NetParams::init(spec, cfg.ema_rate, 1.0, &mut rng::stream(seed, domain::NET_INIT, 0))?;
        Self::new(params, sched, cfg.solver)
    }

    pub fn latent_dim(&self) -> usize {
        self.params.spec().data_dim()
    }

    fn cond_for<'a>(&self, cond: &'a [f64]) -> Option<&'a [f64]> {
        (self.params.spec().cond_dim > 0).then_some(cond)
    }

    /// One denoising-score-matching step: `t ~ U[eps, T]`, `eps ~ N(0, I)`
    /// per sample, loss `mean_b |eps_hat - eps|^2`. Randomness for sample `b`
    /// comes from stream `(seed, iteration, b)`.
    pub fn train_step(&mut self, opt: &mut Optimizer, batch: &[&SceneSample], seed: u64) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(batch, seed)?;
        opt.step(&mut self.params, &grad)?;
        self.params.ema_update();
        self.iteration += 1;
        Ok(loss)
    }

    /// Loss and parameter gradient of [`TeacherModel::train_step`] without
    /// updating anything.
    pub fn loss_and_grad(&self, batch: &[&SceneSample], seed: u64) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Config("teacher batch is empty".into()));
        }
        let iter = self.iteration;
        let n = self.params.flat().len();
        let scale = 1.0 / batch.len() as f64;
        let (losses, grad) = par::try_map_accumulate(batch.len(), n, |b, acc| {
            let s = batch[b];
            let mut r = rng::stream2(seed, domain::TEACHER_TRAIN, iter, b as u64);
            let (lo, hi) = (self.sched.eps(), self.sched.t_max());
            let t = lo + (hi - lo) * rng::uniform(&mut r);
            let noise = rng::normal_vec(&mut r, s.x0.len());
            let xt = self.sched.forward_diffuse(&s.x0, &noise, t)?;
            let (pred, cache) = self
                .params
                .forward_cached(&xt, t / hi, self.cond_for(&s.cond))?;
            let diff: Vec<f64> = pred.iter().zip(&noise).map(|(p, e)| p - e).collect();
            let loss: f64 = diff.iter().map(|d| d * d).sum();
            let up: Vec<f64> = diff.iter().map(|d| 2.0 * d * scale).collect();
            self.params.backward_into(&cache, &up, acc)?;
            Ok(loss)
        })?;
        let loss = losses.iter().sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("teacher loss at iteration {iter}"),
                index: 0,
            });
        }
        check_finite(format!("teacher gradient at iteration {iter}"), &grad)?;
        Ok((loss, grad))
    }

    /// Runs `cfg.iterations` steps on minibatches drawn with replacement.
    /// `on_step(iteration, loss)` is called after each step.
    pub fn train(
        &mut self,
        cfg: &TeacherConfig,
        data: &[SceneSample],
        seed: u64,
        mut on_step: impl FnMut(u64, f64),
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("teacher training set is empty".into()));
        }
        let mut opt = Optimizer::new(cfg.optimizer.clone(), self.params.flat().len())?;
        let end = self.iteration + cfg.iterations as u64;
        while self.iteration < end {
            let mut r = rng::stream2(seed, domain::TEACHER_TRAIN, self.iteration, u64::MAX);
            let batch: Vec<&SceneSample> = (0..cfg.batch).map(|_| &data[rng::below(&mut r, data.len())]).collect();
            let loss = self.train_step(&mut opt, &batch, seed)?;
            on_step(self.iteration, loss);
        }
        Ok(())
    }
}

impl NoisePredictor for TeacherModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn predict_eps(&self, x: &[f64], t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        let cond = if self.params.spec().cond_dim > 0 { cond } else { None };
        self.params.forward(x, t / self.sched.t_max(), cond)
    }
}
