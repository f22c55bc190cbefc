//! DDPNet: a contextual bandit that picks the leap time from the coarse prior.
//!
//! The state is `x0_r`, the action one of `n_arms` leap times spread over
//! `[eps, T']`, and the reward the negative per-dimension error of the
//! student's data estimate at that time. The policy is trained with REINFORCE
//! against a running-mean baseline and never feeds gradients to the student.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::net::{Activation, NetParams, NetSpec, Optimizer, OptimizerConfig};
use crate::par;
use crate::prior::SceneSample;
use crate::rng::{self, domain, Rng};
use crate::schedule::NoiseSchedule;
use crate::teacher::NoisePredictor;

/// The `[ddp]` section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpConfig {
    pub n_arms: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub optimizer: OptimizerConfig,
    pub baseline_momentum: f64,
    /// Fraction of distillation iterations during which the policy trains.
    pub active_fraction: f64,
    /// Noise draws per arm in brute-force reward sweeps.
    pub oracle_draws: usize,
}

impl Default for DdpConfig {
    fn default() -> Self {
        Self {
            n_arms: 10,
            hidden: vec![64],
            activation: Activation::Tanh,
            optimizer: OptimizerConfig::adam(1e-2),
            baseline_momentum: 0.9,
            active_fraction: 0.2,
            oracle_draws: 8,
        }
    }
}

/// Arm `i` sits at the centre of the `i`-th of `n_arms` equal bins of `[eps, T']`.
pub fn arm_times(sched: &NoiseSchedule, n_arms: usize) -> Vec<f64> {
    let (lo, hi) = (sched.eps(), sched.t_prime());
    let w = (hi - lo) / n_arms as f64;
    (0..n_arms).map(|i| lo + (i as f64 + 0.5) * w).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub params: NetParams,
    pub arm_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditTransition {
    pub state: Vec<f64>,
    pub arm: usize,
    pub log_prob: f64,
    pub reward: f64,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl PolicyNet {
    pub fn new(params: NetParams, arm_times: Vec<f64>) -> Result<Self> {
        let spec = params.spec();
        if spec.output_dim() != arm_times.len() {
            return Err(Error::Shape {
                context: "policy arms",
                expected: spec.output_dim(),
                got: arm_times.len(),
            });
        }
        if spec.time_embed_dim != 0 || spec.cond_dim != 0 {
            return Err(Error::Config("policy input is the coarse prior alone".into()));
        }
        if arm_times.is_empty() {
            return Err(Error::Config("policy needs at least one arm".into()));
        }
        Ok(Self { params, arm_times })
    }

    pub fn init(cfg: &DdpConfig, sched: &NoiseSchedule, latent_dim: usize, seed: u64) -> Result<Self> {
        let spec = NetSpec::mlp(latent_dim, &cfg.hidden, cfg.n_arms, cfg.activation, 0, 0)?;
        let mut r = rng::stream(seed, domain::POLICY_INIT, 0);
        let params = NetParams::init(spec, 1.0, 0.0, &mut r)?;
        Self::new(params, arm_times(sched, cfg.n_arms))
    }

    pub fn n_arms(&self) -> usize {
        self.arm_times.len()
    }

    pub fn logits(&self, x0r: &[f64]) -> Result<Vec<f64>> {
        self.params.forward(x0r, 0.0, None)
    }

    /// Categorical distribution over arms.
    pub fn policy_forward(&self, x0r: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x0r)?))
    }

    pub fn sample_arm(&self, x0r: &[f64], rng: &mut Rng) -> Result<(usize, f64)> {
        let logits = self.logits(x0r)?;
        let logp = log_softmax(&logits);
        let u = rng::uniform(rng);
        let mut acc = 0.0;
        let mut arm = logp.len() - 1;
        for (i, lp) in logp.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                arm = i;
                break;
            }
        }
        Ok((arm, logp[arm]))
    }

    /// Index of the most probable arm; ties go to the smaller time.
    pub fn select_arm(&self, x0r: &[f64]) -> Result<usize> {
        let p = self.policy_forward(x0r)?;
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn select_leap_time(&self, x0r: &[f64]) -> Result<f64> {
        Ok(self.arm_times[self.select_arm(x0r)?])
    }

    /// `(L, dL/dpsi)` for `L = -mean((r - b) log pi(a | s))`.
    pub fn reinforce_loss_and_grad(&self, transitions: &[BanditTransition], baseline: f64) -> Result<(f64, Vec<f64>)> {
        if transitions.is_empty() {
            return Err(Error::Config("policy update needs at least one transition".into()));
        }
        let n = self.n_arms();
        let scale = 1.0 / transitions.len() as f64;
        let (losses, grad) = par::try_map_accumulate(transitions.len(), self.params.flat().len(), |i, acc| {
            let tr = &transitions[i];
            if tr.arm >= n {
                return Err(Error::Index {
                    index: tr.arm,
                    lo: 0,
                    hi: n - 1,
                });
            }
            let (logits, cache) = self.params.forward_cached(&tr.state, 0.0, None)?;
            let p = softmax(&logits);
            let adv = tr.reward - baseline;
            let logp = log_softmax(&logits)[tr.arm];
            let up: Vec<f64> = (0..n)
                .map(|k| {
                    let onehot = if k == tr.arm { 1.0 } else { 0.0 };
                    -adv * scale * (onehot - p[k])
                })
                .collect();
            self.params.backward_into(&cache, &up, acc)?;
            Ok(-adv * logp * scale)
        })?;
        let loss: f64 = losses.iter().sum();
        check_finite("policy gradient".to_string(), &grad)?;
        Ok((loss, grad))
    }
}

/// One REINFORCE step. Returns the surrogate loss.
pub fn ddp_update(policy: &mut PolicyNet, transitions: &[BanditTransition], opt: &mut Optimizer, baseline: f64) -> Result<f64> {
    let (loss, grad) = policy.reinforce_loss_and_grad(transitions, baseline)?;
    opt.step(&mut policy.params, &grad)?;
    Ok(loss)
}

/// `-|x0_pred - x0|^2 / D` where `x0_pred = (x_t - sigma_t eps_hat) / alpha_t`
/// and `x_t` corrupts the coarse prior with `noise` at time `t`.
pub fn compute_reward<P: NoisePredictor + ?Sized>(model: &P, sample: &SceneSample, t: f64, noise: &[f64]) -> Result<f64> {
    let sched = model.schedule();
    let (lo, hi) = (sched.eps(), sched.t_prime());
    if !(lo..=hi).contains(&t) {
        return Err(Error::Domain {
            what: "reward time",
            value: t,
            lo,
            hi,
        });
    }
    let dim = sample.x0.len();
    check_len("reward prior", dim, &sample.x0_r)?;
    let xt = sched.forward_diffuse(&sample.x0_r, noise, t)?;
    let eps = model.predict_eps(&xt, t, Some(&sample.cond))?;
    let (a, s) = sched.alpha_sigma(t)?;
    if a == 0.0 {
        return Err(Error::Singular(format!("alpha vanishes at t = {t}")));
    }
    let err: f64 = xt
        .iter()
        .zip(&eps)
        .zip(&sample.x0)
        .map(|((x, e), x0)| {
            let d = (x - s * e) / a - x0;
            d * d
        })
        .sum();
    Ok(-err / dim as f64)
}

/// Mean reward of every arm for one sample over `draws` shared noise vectors.
pub fn arm_rewards<P: NoisePredictor + ?Sized>(
    model: &P,
    arm_times: &[f64],
    sample: &SceneSample,
    draws: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let noises: Vec<Vec<f64>> = (0..draws.max(1)).map(|_| rng::normal_vec(rng, sample.x0.len())).collect();
    arm_times
        .iter()
        .map(|&t| {
            let mut acc = 0.0;
            for n in &noises {
                acc += compute_reward(model, sample, t, n)?;
            }
            Ok(acc / noises.len() as f64)
        })
        .collect()
}

/// Policy, its optimizer and the reward baseline.
#[derive(Debug, Clone)]
pub struct PolicyTrainer {
    pub policy: PolicyNet,
    pub opt: Optimizer,
    pub baseline: Option<f64>,
    pub momentum: f64,
    pub updates: u64,
}

/// Summary of one policy round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyStats {
    pub loss: f64,
    pub mean_reward: f64,
    pub baseline: f64,
}

impl PolicyTrainer {
    pub fn new(policy: PolicyNet, cfg: &DdpConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.baseline_momentum) {
            return Err(Error::Config(format!(
                "baseline momentum must lie in [0, 1), got {}",
                cfg.baseline_momentum
            )));
        }
        let opt = Optimizer::new(cfg.optimizer.clone(), policy.params.flat().len())?;
        Ok(Self {
            policy,
            opt,
            baseline: None,
            momentum: cfg.baseline_momentum,
            updates: 0,
        })
    }

    /// Updates the policy on `transitions` against the current baseline, then
    /// folds their mean reward into the baseline. The first batch seeds the
    /// baseline with its own mean.
    pub fn update(&mut self, transitions: &[BanditTransition]) -> Result<PolicyStats> {
        if transitions.is_empty() {
            return Err(Error::Config("policy update needs at least one transition".into()));
        }
        let mean_reward = transitions.iter().map(|t| t.reward).sum::<f64>() / transitions.len() as f64;
        let b = self.baseline.unwrap_or(mean_reward);
        let loss = ddp_update(&mut self.policy, transitions, &mut self.opt, b)?;
        self.baseline = Some(self.momentum * b + (1.0 - self.momentum) * mean_reward);
        self.updates += 1;
        Ok(PolicyStats {
            loss,
            mean_reward,
            baseline: b,
        })
    }

    /// Samples one arm per prior, scores it with `model` and updates.
    pub fn round<P: NoisePredictor + ?Sized>(
        &mut self,
        model: &P,
        samples: &[&SceneSample],
        seed: u64,
    ) -> Result<PolicyStats> {
        let round = self.updates;
        let policy = &self.policy;
        let transitions = par::try_map_range(samples.len(), |b| {
            let s = samples[b];
            let mut r = rng::stream2(seed, domain::POLICY, round, b as u64);
            let (arm, log_prob) = policy.sample_arm(&s.x0_r, &mut r)?;
            let noise = rng::normal_vec(&mut r, s.x0.len());
            let reward = compute_reward(model, s, policy.arm_times[arm], &noise)?;
            Ok(BanditTransition {
                state: s.x0_r.clone(),
                arm,
                log_prob,
                reward,
            })
        })?;
        self.update(&transitions)
    }
}
