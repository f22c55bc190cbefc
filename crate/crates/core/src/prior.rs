//! Synthetic scene-trajectory data and coarse-prior generation.
//!
//! A latent is `frames x frame_dim` values, flattened frame-major. The
//! TRAJECTORY family draws smooth curves from a low-order cosine series over
//! the frame axis; the GAUSSIAN family draws independent coordinates with a
//! closed-form density. Every sample carries an endpoint conditioning latent
//! (the first frame repeated over the first half of the frames, the last frame
//! over the second half) and a coarse prior `x0_r` produced by [`degrade`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, domain, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Trajectory,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Trajectory => "trajectory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeSpec {
    /// Fraction of per-frame cosine components kept at `q = 0`.
    pub lowpass_frac: f64,
    pub artifact_scale: f64,
    pub noise_scale: f64,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        Self {
            lowpass_frac: 0.5,
            artifact_scale: 0.6,
            noise_scale: 0.3,
        }
    }
}

/// Number of smooth temporal modes in the structured artifact.
pub const ARTIFACT_MODES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub latent_dim: usize,
    pub frames: usize,
    pub family: Family,
    pub n_train: usize,
    pub n_eval: usize,
    /// Filled from the run's global seed.
    #[serde(skip)]
    pub seed: u64,
    pub q_min: f64,
    pub q_max: f64,
    /// Highest cosine order of TRAJECTORY samples.
    pub fourier_order: usize,
    /// Scale of the order-`k` coefficient is `fourier_amp / k`.
    pub fourier_amp: f64,
    /// GAUSSIAN means alternate in sign: `(-1)^j * gaussian_mean`.
    pub gaussian_mean: f64,
    /// GAUSSIAN standard deviations are spaced linearly over dimensions.
    pub gaussian_std_min: f64,
    pub gaussian_std_max: f64,
    pub degradation: DegradeSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            frames: 8,
            family: Family::Trajectory,
            n_train: 4096,
            n_eval: 500,
            seed: 0,
            q_min: 0.3,
            q_max: 0.9,
            fourier_order: 3,
            fourier_amp: 0.6,
            gaussian_mean: 0.5,
            gaussian_std_min: 0.2,
            gaussian_std_max: 0.6,
            degradation: DegradeSpec::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::Config(format!("latent_dim must be >= 2, got {}", self.latent_dim)));
        }
        if self.frames < 2 || self.frames % 2 != 0 {
            return Err(Error::Config(format!("frames must be even and >= 2, got {}", self.frames)));
        }
        if self.latent_dim % self.frames != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} is not divisible by frames {}",
                self.latent_dim, self.frames
            )));
        }
        if !(0.0 <= self.q_min && self.q_min <= self.q_max && self.q_max <= 1.0) {
            return Err(Error::Config(format!(
                "quality range must satisfy 0 <= q_min <= q_max <= 1, got [{}, {}]",
                self.q_min, self.q_max
            )));
        }
        let d = &self.degradation;
        if !(d.lowpass_frac > 0.0 && d.lowpass_frac <= 1.0) {
            return Err(Error::Config(format!("lowpass_frac must be in (0, 1], got {}", d.lowpass_frac)));
        }
        if d.artifact_scale < 0.0 || d.noise_scale < 0.0 {
            return Err(Error::Config("artifact_scale and noise_scale must be >= 0".into()));
        }
        if self.gaussian_std_min <= 0.0 || self.gaussian_std_max < self.gaussian_std_min {
            return Err(Error::Config("gaussian std range must be positive and ordered".into()));
        }
        Ok(())
    }

    pub fn frame_dim(&self) -> usize {
        self.latent_dim / self.frames
    }

    /// Per-dimension mean and variance of the GAUSSIAN family.
    pub fn gaussian_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.latent_dim;
        let mean = (0..n)
            .map(|j| if j % 2 == 0 { self.gaussian_mean } else { -self.gaussian_mean })
            .collect();
        let var = (0..n)
            .map(|j| {
                let s = if n == 1 {
                    self.gaussian_std_min
                } else {
                    self.gaussian_std_min
                        + (self.gaussian_std_max - self.gaussian_std_min) * j as f64 / (n - 1) as f64
                };
                s * s
            })
            .collect();
        (mean, var)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub x0: Vec<f64>,
    pub x0_r: Vec<f64>,
    pub cond: Vec<f64>,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    fn domain(self) -> u64 {
        match self {
            Split::Train => domain::DATASET_TRAIN,
            Split::Eval => domain::DATASET_EVAL,
        }
    }
}

/// Builds a trajectory from cosine coefficients laid out `[order][frame_dim]`.
pub fn trajectory_from_coefficients(coeffs: &[Vec<f64>], frames: usize) -> Vec<f64> {
    let d = coeffs.first().map_or(0, Vec::len);
    let mut x = vec![0.0; frames * d];
    for f in 0..frames {
        let tau = f as f64 / (frames - 1) as f64;
        for (k, c) in coeffs.iter().enumerate() {
            let basis = (k as f64 * std::f64::consts::PI * tau).cos();
            for j in 0..d {
                x[f * d + j] += c[j] * basis;
            }
        }
    }
    x
}

/// First frame over the first half of the frames, last frame over the second.
pub fn endpoint_cond(x0: &[f64], frames: usize) -> Vec<f64> {
    let d = x0.len() / frames;
    let first = &x0[..d];
    let last = &x0[(frames - 1) * d..];
    let mut cond = Vec::with_capacity(x0.len());
    for f in 0..frames {
        cond.extend_from_slice(if f < frames / 2 { first } else { last });
    }
    cond
}

/// Draws a ground-truth latent and its endpoint conditioning.
pub fn gen_scene(spec: &DatasetSpec, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    let x0 = match spec.family {
        Family::Trajectory => {
            let d = spec.frame_dim();
            let coeffs: Vec<Vec<f64>> = (0..=spec.fourier_order)
                .map(|k| {
                    let scale = if k == 0 { 1.0 } else { spec.fourier_amp / k as f64 };
                    (0..d).map(|_| scale * rng::normal(rng)).collect()
                })
                .collect();
            trajectory_from_coefficients(&coeffs, spec.frames)
        }
        Family::Gaussian => {
            let (mean, var) = spec.gaussian_moments();
            mean.iter()
                .zip(&var)
                .map(|(m, v)| m + v.sqrt() * rng::normal(rng))
                .collect()
        }
    };
    let cond = endpoint_cond(&x0, spec.frames);
    Ok((x0, cond))
}

fn dct_basis(n: usize, k: usize, i: usize) -> f64 {
    let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    s * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos()
}

/// Orthonormal DCT-II of each frame, zeroing components `>= keep`.
pub fn lowpass(x: &[f64], frames: usize, keep: usize) -> Vec<f64> {
    let d = x.len() / frames;
    if keep >= d {
        return x.to_vec();
    }
    let mut out = vec![0.0; x.len()];
    for f in 0..frames {
        let frame = &x[f * d..(f + 1) * d];
        for k in 0..keep {
            let c: f64 = frame.iter().enumerate().map(|(i, v)| v * dct_basis(d, k, i)).sum();
            for i in 0..d {
                out[f * d + i] += c * dct_basis(d, k, i);
            }
        }
    }
    out
}

/// Components kept per frame at quality `q`.
pub fn kept_components(frame_dim: usize, lowpass_frac: f64, q: f64) -> usize {
    let d = frame_dim as f64;
    let keep = (lowpass_frac * d + q * (1.0 - lowpass_frac) * d).ceil() as usize;
    keep.clamp(1, frame_dim)
}

/// Coarse prior of `x0` at quality `q`: per-frame low-pass, plus a smooth
/// artifact of RMS `artifact_scale * (1 - q)`, plus white noise of standard
/// deviation `noise_scale * (1 - q)`. The artifact is normalised so that
/// `E|artifact|^2 = latent_dim * (artifact_scale * (1 - q))^2`.
///
/// The same number of draws is taken from `rng` for every `q`.
pub fn degrade(x0: &[f64], frames: usize, spec: &DegradeSpec, q: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain {
            what: "q",
            value: q,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if frames == 0 || x0.len() % frames != 0 {
        return Err(Error::Config(format!(
            "latent of length {} cannot be split into {frames} frames",
            x0.len()
        )));
    }
    let d = x0.len() / frames;
    let gains: Vec<f64> = rng::normal_vec(rng, ARTIFACT_MODES * d);
    let white: Vec<f64> = rng::normal_vec(rng, x0.len());

    let keep = kept_components(d, spec.lowpass_frac, q);
    let mut out = lowpass(x0, frames, keep);

    let art = spec.artifact_scale * (1.0 - q);
    if art > 0.0 {
        let norm = (frames as f64 / ARTIFACT_MODES as f64).sqrt();
        for f in 0..frames {
            for m in 0..ARTIFACT_MODES {
                let phi = norm * dct_basis(frames, m, f);
                for j in 0..d {
                    out[f * d + j] += art * gains[m * d + j] * phi;
                }
            }
        }
    }
    let sd = spec.noise_scale * (1.0 - q);
    if sd > 0.0 {
        for (o, w) in out.iter_mut().zip(&white) {
            *o += sd * w;
        }
    }
    Ok(out)
}

/// Generates one split of the dataset. Sample `i` depends only on
/// `(seed, split, i)`.
pub fn make_dataset(spec: &DatasetSpec, split: Split) -> Result<Vec<SceneSample>> {
    spec.validate()?;
    let n = match split {
        Split::Train => spec.n_train,
        Split::Eval => spec.n_eval,
    };
    par::try_map_range(n, |i| {
        let mut rng = rng::stream(spec.seed, split.domain(), i as u64);
        let (x0, cond) = gen_scene(spec, &mut rng)?;
        let q = spec.q_min + (spec.q_max - spec.q_min) * rng::uniform(&mut rng);
        let mut drng = rng::stream2(spec.seed, domain::DEGRADE, split.domain(), i as u64);
        let x0_r = degrade(&x0, spec.frames, &spec.degradation, q, &mut drng)?;
        Ok(SceneSample { x0, x0_r, cond, q })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_coefficients_give_constant_trajectory() {
        let zero = vec![vec![0.0; 4]; 4];
        let x = trajectory_from_coefficients(&zero, 8);
        assert!(x.iter().all(|&v| v == 0.0));
        let mut c = zero.clone();
        c[0] = vec![1.0, -2.0, 0.5, 3.0];
        let x = trajectory_from_coefficients(&c, 8);
        for f in 0..8 {
            assert_eq!(&x[f * 4..f * 4 + 4], &[1.0, -2.0, 0.5, 3.0]);
        }
    }

    #[test]
    fn cond_halves_equal_endpoint_frames() {
        let spec = DatasetSpec::default();
        let (x0, cond) = gen_scene(&spec, &mut stream(3, 0, 0)).unwrap();
        let d = spec.frame_dim();
        let half = cond.len() / 2;
        for f in 0..spec.frames / 2 {
            assert_eq!(&cond[f * d..(f + 1) * d], &x0[..d]);
            assert_eq!(&cond[half + f * d..half + (f + 1) * d], &x0[(spec.frames - 1) * d..]);
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        let spec = DatasetSpec {
            latent_dim: 30,
            ..Default::default()
        };
        assert!(matches!(gen_scene(&spec, &mut stream(0, 0, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn degrade_identity_cases() {
        let spec = DatasetSpec::default();
        let (x0, _) = gen_scene(&spec, &mut stream(1, 0, 0)).unwrap();
        let out = degrade(&x0, 8, &spec.degradation, 1.0, &mut stream(2, 0, 0)).unwrap();
        assert_eq!(out, x0);

        let noop = DegradeSpec {
            lowpass_frac: 1.0,
            artifact_scale: 0.0,
            noise_scale: 0.0,
        };
        for q in [0.0, 0.3, 0.7] {
            assert_eq!(degrade(&x0, 8, &noop, q, &mut stream(2, 0, 1)).unwrap(), x0);
        }
        assert!(degrade(&x0, 8, &noop, 1.5, &mut stream(2, 0, 1)).is_err());
    }

    #[test]
    fn degrade_is_deterministic_and_preserves_dimension() {
        let spec = DatasetSpec::default();
        let (x0, _) = gen_scene(&spec, &mut stream(1, 0, 0)).unwrap();
        let a = degrade(&x0, 8, &spec.degradation, 0.4, &mut stream(9, 0, 0)).unwrap();
        let b = degrade(&x0, 8, &spec.degradation, 0.4, &mut stream(9, 0, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), x0.len());
    }

    #[test]
    fn lowpass_keeps_requested_components() {
        // A frame equal to a single DCT basis vector survives only if kept.
        let d = 4;
        let basis2: Vec<f64> = (0..d).map(|i| dct_basis(d, 2, i)).collect();
        let x: Vec<f64> = basis2.iter().chain(basis2.iter()).copied().collect();
        let kept = lowpass(&x, 2, 3);
        assert!(kept.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
        let cut = lowpass(&x, 2, 2);
        assert!(cut.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(kept_components(4, 0.5, 0.0), 2);
        assert_eq!(kept_components(4, 0.5, 1.0), 4);
        assert_eq!(kept_components(4, 0.3, 1.0), 4);
    }

    #[test]
    fn empty_and_repeatable_datasets() {
        let spec = DatasetSpec {
            n_train: 0,
            ..Default::default()
        };
        assert!(make_dataset(&spec, Split::Train).unwrap().is_empty());
        let spec = DatasetSpec {
            n_train: 16,
            seed: 5,
            ..Default::default()
        };
        let a = make_dataset(&spec, Split::Train).unwrap();
        let b = make_dataset(&spec, Split::Train).unwrap();
        assert_eq!(a, b);
        let e = make_dataset(&spec, Split::Eval).unwrap();
        assert_ne!(a[0].x0, e[0].x0);
        assert!(a.iter().all(|s| (0.3..=0.9).contains(&s.q)));
    }
}
