//! Noise schedules and the discrete time grid.
//!
//! Time is continuous on `[0, T]`; training and sampling use a uniform grid of
//! `n_grid` points spanning `[eps, T]`. Variance-preserving schedules satisfy
//! `alpha(t)^2 + sigma(t)^2 = 1`; the identity schedule keeps the signal and
//! grows the noise linearly (`alpha = 1`, `sigma = t`).

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Terminal value of `alpha^2` for [`ScheduleKind::VpLinear`].
pub const VP_LINEAR_ALPHA2_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    VpCosine,
    VpLinear,
    EdmIdentity,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::VpCosine => "vp_cosine",
            ScheduleKind::VpLinear => "vp_linear",
            ScheduleKind::EdmIdentity => "edm_identity",
        }
    }

    pub fn is_variance_preserving(self) -> bool {
        !matches!(self, ScheduleKind::EdmIdentity)
    }
}

/// The `[schedule]` section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// Total horizon `T`.
    pub t_max: f64,
    /// Leap cap `T'`.
    pub t_prime: f64,
    /// Boundary time `eps`.
    pub eps: f64,
    pub n_grid: usize,
    /// Grid skip interval `k` between a training pair.
    pub k: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::VpCosine,
            t_max: 1.0,
            t_prime: 0.6,
            eps: 0.001,
            n_grid: 50,
            k: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    cfg: ScheduleConfig,
    grid: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            t_max,
            t_prime,
            eps,
            n_grid,
            k,
            ..
        } = cfg;
        if !(eps > 0.0 && eps < t_prime && t_prime < t_max && t_max.is_finite()) {
            return Err(Error::Config(format!(
                "schedule requires 0 < eps < t_prime < t_max, got eps={eps}, t_prime={t_prime}, t_max={t_max}"
            )));
        }
        if n_grid < 2 {
            return Err(Error::Config(format!("n_grid must be >= 2, got {n_grid}")));
        }
        if k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        let h = (t_max - eps) / (n_grid - 1) as f64;
        let mut grid: Vec<f64> = (0..n_grid).map(|i| eps + i as f64 * h).collect();
        grid[n_grid - 1] = t_max;
        Ok(Self { cfg, grid })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.cfg
    }

    pub fn kind(&self) -> ScheduleKind {
        self.cfg.kind
    }

    pub fn t_max(&self) -> f64 {
        self.cfg.t_max
    }

    pub fn t_prime(&self) -> f64 {
        self.cfg.t_prime
    }

    pub fn eps(&self) -> f64 {
        self.cfg.eps
    }

    pub fn k(&self) -> usize {
        self.cfg.k
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// `(alpha_t, sigma_t)` for `t` in `[0, T]`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        let t_max = self.cfg.t_max;
        if !(0.0..=t_max).contains(&t) {
            return Err(Error::Domain {
                what: "t",
                value: t,
                lo: 0.0,
                hi: t_max,
            });
        }
        Ok(match self.cfg.kind {
            ScheduleKind::VpCosine => {
                let phase = std::f64::consts::FRAC_PI_2 * t / t_max;
                (phase.cos(), phase.sin())
            }
            ScheduleKind::VpLinear => {
                let a2 = 1.0 - (1.0 - VP_LINEAR_ALPHA2_FLOOR) * t / t_max;
                (a2.sqrt(), (1.0 - a2).sqrt())
            }
            ScheduleKind::EdmIdentity => (1.0, t),
        })
    }

    /// Signal-to-noise ratio `alpha^2 / sigma^2`.
    pub fn snr(&self, t: f64) -> Result<f64> {
        let (a, s) = self.alpha_sigma(t)?;
        Ok(a * a / (s * s))
    }

    /// `alpha_t * x0 + sigma_t * noise`.
    pub fn forward_diffuse(&self, x0: &[f64], noise: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len("forward_diffuse noise", x0.len(), noise)?;
        let (a, s) = self.alpha_sigma(t)?;
        Ok(x0.iter().zip(noise).map(|(x, n)| a * x + s * n).collect())
    }

    /// Training pair `(grid[max(n+1-k, 0)], grid[n+1])`.
    pub fn grid_index_pair(&self, n_plus_1: usize) -> Result<(f64, f64)> {
        let last = self.grid.len() - 1;
        if n_plus_1 < 1 || n_plus_1 > last {
            return Err(Error::Index {
                index: n_plus_1,
                lo: 1,
                hi: last,
            });
        }
        let n = n_plus_1.saturating_sub(self.cfg.k);
        Ok((self.grid[n], self.grid[n_plus_1]))
    }

    /// Grid indices `>= 1` whose time does not exceed the leap cap.
    pub fn leap_indices(&self) -> Vec<usize> {
        (1..self.grid.len())
            .filter(|&i| self.grid[i] <= self.cfg.t_prime)
            .collect()
    }

    /// Largest grid index whose time is `<= t` (0 if `t` is below the grid).
    pub fn index_at_or_below(&self, t: f64) -> usize {
        self.grid.iter().rposition(|&g| g <= t).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(kind: ScheduleKind) -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig {
            kind,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = sched(ScheduleKind::VpCosine);
        assert_eq!(s.alpha_sigma(0.0).unwrap(), (1.0, 0.0));
        let (a, b) = s.alpha_sigma(0.5).unwrap();
        assert!((a - 0.707_106_78).abs() < 1e-8);
        assert!((b - 0.707_106_78).abs() < 1e-8);
    }

    #[test]
    fn identity_schedule_is_alpha_one_sigma_t() {
        let s = NoiseSchedule::new(ScheduleConfig {
            kind: ScheduleKind::EdmIdentity,
            t_max: 5.0,
            t_prime: 3.0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.alpha_sigma(2.5).unwrap(), (1.0, 2.5));
    }

    #[test]
    fn out_of_range_time_names_value() {
        let s = sched(ScheduleKind::VpCosine);
        let err = s.alpha_sigma(1.5).unwrap_err();
        assert!(err.to_string().contains("1.5"), "{err}");
        assert!(s.alpha_sigma(-0.1).is_err());
    }

    #[test]
    fn variance_preserving_identity() {
        for kind in [ScheduleKind::VpCosine, ScheduleKind::VpLinear] {
            let s = sched(kind);
            for &t in s.grid() {
                let (a, b) = s.alpha_sigma(t).unwrap();
                assert!((a * a + b * b - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = sched(ScheduleKind::VpCosine);
        let x0 = [0.3, -1.2];
        assert_eq!(s.forward_diffuse(&x0, &[5.0, 7.0], 0.0).unwrap(), x0.to_vec());
        let out = s.forward_diffuse(&[0.0, 0.0], &[2.0, -1.0], 0.3).unwrap();
        let (_, sig) = s.alpha_sigma(0.3).unwrap();
        assert_eq!(out, vec![sig * 2.0, -sig]);
        let out = s.forward_diffuse(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
        assert!((out[0] - 0.707_106_78).abs() < 1e-8 && (out[1] - 0.707_106_78).abs() < 1e-8);
        assert!(matches!(
            s.forward_diffuse(&[1.0], &[1.0, 2.0], 0.5),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn grid_pairs() {
        let s = sched(ScheduleKind::VpCosine);
        let g = s.grid().to_vec();
        assert_eq!(g[0], 0.001);
        assert_eq!(g[49], 1.0);
        assert_eq!(s.grid_index_pair(1).unwrap(), (g[0], g[1]));

        let k3 = NoiseSchedule::new(ScheduleConfig {
            k: 3,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(k3.grid_index_pair(2).unwrap(), (g[0], g[2]));

        let k5 = NoiseSchedule::new(ScheduleConfig {
            k: 5,
            ..Default::default()
        })
        .unwrap();
        let (tn, tn1) = k5.grid_index_pair(20).unwrap();
        let uniform = |i: f64| 0.001 + i * (1.0 - 0.001) / 49.0;
        assert!((tn - uniform(15.0)).abs() < 1e-15);
        assert!((tn1 - uniform(20.0)).abs() < 1e-15);

        assert!(matches!(s.grid_index_pair(0), Err(Error::Index { .. })));
        assert!(matches!(s.grid_index_pair(50), Err(Error::Index { .. })));
    }

    #[test]
    fn grid_is_strictly_increasing_and_leap_cap_respected() {
        let s = sched(ScheduleKind::VpCosine);
        assert!(s.grid().windows(2).all(|w| w[0] < w[1]));
        let leap = s.leap_indices();
        assert_eq!(leap[0], 1);
        assert!(leap.iter().all(|&i| s.grid()[i] <= 0.6));
        assert!(s.grid()[leap.last().unwrap() + 1] > 0.6);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            ScheduleConfig {
                t_prime: 1.0,
                ..Default::default()
            },
            ScheduleConfig {
                eps: 0.0,
                ..Default::default()
            },
            ScheduleConfig {
                n_grid: 1,
                ..Default::default()
            },
            ScheduleConfig {
                k: 0,
                ..Default::default()
            },
        ] {
            assert!(NoiseSchedule::new(cfg).is_err());
        }
    }
}
