//! Distributional metrics, step sweeps and the ablation table.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyModel;
use crate::ddpnet::PolicyNet;
use crate::error::{Error, Result};
use crate::par;
use crate::prior::SceneSample;
use crate::rng::{self, domain, Rng};
use crate::teacher::{self, TeacherModel};

pub const CSV_HEADER: &str = "method,n_steps,mse_to_gt,mmd,swd,self_consistency_gap,wall_ms_per_sample";

/// The `[eval]` section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub steps: Vec<usize>,
    pub n_projections: usize,
    /// Kernel bandwidth; the median pairwise distance of the reference set
    /// when absent.
    pub bandwidth: Option<f64>,
    /// Eval samples used for the self-consistency gap.
    pub gap_samples: usize,
    /// Fill `wall_ms_per_sample`. Off by default so reports are reproducible.
    pub timing: bool,
    /// Seeds in the ablation median, starting at the run seed.
    pub ablation_seeds: usize,
    /// Leap time without the policy; the middle leap-grid time when absent.
    pub fixed_leap: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: vec![1, 4, 50],
            n_projections: 64,
            bandwidth: None,
            gap_samples: 32,
            timing: false,
            ablation_seeds: 3,
            fixed_leap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub n_steps: usize,
    pub mse_to_gt: f64,
    pub mmd: f64,
    pub swd: f64,
    pub self_consistency_gap: f64,
    pub wall_ms_per_sample: f64,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.method,
            self.n_steps,
            self.mse_to_gt,
            self.mmd,
            self.swd,
            self.self_consistency_gap,
            self.wall_ms_per_sample
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Config(format!("report row needs 7 fields, got {}: {line}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Config(format!("bad number {:?} in report row", f[i])))
        };
        Ok(Self {
            method: f[0].to_string(),
            n_steps: f[1]
                .parse()
                .map_err(|_| Error::Config(format!("bad step count {:?}", f[1])))?,
            mse_to_gt: num(2)?,
            mmd: num(3)?,
            swd: num(4)?,
            self_consistency_gap: num(5)?,
            wall_ms_per_sample: num(6)?,
        })
    }
}

pub fn reports_to_csv(rows: &[EvalReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

pub fn reports_from_csv(text: &str) -> Result<Vec<EvalReport>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        other => return Err(Error::Config(format!("unexpected report header {other:?}"))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(EvalReport::parse_row).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased Gaussian-kernel MMD^2, clamped at 0. A set with a single member
/// contributes its (biased) self-similarity term.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("mmd needs two non-empty sets".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::Domain {
            what: "bandwidth",
            value: bandwidth,
            lo: f64::MIN_POSITIVE,
            hi: f64::INFINITY,
        });
    }
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |x: &[f64], y: &[f64]| (-g * sq_dist(x, y)).exp();
    let within = |s: &[Vec<f64>]| -> f64 {
        let n = s.len();
        if n == 1 {
            return 1.0;
        }
        let rows = par::map_range(n, |i| (0..n).filter(|&j| j != i).map(|j| k(&s[i], &s[j])).sum::<f64>());
        rows.iter().sum::<f64>() / (n * (n - 1)) as f64
    };
    let cross_rows = par::map_range(a.len(), |i| b.iter().map(|y| k(&a[i], y)).sum::<f64>());
    let cross = cross_rows.iter().sum::<f64>() / (a.len() * b.len()) as f64;
    Ok((within(a) + within(b) - 2.0 * cross).max(0.0))
}

/// Median pairwise Euclidean distance (over at most 500 members).
pub fn median_bandwidth(set: &[Vec<f64>]) -> f64 {
    let s = &set[..set.len().min(500)];
    let mut d = Vec::new();
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            d.push(sq_dist(&s[i], &s[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Squared 1-D Wasserstein-2 distance between two empirical distributions,
/// integrating the quantile functions exactly.
pub fn w2_sq_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (m, n) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < m && j < n {
        let next_a = (i + 1) as f64 / m as f64;
        let next_b = (j + 1) as f64 / n as f64;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        acc += (next - u) * d * d;
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc
}

/// Sliced W2^2: mean over random unit directions of the 1-D W2^2 between
/// the projected sets.
pub fn sliced_w2(a: &[Vec<f64>], b: &[Vec<f64>], n_projections: usize, rng: &mut Rng) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("sliced_w2 needs two non-empty sets".into()));
    }
    let dim = a[0].len();
    if dim == 0 || a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::Shape {
            context: "sliced_w2 member",
            expected: dim,
            got: a.iter().chain(b).map(Vec::len).find(|&l| l != dim).unwrap_or(0),
        });
    }
    let dirs: Vec<Vec<f64>> = (0..n_projections.max(1))
        .map(|_| loop {
            let v = rng::normal_vec(rng, dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    let proj = |s: &[Vec<f64>], u: &[f64]| -> Vec<f64> {
        s.iter().map(|x| x.iter().zip(u).map(|(p, q)| p * q).sum()).collect()
    };
    let per = par::map_range(dirs.len(), |k| {
        let mut pa = proj(a, &dirs[k]);
        let mut pb = proj(b, &dirs[k]);
        w2_sq_1d(&mut pa, &mut pb)
    });
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Middle time among the leap-grid points.
pub fn mid_leap_time(student: &ConsistencyModel) -> f64 {
    let idx = student.sched.leap_indices();
    student.sched.grid()[idx[idx.len() / 2]]
}

/// Generates one output per eval sample and scores it against ground truth.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    pub data: &'a [SceneSample],
    pub cfg: &'a EvalConfig,
    pub seed: u64,
    reference: Vec<Vec<f64>>,
    bandwidth: f64,
}

impl<'a> Scorer<'a> {
    pub fn new(data: &'a [SceneSample], cfg: &'a EvalConfig, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("eval set is empty".into()));
        }
        let reference: Vec<Vec<f64>> = data.iter().map(|s| s.x0.clone()).collect();
        let bandwidth = cfg.bandwidth.unwrap_or_else(|| median_bandwidth(&reference));
        Ok(Self {
            data,
            cfg,
            seed,
            reference,
            bandwidth,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Runs `gen` over every sample (index, sample) and builds a report row.
    pub fn score<F>(&self, method: &str, n_steps: usize, gap: f64, gen: F) -> Result<EvalReport>
    where
        F: Fn(usize, &SceneSample) -> Result<Vec<f64>> + Sync,
    {
        let start = Instant::now();
        let out = par::try_map_range(self.data.len(), |i| gen(i, &self.data[i]))?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        let mse = out
            .iter()
            .zip(self.data)
            .map(|(o, s)| sq_dist(o, &s.x0))
            .sum::<f64>()
            / out.len() as f64;
        let mmd_v = mmd(&out, &self.reference, self.bandwidth)?;
        let mut r = rng::stream(self.seed, domain::SWD, 0);
        let swd = sliced_w2(&out, &self.reference, self.cfg.n_projections, &mut r)?;
        let row = EvalReport {
            method: method.to_string(),
            n_steps,
            mse_to_gt: mse,
            mmd: mmd_v,
            swd,
            self_consistency_gap: gap,
            wall_ms_per_sample: if self.cfg.timing {
                elapsed / self.data.len() as f64
            } else {
                0.0
            },
        };
        for v in [row.mse_to_gt, row.mmd, row.swd, row.self_consistency_gap] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("{method} report"),
                    index: 0,
                });
            }
        }
        Ok(row)
    }
}

const STREAM_TEACHER: u64 = 0;
const STREAM_STUDENT: u64 = 1;
const STREAM_GAP: u64 = 2;
const STREAM_NO_LEAP: u64 = 3;

/// Mean self-consistency gap of `student` over the first `cfg.gap_samples`
/// eval samples, along all grid times up to `T'`.
pub fn mean_gap(student: &ConsistencyModel, teacher: &TeacherModel, data: &[SceneSample], cfg: &EvalConfig, seed: u64) -> Result<f64> {
    let n = cfg.gap_samples.min(data.len());
    if n == 0 {
        return Ok(0.0);
    }
    let sched = &student.sched;
    let mut t_list = vec![sched.grid()[0]];
    t_list.extend(sched.leap_indices().iter().map(|&i| sched.grid()[i]));
    let gaps = par::try_map_range(n, |i| {
        let s = &data[i];
        let mut r = rng::stream2(seed, domain::EVAL, STREAM_GAP, i as u64);
        let noise = rng::normal_vec(&mut r, s.x0.len());
        student.self_consistency_gap(teacher, &s.x0_r, Some(&s.cond), &t_list, &noise)
    })?;
    Ok(gaps.iter().sum::<f64>() / n as f64)
}

/// Leap time used for sample `s`: the policy's choice, or the fixed time.
pub fn leap_time(policy: Option<&PolicyNet>, fixed: f64, s: &SceneSample) -> Result<f64> {
    match policy {
        Some(p) => p.select_leap_time(&s.x0_r),
        None => Ok(fixed),
    }
}

/// Teacher sampling from pure noise at `T` and student leap generation from
/// the coarse prior, at every step count in `steps`.
pub fn step_sweep(
    teacher: &TeacherModel,
    student: &ConsistencyModel,
    policy: Option<&PolicyNet>,
    data: &[SceneSample],
    steps: &[usize],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    if steps.is_empty() {
        return Err(Error::Config("steps list is empty".into()));
    }
    let scorer = Scorer::new(data, cfg, seed)?;
    let fixed = cfg.fixed_leap.unwrap_or_else(|| mid_leap_time(student));
    let gap = mean_gap(student, teacher, data, cfg, seed)?;
    let t_max = teacher.sched.t_max();
    let mut rows = Vec::new();
    for &n in steps {
        rows.push(scorer.score("teacher", n, 0.0, |i, s| {
            let mut r = rng::stream2(seed, domain::EVAL, STREAM_TEACHER, i as u64);
            let noise = rng::normal_vec(&mut r, s.x0.len());
            teacher::sample(teacher, teacher.solver, n, &noise, t_max, Some(&s.cond))
        })?);
    }
    for &n in steps {
        rows.push(scorer.score("student", n, gap, |i, s| {
            let mut r = rng::stream2(seed, domain::EVAL, STREAM_STUDENT, i as u64);
            let t = leap_time(policy, fixed, s)?;
            student.multistep_generate(s, t, n, &mut r)
        })?);
    }
    Ok(rows)
}

/// One-step rows of the ablation table for a single seed.
pub fn ablation_suite<'a>(
    teacher: &TeacherModel,
    leap_student: &ConsistencyModel,
    no_leap_student: &ConsistencyModel,
    policy: &'a PolicyNet,
    data: &[SceneSample],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let scorer = Scorer::new(data, cfg, seed)?;
    let fixed = cfg.fixed_leap.unwrap_or_else(|| mid_leap_time(leap_student));
    let gap = mean_gap(leap_student, teacher, data, cfg, seed)?;
    let gap_no_leap = mean_gap(no_leap_student, teacher, data, cfg, seed)?;
    let leap_gen = |p: Option<&'a PolicyNet>| {
        move |i: usize, s: &SceneSample| {
            let mut r = rng::stream2(seed, domain::EVAL, STREAM_STUDENT, i as u64);
            let t = leap_time(p, fixed, s)?;
            leap_student.multistep_generate(s, t, 1, &mut r)
        }
    };
    Ok(vec![
        scorer.score("BASE_PRIOR", 1, 0.0, |_, s| Ok(s.x0_r.clone()))?,
        scorer.score("NO_LEAP", 1, gap_no_leap, |i, s| {
            let mut r = rng::stream2(seed, domain::EVAL, STREAM_NO_LEAP, i as u64);
            let noise = rng::normal_vec(&mut r, s.x0.len());
            no_leap_student.generate_from_noise(&noise, Some(&s.cond))
        })?,
        scorer.score("NO_DDP", 1, gap, leap_gen(None))?,
        scorer.score("FULL", 1, gap, leap_gen(Some(policy)))?,
    ])
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Column-wise median of row-aligned report tables.
pub fn median_reports(tables: &[Vec<EvalReport>]) -> Result<Vec<EvalReport>> {
    let Some(first) = tables.first() else {
        return Err(Error::Config("no report tables to combine".into()));
    };
    for t in tables {
        if t.len() != first.len() || t.iter().zip(first).any(|(a, b)| a.method != b.method || a.n_steps != b.n_steps) {
            return Err(Error::Config("report tables are not row-aligned".into()));
        }
    }
    Ok((0..first.len())
        .map(|i| {
            let col = |f: fn(&EvalReport) -> f64| median(tables.iter().map(|t| f(&t[i])).collect());
            EvalReport {
                method: first[i].method.clone(),
                n_steps: first[i].n_steps,
                mse_to_gt: col(|r| r.mse_to_gt),
                mmd: col(|r| r.mmd),
                swd: col(|r| r.swd),
                self_consistency_gap: col(|r| r.self_consistency_gap),
                wall_ms_per_sample: col(|r| r.wall_ms_per_sample),
            }
        })
        .collect())
}
