//! Binary checkpoints and dataset files.
//!
//! A checkpoint is
//!
//! ```text
//! LEAPFLOW1
//! crc32 = <8 hex digits of the CRC-32 of the header block>
//! header_len = <bytes in the header block>
//! <header block: "key = value" lines>
//! <payload: little-endian f64, live parameters then EMA parameters>
//! ```
//!
//! A dataset file is
//!
//! ```text
//! LEAPFLOWDATA1
//! header_len = <bytes>
//! <header block: split, count, seed, then the dataset spec as TOML>
//! <payload: little-endian f64 blocks [n, D] x0, [n, D] x0_r, [n, D] cond, [n] q>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::consistency::ConsistencyModel;
use crate::ddpnet::PolicyNet;
use crate::error::{Error, Result};
use crate::net::{Activation, NetParams, NetSpec};
use crate::prior::{DatasetSpec, SceneSample, Split};
use crate::schedule::{NoiseSchedule, ScheduleConfig, ScheduleKind};
use crate::teacher::{SolverKind, TeacherModel};

pub const MAGIC: &str = "LEAPFLOW1";
pub const DATA_MAGIC: &str = "LEAPFLOWDATA1";

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Splits `bytes` into the first line (without newline) and the rest.
fn take_line<'a>(bytes: &'a [u8], path: &Path) -> Result<(&'a str, &'a [u8])> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "truncated preamble"))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(path, "preamble is not UTF-8"))?;
    Ok((line, &bytes[end + 1..]))
}

fn preamble_value<'a>(line: &'a str, key: &str, path: &Path) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.trim_start().strip_prefix('='))
        .map(str::trim)
        .ok_or_else(|| Error::format(path, format!("expected `{key} = ...`, found {line:?}")))
}

fn push_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Teacher,
    Student,
    Policy,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Student => "student",
            ModelKind::Policy => "policy",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "teacher" => Some(ModelKind::Teacher),
            "student" => Some(ModelKind::Student),
            "policy" => Some(ModelKind::Policy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub spec: NetSpec,
    pub schedule: ScheduleConfig,
    pub iteration: u64,
    pub seed: u64,
    pub ema_rate: f64,
    /// Model-specific fields (solver, sigma_data, arm times).
    pub extras: BTreeMap<String, String>,
    pub flat: Vec<f64>,
    pub ema_flat: Vec<f64>,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

impl Checkpoint {
    fn header_text(&self) -> String {
        let s = &self.schedule;
        let mut h = String::new();
        let _ = writeln!(h, "kind = {}", self.kind.name());
        let _ = writeln!(h, "layer_widths = {}", join(&self.spec.layer_widths));
        let _ = writeln!(h, "activation = {}", self.spec.activation.name());
        let _ = writeln!(h, "time_embed_dim = {}", self.spec.time_embed_dim);
        let _ = writeln!(h, "cond_dim = {}", self.spec.cond_dim);
        let _ = writeln!(h, "schedule.kind = {}", s.kind.name());
        let _ = writeln!(h, "schedule.t_max = {}", s.t_max);
        let _ = writeln!(h, "schedule.t_prime = {}", s.t_prime);
        let _ = writeln!(h, "schedule.eps = {}", s.eps);
        let _ = writeln!(h, "schedule.n_grid = {}", s.n_grid);
        let _ = writeln!(h, "schedule.k = {}", s.k);
        let _ = writeln!(h, "iteration = {}", self.iteration);
        let _ = writeln!(h, "seed = {}", self.seed);
        let _ = writeln!(h, "ema_rate = {}", self.ema_rate);
        let _ = writeln!(h, "n_params = {}", self.flat.len());
        for (k, v) in &self.extras {
            let _ = writeln!(h, "extra.{k} = {v}");
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_text();
        let mut out = Vec::with_capacity(header.len() + 64 + 16 * self.flat.len());
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        let crc = crc32fast::hash(header.as_bytes());
        out.extend_from_slice(format!("crc32 = {crc:08x}\nheader_len = {}\n", header.len()).as_bytes());
        out.extend_from_slice(header.as_bytes());
        push_f64s(&mut out, &self.flat);
        push_f64s(&mut out, &self.ema_flat);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (magic, rest) = take_line(bytes, path)?;
        if magic != MAGIC {
            return Err(Error::format(path, format!("bad magic {magic:?}")));
        }
        let (line, rest) = take_line(rest, path)?;
        let crc = u32::from_str_radix(preamble_value(line, "crc32", path)?, 16)
            .map_err(|_| Error::format(path, "bad crc32 field"))?;
        let (line, rest) = take_line(rest, path)?;
        let len: usize = preamble_value(line, "header_len", path)?
            .parse()
            .map_err(|_| Error::format(path, "bad header_len field"))?;
        if rest.len() < len {
            return Err(Error::format(path, "truncated header"));
        }
        let (header, payload) = rest.split_at(len);
        let found = crc32fast::hash(header);
        if found != crc {
            return Err(Error::format(
                path,
                format!("header checksum mismatch: stored {crc:08x}, computed {found:08x}"),
            ));
        }
        let header = std::str::from_utf8(header).map_err(|_| Error::format(path, "header is not UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::format(path, format!("bad header line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format(path, format!("header lacks `{k}`")))
        };
        fn num<T: std::str::FromStr>(v: &str, k: &str, path: &Path) -> Result<T> {
            v.parse().map_err(|_| Error::format(path, format!("bad value {v:?} for `{k}`")))
        }
        let kind = ModelKind::parse(get("kind")?).ok_or_else(|| Error::format(path, "unknown model kind"))?;
        let widths = get("layer_widths")?
            .split_whitespace()
            .map(|w| num(w, "layer_widths", path))
            .collect::<Result<Vec<usize>>>()?;
        let activation =
            Activation::parse(get("activation")?).ok_or_else(|| Error::format(path, "unknown activation"))?;
        let spec = NetSpec::new(
            widths,
            activation,
            num(get("time_embed_dim")?, "time_embed_dim", path)?,
            num(get("cond_dim")?, "cond_dim", path)?,
        )?;
        let sk = match get("schedule.kind")? {
            "vp_cosine" => ScheduleKind::VpCosine,
            "vp_linear" => ScheduleKind::VpLinear,
            "edm_identity" => ScheduleKind::EdmIdentity,
            other => return Err(Error::format(path, format!("unknown schedule {other:?}"))),
        };
        let schedule = ScheduleConfig {
            kind: sk,
            t_max: num(get("schedule.t_max")?, "schedule.t_max", path)?,
            t_prime: num(get("schedule.t_prime")?, "schedule.t_prime", path)?,
            eps: num(get("schedule.eps")?, "schedule.eps", path)?,
            n_grid: num(get("schedule.n_grid")?, "schedule.n_grid", path)?,
            k: num(get("schedule.k")?, "schedule.k", path)?,
        };
        let n_params: usize = num(get("n_params")?, "n_params", path)?;
        if n_params != spec.n_params() {
            return Err(Error::format(
                path,
                format!("n_params {n_params} disagrees with layer widths ({})", spec.n_params()),
            ));
        }
        if payload.len() != 16 * n_params {
            return Err(Error::format(
                path,
                format!("payload holds {} bytes, expected {}", payload.len(), 16 * n_params),
            ));
        }
        let values = f64s(payload);
        let extras = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Self {
            kind,
            spec,
            schedule,
            iteration: num(get("iteration")?, "iteration", path)?,
            seed: num(get("seed")?, "seed", path)?,
            ema_rate: num(get("ema_rate")?, "ema_rate", path)?,
            extras,
            flat: values[..n_params].to_vec(),
            ema_flat: values[n_params..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?, path)
    }

    fn params(&self) -> Result<NetParams> {
        NetParams::from_flat(self.spec.clone(), self.flat.clone(), self.ema_flat.clone(), self.ema_rate)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Compat {
                field: "kind".into(),
                expected: kind.name().into(),
                found: self.kind.name().into(),
            });
        }
        Ok(())
    }

    fn extra(&self, key: &str) -> Result<&str> {
        self.extras
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Compat {
                field: format!("extra.{key}"),
                expected: "present".into(),
                found: "missing".into(),
            })
    }

    /// Fails with the first schedule field that differs from `expected`.
    pub fn check_schedule(&self, expected: &ScheduleConfig) -> Result<()> {
        let a = &self.schedule;
        let b = expected;
        let fields: [(&str, String, String); 6] = [
            ("schedule.kind", b.kind.name().into(), a.kind.name().into()),
            ("schedule.t_max", b.t_max.to_string(), a.t_max.to_string()),
            ("schedule.t_prime", b.t_prime.to_string(), a.t_prime.to_string()),
            ("schedule.eps", b.eps.to_string(), a.eps.to_string()),
            ("schedule.n_grid", b.n_grid.to_string(), a.n_grid.to_string()),
            ("schedule.k", b.k.to_string(), a.k.to_string()),
        ];
        for (field, exp, found) in fields {
            if exp != found {
                return Err(Error::Compat {
                    field: field.into(),
                    expected: exp,
                    found,
                });
            }
        }
        Ok(())
    }

    pub fn from_teacher(m: &TeacherModel, seed: u64) -> Self {
        let mut extras = BTreeMap::new();
        extras.insert("solver".into(), m.solver.name().into());
        Self::from_params(ModelKind::Teacher, &m.params, &m.sched, m.iteration, seed, extras)
    }

    pub fn from_student(m: &ConsistencyModel, seed: u64) -> Self {
        let mut extras = BTreeMap::new();
        extras.insert("sigma_data".into(), m.sigma_data.to_string());
        Self::from_params(ModelKind::Student, &m.params, &m.sched, m.iteration, seed, extras)
    }

    pub fn from_policy(p: &PolicyNet, sched: &NoiseSchedule, updates: u64, seed: u64) -> Self {
        let mut extras = BTreeMap::new();
        extras.insert("arm_times".into(), join(&p.arm_times));
        Self::from_params(ModelKind::Policy, &p.params, sched, updates, seed, extras)
    }

    fn from_params(
        kind: ModelKind,
        p: &NetParams,
        sched: &NoiseSchedule,
        iteration: u64,
        seed: u64,
        extras: BTreeMap<String, String>,
    ) -> Self {
        Self {
            kind,
            spec: p.spec().clone(),
            schedule: sched.config().clone(),
            iteration,
            seed,
            ema_rate: p.ema_rate(),
            extras,
            flat: p.flat().to_vec(),
            ema_flat: p.ema_flat().to_vec(),
        }
    }

    pub fn into_teacher(self) -> Result<TeacherModel> {
        self.expect_kind(ModelKind::Teacher)?;
        let solver = match self.extra("solver")? {
            "ddim" => SolverKind::Ddim,
            "euler" => SolverKind::Euler,
            other => {
                return Err(Error::Compat {
                    field: "extra.solver".into(),
                    expected: "ddim or euler".into(),
                    found: other.into(),
                })
            }
        };
        let mut m = TeacherModel::new(self.params()?, NoiseSchedule::new(self.schedule.clone())?, solver)?;
        m.iteration = self.iteration;
        Ok(m)
    }

    pub fn into_student(self) -> Result<ConsistencyModel> {
        self.expect_kind(ModelKind::Student)?;
        let sd: f64 = self.extra("sigma_data")?.parse().map_err(|_| Error::Compat {
            field: "extra.sigma_data".into(),
            expected: "a number".into(),
            found: self.extras["sigma_data"].clone(),
        })?;
        let mut m = ConsistencyModel::new(self.params()?, NoiseSchedule::new(self.schedule.clone())?, sd)?;
        m.iteration = self.iteration;
        Ok(m)
    }

    pub fn into_policy(self) -> Result<PolicyNet> {
        self.expect_kind(ModelKind::Policy)?;
        let arms = self
            .extra("arm_times")?
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Compat {
                    field: "extra.arm_times".into(),
                    expected: "numbers".into(),
                    found: v.into(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        PolicyNet::new(self.params()?, arms)
    }
}

/// Serialises one dataset split.
pub fn dataset_to_bytes(spec: &DatasetSpec, split: Split, data: &[SceneSample]) -> Vec<u8> {
    let mut header = String::new();
    let _ = writeln!(header, "split = {}", split.name());
    let _ = writeln!(header, "count = {}", data.len());
    let _ = writeln!(header, "seed = {}", spec.seed);
    header.push_str(&toml::to_string(spec).expect("dataset spec is serialisable"));
    let d = spec.latent_dim;
    let mut out = Vec::with_capacity(header.len() + 40 + data.len() * (3 * d + 1) * 8);
    out.extend_from_slice(DATA_MAGIC.as_bytes());
    out.extend_from_slice(format!("\nheader_len = {}\n", header.len()).as_bytes());
    out.extend_from_slice(header.as_bytes());
    for s in data {
        push_f64s(&mut out, &s.x0);
    }
    for s in data {
        push_f64s(&mut out, &s.x0_r);
    }
    for s in data {
        push_f64s(&mut out, &s.cond);
    }
    for s in data {
        push_f64s(&mut out, &[s.q]);
    }
    out
}

/// Parsed dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub spec: DatasetSpec,
    pub split: Split,
    pub samples: Vec<SceneSample>,
}

pub fn dataset_from_bytes(bytes: &[u8], path: &Path) -> Result<DatasetFile> {
    let (magic, rest) = take_line(bytes, path)?;
    if magic != DATA_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}")));
    }
    let (line, rest) = take_line(rest, path)?;
    let len: usize = preamble_value(line, "header_len", path)?
        .parse()
        .map_err(|_| Error::format(path, "bad header_len field"))?;
    if rest.len() < len {
        return Err(Error::format(path, "truncated header"));
    }
    let (header, payload) = rest.split_at(len);
    let header = std::str::from_utf8(header).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let mut lines = header.splitn(4, '\n');
    let mut field = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| Error::format(path, "truncated header"))?;
        Ok(preamble_value(line, key, path)?.to_string())
    };
    let split = match field("split")?.as_str() {
        "train" => Split::Train,
        "eval" => Split::Eval,
        other => return Err(Error::format(path, format!("unknown split {other:?}"))),
    };
    let count: usize = field("count")?.parse().map_err(|_| Error::format(path, "bad count"))?;
    let seed: u64 = field("seed")?.parse().map_err(|_| Error::format(path, "bad seed"))?;
    let rest = lines.next().unwrap_or("");
    let mut spec: DatasetSpec =
        toml::from_str(rest).map_err(|e| Error::format(path, format!("dataset spec: {}", e.message())))?;
    spec.seed = seed;
    let d = spec.latent_dim;
    if payload.len() != count * (3 * d + 1) * 8 {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, expected {}", payload.len(), count * (3 * d + 1) * 8),
        ));
    }
    let v = f64s(payload);
    let block = |b: usize, i: usize| v[b * count * d + i * d..b * count * d + (i + 1) * d].to_vec();
    let samples = (0..count)
        .map(|i| SceneSample {
            x0: block(0, i),
            x0_r: block(1, i),
            cond: block(2, i),
            q: v[3 * count * d + i],
        })
        .collect();
    Ok(DatasetFile { spec, split, samples })
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    dataset_from_bytes(&read(path)?, path)
}

/// Fails with the first top-level dataset key that differs.
pub fn check_dataset(found: &DatasetSpec, expected: &DatasetSpec) -> Result<()> {
    if found == expected {
        return Ok(());
    }
    let a = toml::Value::try_from(expected).expect("serialisable");
    let b = toml::Value::try_from(found).expect("serialisable");
    let (toml::Value::Table(a), toml::Value::Table(b)) = (a, b) else {
        unreachable!("dataset spec serialises to a table")
    };
    for (k, va) in &a {
        if b.get(k) != Some(va) {
            return Err(Error::Compat {
                field: format!("dataset.{k}"),
                expected: va.to_string(),
                found: b.get(k).map_or("missing".into(), ToString::to_string),
            });
        }
    }
    Err(Error::Compat {
        field: "dataset.seed".into(),
        expected: expected.seed.to_string(),
        found: found.seed.to_string(),
    })
}
