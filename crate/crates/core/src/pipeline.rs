//! Subcommand bodies: data generation, teacher training, distillation,
//! sampling and evaluation, all keyed on one run directory.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::consistency::{ConsistencyModel, DistillConfig, Distiller};
use crate::ddpnet::{arm_rewards, PolicyNet, PolicyTrainer};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::net::fingerprint;
use crate::prior::{make_dataset, SceneSample, Split};
use crate::rng::{self, domain};
use crate::teacher::TeacherModel;

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self, split: Split) -> PathBuf {
        self.root.join(format!("{}.lfd", split.name()))
    }

    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher.ckpt")
    }

    pub fn teacher_log(&self) -> PathBuf {
        self.root.join("teacher_log.csv")
    }

    pub fn student(&self) -> PathBuf {
        self.root.join("student.ckpt")
    }

    pub fn policy(&self) -> PathBuf {
        self.root.join("policy.ckpt")
    }

    pub fn distill_log(&self) -> PathBuf {
        self.root.join("distill_log.csv")
    }

    pub fn policy_log(&self) -> PathBuf {
        self.root.join("policy_log.csv")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples.csv")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.csv")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.csv")
    }

    pub fn decisions(&self) -> PathBuf {
        self.root.join("decisions.csv")
    }
}

/// Writes both dataset splits. Existing files are kept unless `force`.
pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<Vec<PathBuf>> {
    let paths = RunPaths::new(&cfg.output_dir);
    let spec = cfg.dataset_spec();
    let targets = [Split::Train, Split::Eval].map(|s| (s, paths.data(s)));
    if !force {
        if let Some((_, p)) = targets.iter().find(|(_, p)| p.exists()) {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    let mut written = Vec::new();
    for (split, path) in targets {
        let data = make_dataset(&spec, split)?;
        checkpoint::write_atomic(&path, &checkpoint::dataset_to_bytes(&spec, split, &data))?;
        written.push(path);
    }
    Ok(written)
}

/// Loads a split and checks it was generated with the configured spec.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<SceneSample>> {
    let path = RunPaths::new(&cfg.output_dir).data(split);
    let file = checkpoint::load_dataset(&path)?;
    checkpoint::check_dataset(&file.spec, &cfg.dataset_spec())?;
    if file.split != split {
        return Err(Error::format(&path, format!("holds the {} split", file.split.name())));
    }
    Ok(file.samples)
}

pub const TEACHER_LOG_HEADER: &str = "iter,loss,lr,wall_ms\n";

/// Trains a teacher in memory, appending `iter,loss,lr,wall_ms` rows to `log`
/// (with the header first if `log` is empty).
pub fn train_teacher_on(
    cfg: &RunConfig,
    teacher: &mut TeacherModel,
    data: &[SceneSample],
    seed: u64,
    log: &mut String,
) -> Result<()> {
    if log.is_empty() {
        log.push_str(TEACHER_LOG_HEADER);
    }
    let lr = cfg.teacher.optimizer.lr;
    let start = Instant::now();
    teacher.train(&cfg.teacher, data, seed, |it, loss| {
        let _ = writeln!(log, "{it},{loss},{lr},{:.3}", start.elapsed().as_secs_f64() * 1e3);
    })
}

/// Trains (or with `resume`, continues) the teacher from the train split.
pub fn train_teacher(cfg: &RunConfig, resume: bool) -> Result<TeacherModel> {
    let paths = RunPaths::new(&cfg.output_dir);
    let data = load_split(cfg, Split::Train)?;
    let sched = cfg.schedule()?;
    let (mut teacher, mut log) = if resume {
        let ck = Checkpoint::load(&paths.teacher())?;
        ck.check_schedule(&cfg.schedule)?;
        let log = std::fs::read_to_string(paths.teacher_log()).unwrap_or_default();
        (ck.into_teacher()?, log)
    } else {
        (
            TeacherModel::init(&cfg.teacher, sched, cfg.dataset.latent_dim, cfg.seed)?,
            String::new(),
        )
    };
    train_teacher_on(cfg, &mut teacher, &data, cfg.seed, &mut log)?;
    Checkpoint::from_teacher(&teacher, cfg.seed).save(&paths.teacher())?;
    checkpoint::write_atomic(&paths.teacher_log(), log.as_bytes())?;
    Ok(teacher)
}

/// Logs produced by [`distill_on`].
#[derive(Debug, Clone, Default)]
pub struct DistillLogs {
    pub distill: String,
    pub policy: String,
}

/// Distils a student from `teacher` in memory. With a policy, a REINFORCE
/// round on each iteration's batch follows the student update for the first
/// `ddp.active_fraction` of iterations.
pub fn distill_on(
    cfg: &RunConfig,
    dcfg: &DistillConfig,
    teacher: &TeacherModel,
    data: &[SceneSample],
    seed: u64,
    with_policy: bool,
    logs: &mut DistillLogs,
) -> Result<(ConsistencyModel, Option<PolicyTrainer>)> {
    let mut student = ConsistencyModel::from_teacher(teacher, dcfg.sigma_data, dcfg.ema_rate)?;
    let mut distiller = Distiller::new(dcfg.clone(), &student, seed)?;
    let mut trainer = if with_policy {
        let p = PolicyNet::init(&cfg.ddp, &student.sched, student.latent_dim(), seed)?;
        Some(PolicyTrainer::new(p, &cfg.ddp)?)
    } else {
        None
    };
    let active = (cfg.ddp.active_fraction * dcfg.iterations as f64).round() as usize;
    let lr = dcfg.optimizer.lr;
    let start = Instant::now();
    logs.distill = String::from("iter,L_D,t_mean,lr,wall_ms\n");
    logs.policy = String::from("iter,L_DDP,mean_reward,baseline\n");
    for it in 0..dcfg.iterations {
        let st = distiller.step(&mut student, teacher, data)?;
        let _ = writeln!(
            logs.distill,
            "{},{},{},{lr},{:.3}",
            st.iteration,
            st.loss,
            st.t_mean,
            start.elapsed().as_secs_f64() * 1e3
        );
        if let Some(tr) = trainer.as_mut().filter(|_| it < active) {
            let before = (fingerprint(student.params.flat()), fingerprint(student.params.ema_flat()));
            let batch: Vec<&SceneSample> = st.batch.iter().map(|&i| &data[i]).collect();
            let ps = tr.round(&student, &batch, seed)?;
            if (fingerprint(student.params.flat()), fingerprint(student.params.ema_flat())) != before {
                return Err(Error::Contract("policy update changed the student".into()));
            }
            let _ = writeln!(logs.policy, "{},{},{},{}", st.iteration, ps.loss, ps.mean_reward, ps.baseline);
        }
    }
    Ok((student, trainer))
}

fn load_teacher(cfg: &RunConfig, paths: &RunPaths) -> Result<TeacherModel> {
    let ck = Checkpoint::load(&paths.teacher())?;
    ck.check_schedule(&cfg.schedule)?;
    if ck.spec.data_dim() != cfg.dataset.latent_dim {
        return Err(Error::Compat {
            field: "dataset.latent_dim".into(),
            expected: cfg.dataset.latent_dim.to_string(),
            found: ck.spec.data_dim().to_string(),
        });
    }
    ck.into_teacher()
}

/// Runs leap-flow distillation with the policy and checkpoints both models.
pub fn distill(cfg: &RunConfig) -> Result<(ConsistencyModel, PolicyNet)> {
    let paths = RunPaths::new(&cfg.output_dir);
    let teacher = load_teacher(cfg, &paths)?;
    let data = load_split(cfg, Split::Train)?;
    let mut logs = DistillLogs::default();
    let (student, trainer) = distill_on(cfg, &cfg.distill, &teacher, &data, cfg.seed, true, &mut logs)?;
    let trainer = trainer.expect("policy requested");
    Checkpoint::from_student(&student, cfg.seed).save(&paths.student())?;
    Checkpoint::from_policy(&trainer.policy, &student.sched, trainer.updates, cfg.seed).save(&paths.policy())?;
    checkpoint::write_atomic(&paths.distill_log(), logs.distill.as_bytes())?;
    checkpoint::write_atomic(&paths.policy_log(), logs.policy.as_bytes())?;
    Ok((student, trainer.policy))
}

fn load_student_and_policy(cfg: &RunConfig, paths: &RunPaths) -> Result<(ConsistencyModel, PolicyNet)> {
    let s = Checkpoint::load(&paths.student())?;
    s.check_schedule(&cfg.schedule)?;
    let p = Checkpoint::load(&paths.policy())?;
    p.check_schedule(&cfg.schedule)?;
    Ok((s.into_student()?, p.into_policy()?))
}

/// One-step (or `n_steps`) student generation for every eval prior, written
/// as `sample_id,q,t_leap,v0,...`.
pub fn sample(cfg: &RunConfig, n_steps: usize) -> Result<PathBuf> {
    let paths = RunPaths::new(&cfg.output_dir);
    let (student, policy) = load_student_and_policy(cfg, &paths)?;
    let data = load_split(cfg, Split::Eval)?;
    let rows = crate::par::try_map_range(data.len(), |i| {
        let s = &data[i];
        let t = policy.select_leap_time(&s.x0_r)?;
        let mut r = rng::stream(cfg.seed, domain::SAMPLE, i as u64);
        Ok((t, student.multistep_generate(s, t, n_steps, &mut r)?))
    })?;
    let mut out = String::from("sample_id,q,t_leap");
    for d in 0..student.latent_dim() {
        let _ = write!(out, ",v{d}");
    }
    out.push('\n');
    for (i, (t, x)) in rows.iter().enumerate() {
        let _ = write!(out, "{i},{},{t}", data[i].q);
        for v in x {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    let path = paths.samples();
    checkpoint::write_atomic(&path, out.as_bytes())?;
    Ok(path)
}

/// Policy decisions on the eval set; with `oracle`, the mean reward of every
/// arm is appended.
pub fn decisions_csv(
    student: &ConsistencyModel,
    policy: &PolicyNet,
    data: &[SceneSample],
    oracle_draws: Option<usize>,
    seed: u64,
) -> Result<String> {
    let rows = crate::par::try_map_range(data.len(), |i| {
        let s = &data[i];
        let arm = policy.select_arm(&s.x0_r)?;
        let rewards = match oracle_draws {
            Some(k) => {
                let mut r = rng::stream2(seed, domain::EVAL, 4, i as u64);
                Some(arm_rewards(student, &policy.arm_times, s, k, &mut r)?)
            }
            None => None,
        };
        Ok((arm, rewards))
    })?;
    let mut out = String::from("sample_id,q,chosen_arm,chosen_time");
    if oracle_draws.is_some() {
        for a in 0..policy.n_arms() {
            let _ = write!(out, ",reward_arm{a}");
        }
    }
    out.push('\n');
    for (i, (arm, rewards)) in rows.iter().enumerate() {
        let _ = write!(out, "{i},{},{arm},{}", data[i].q, policy.arm_times[*arm]);
        for r in rewards.iter().flatten() {
            let _ = write!(out, ",{r}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Everything trained for one seed of the ablation table.
pub struct SeedRun {
    pub teacher: TeacherModel,
    pub leap: ConsistencyModel,
    pub policy: PolicyNet,
    pub no_leap: ConsistencyModel,
    pub train: Vec<SceneSample>,
    pub eval: Vec<SceneSample>,
}

/// Generates data and trains every model for `seed`, in memory.
pub fn train_all(cfg: &RunConfig, seed: u64) -> Result<SeedRun> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let spec = cfg.dataset_spec();
    let train = make_dataset(&spec, Split::Train)?;
    let eval_set = make_dataset(&spec, Split::Eval)?;
    let mut teacher = TeacherModel::init(&cfg.teacher, cfg.schedule()?, spec.latent_dim, seed)?;
    train_teacher_on(&cfg, &mut teacher, &train, seed, &mut String::new())?;
    let mut logs = DistillLogs::default();
    let (leap, trainer) = distill_on(&cfg, &cfg.distill, &teacher, &train, seed, true, &mut logs)?;
    let no_leap_cfg = DistillConfig {
        leap: false,
        ..cfg.distill.clone()
    };
    let (no_leap, _) = distill_on(&cfg, &no_leap_cfg, &teacher, &train, seed, false, &mut logs)?;
    Ok(SeedRun {
        teacher,
        leap,
        policy: trainer.expect("policy requested").policy,
        no_leap,
        train,
        eval: eval_set,
    })
}

/// Ablation rows for `eval.ablation_seeds` consecutive seeds starting at the
/// run seed, with the per-column median.
pub fn ablation(cfg: &RunConfig) -> Result<(Vec<EvalReport>, Vec<Vec<EvalReport>>)> {
    let mut tables = Vec::new();
    for k in 0..cfg.eval.ablation_seeds as u64 {
        let seed = cfg.seed.wrapping_add(k);
        let run = train_all(cfg, seed)?;
        tables.push(eval::ablation_suite(
            &run.teacher,
            &run.leap,
            &run.no_leap,
            &run.policy,
            &run.eval,
            &cfg.eval,
            seed,
        )?);
    }
    Ok((eval::median_reports(&tables)?, tables))
}

/// Options of the `eval` subcommand.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub steps: Option<Vec<usize>>,
    pub ablate: bool,
    pub oracle: bool,
}

/// Step sweep from the run's checkpoints, plus the ablation table when asked.
pub fn evaluate(cfg: &RunConfig, opts: &EvalOptions) -> Result<Vec<PathBuf>> {
    let paths = RunPaths::new(&cfg.output_dir);
    let mut written = Vec::new();
    let run_sweep = opts.steps.is_some() || !opts.ablate;
    if run_sweep {
        let steps = opts.steps.clone().unwrap_or_else(|| cfg.eval.steps.clone());
        let teacher = load_teacher(cfg, &paths)?;
        let (student, policy) = load_student_and_policy(cfg, &paths)?;
        let data = load_split(cfg, Split::Eval)?;
        let rows = eval::step_sweep(&teacher, &student, Some(&policy), &data, &steps, &cfg.eval, cfg.seed)?;
        checkpoint::write_atomic(&paths.eval(), eval::reports_to_csv(&rows).as_bytes())?;
        written.push(paths.eval());
        let oracle = opts.oracle.then_some(cfg.ddp.oracle_draws);
        let dec = decisions_csv(&student, &policy, &data, oracle, cfg.seed)?;
        checkpoint::write_atomic(&paths.decisions(), dec.as_bytes())?;
        written.push(paths.decisions());
    }
    if opts.ablate {
        let (median, _) = ablation(cfg)?;
        checkpoint::write_atomic(&paths.ablation(), eval::reports_to_csv(&median).as_bytes())?;
        written.push(paths.ablation());
    }
    Ok(written)
}

/// Parses `1,4,50`.
pub fn parse_steps(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad step count {p:?} in {s:?}")))
        })
        .collect()
}
