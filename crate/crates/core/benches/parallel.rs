use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use leapflow::consistency::distill_loss_and_grad;
use leapflow::prior::make_dataset;
use leapflow::{
    eval, par, ConsistencyModel, DatasetSpec, Metric, MetricKind, NoiseSchedule, Optimizer, SceneSample,
    ScheduleConfig, Split, TeacherConfig, TeacherModel,
};

fn setup() -> (TeacherModel, ConsistencyModel, Vec<SceneSample>) {
    let spec = DatasetSpec {
        n_train: 256,
        n_eval: 256,
        seed: 3,
        ..DatasetSpec::default()
    };
    let data = make_dataset(&spec, Split::Train).unwrap();
    let sched = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
    let teacher = TeacherModel::init(&TeacherConfig::default(), sched, spec.latent_dim, 3).unwrap();
    let student = ConsistencyModel::from_teacher(&teacher, 0.5, 0.95).unwrap();
    (teacher, student, data)
}

/// Runs `f` either on the global pool or on a one-thread pool.
fn modes<F: Fn() + Sync + Send>(c: &mut Criterion, group: &str, f: F) {
    let mut g = c.benchmark_group(group);
    g.bench_function(BenchmarkId::new("pooled", par_threads()), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new("single", 1), |b| {
        b.iter(|| par::run_single_threaded(&f))
    });
    g.finish();
}

fn par_threads() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();
    #[cfg(not(feature = "parallel"))]
    1
}

fn bench(c: &mut Criterion) {
    par::configure_from_env();
    let (teacher, student, data) = setup();
    let batch: Vec<&SceneSample> = data.iter().take(64).collect();

    modes(c, "teacher_step", || {
        let mut t = teacher.clone();
        let mut opt = Optimizer::new(TeacherConfig::default().optimizer, t.params.flat().len()).unwrap();
        t.train_step(&mut opt, &batch, 1).unwrap();
    });

    let metric = Metric::new(MetricKind::PseudoHuber, None, student.latent_dim()).unwrap();
    modes(c, "distill_grad", || {
        distill_loss_and_grad(&student, &teacher, &batch, metric, true, 1).unwrap();
    });

    let a: Vec<Vec<f64>> = data[..128].iter().map(|s| s.x0.clone()).collect();
    let b: Vec<Vec<f64>> = data[128..].iter().map(|s| s.x0_r.clone()).collect();
    modes(c, "mmd", || {
        eval::mmd(&a, &b, 1.0).unwrap();
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench
}
criterion_main!(benches);
