use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use unlearn_probe::conditioning::{ConceptWorld, WorldConfig};
use unlearn_probe::diffusion::{NoiseSchedule, Sampler, ScheduleConfig};
use unlearn_probe::evaluation::{train_classifier, AttackInput, ClassifierConfig, Evaluator};
use unlearn_probe::model::{DenoiserModel, ModelConfig};
use unlearn_probe::par;
use unlearn_probe::rng::Stream;

fn workers() -> usize {
    std::thread::available_parallelism().map_or(4, |n| n.get()).max(2)
}

fn restoration_cells(c: &mut Criterion) {
    let world = ConceptWorld::generate(&WorldConfig::default(), 0).unwrap();
    let clf = train_classifier(&world, &ClassifierConfig::default(), 0).unwrap();
    let sched = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
    let models: Vec<DenoiserModel> = (0..4)
        .map(|s| DenoiserModel::new(&ModelConfig::for_vocab(6), &mut Stream::new(s)))
        .collect();
    let eval = Evaluator {
        classifier: &clf,
        sched: &sched,
        sampler: Sampler::default(),
        n: 200,
        workers: 1,
    };
    let cells: Vec<(usize, usize)> = (0..models.len()).flat_map(|m| (0..3).map(move |k| (m, k))).collect();
    let cell = |&(m, k): &(usize, usize)| {
        eval.restoration_accuracy(&models[m], &AttackInput::Token(k), k, 7)
            .unwrap()
            .accuracy
    };

    let mut group = c.benchmark_group("restoration_cells");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("sequential", cells.len()), |b| {
        b.iter(|| par::map_seq(&cells, cell))
    });
    #[cfg(feature = "parallel")]
    group.bench_function(BenchmarkId::new(format!("rayon-{}", workers()), cells.len()), |b| {
        b.iter(|| par::map_par(&cells, workers(), cell))
    });
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let sched = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
    let model = DenoiserModel::new(&ModelConfig::for_vocab(6), &mut Stream::new(1));
    let prompt = AttackInput::Token(2).prompt();
    let mut group = c.benchmark_group("sample_1000");
    group.sample_size(10);
    for w in [1, workers()] {
        group.bench_with_input(BenchmarkId::from_parameter(w), &w, |b, &w| {
            b.iter(|| unlearn_probe::diffusion::sample(&model, &prompt, 1000, &sched, Sampler::default(), 3, w).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, restoration_cells, sampling);
criterion_main!(benches);
