use criterion::{criterion_group, criterion_main, Criterion};
use densesr::config::TrainConfig;
use densesr::data::make_batches;
use densesr::eval::upscale;
use densesr::models::{Generator, GeneratorSpec};
use densesr::train::Trainer;
use densesr::Shape;
use densesr_bench::ramp_tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn generator_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("generator_eval_forward");
    group.sample_size(10);
    let compact = TrainConfig::compact(4).generator_spec();
    for (name, spec) in [("compact", compact), ("default", GeneratorSpec::default())] {
        let gen = Generator::new(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let lr = ramp_tensor(Shape::new(1, 3, 16, 16), 7);
        group.bench_function(name, |b| b.iter(|| upscale(&gen, &lr).unwrap()));
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = TrainConfig {
        seed: 3,
        ..TrainConfig::compact(4)
    };
    let pairs = cfg.dataset.pairs(4).unwrap();
    let batch = make_batches(&pairs, cfg.batch_size, 0).unwrap().remove(0);
    let mut trainer = Trainer::new(cfg).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("compact_s4_batch16", |b| {
        b.iter(|| trainer.step(&batch).unwrap())
    });
    group.finish();
}

criterion_group!(benches, generator_forward, train_step);
criterion_main!(benches);
