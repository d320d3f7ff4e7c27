//! Compares the rayon-backed `par::map` against the sequential
//! baseline on the dominant inference workload: per-sample adaptation
//! chains. Run with `cargo bench -p eba-core`; disable the `parallel`
//! feature to confirm `map` degrades to the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use eba_core::data::{generate_rotated_benchmark, BenchmarkSpec};
use eba_core::inference::{predict_sample, EvalOptions};
use eba_core::par;
use eba_core::seeds;
use eba_core::sgld::SgldConfig;
use eba_core::trainer::{NetConfig, TrainConfig, Trainer};

fn bench_batch_prediction(c: &mut Criterion) {
    let spec = BenchmarkSpec {
        classes: 4,
        dim: 16,
        samples_per_class: 30,
        source_angles: vec![15.0, 30.0, 45.0, 60.0, 75.0],
        target_angles: vec![0.0],
        geometry_seed: 0,
        noise_scale: 0.5,
    };
    let (sources, targets) = generate_rotated_benchmark(&spec, 3).unwrap();
    let cfg = TrainConfig {
        iterations: 5,
        batch_size: 32,
        net: NetConfig::default(),
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg, 16, 4, &[15, 30, 45, 60, 75]).unwrap();
    trainer.train(&sources, None).unwrap();
    let bundle = trainer.bundle;

    let opts = EvalOptions {
        sgld: SgldConfig {
            num_steps: 20,
            ..SgldConfig::default()
        },
        num_draws: 2,
        ..EvalOptions::default()
    };

    let target = &targets[0];
    let idx: Vec<usize> = (0..48.min(target.len())).collect();
    let work = |i: &usize| {
        predict_sample(
            &bundle,
            target.features.row_slice(*i),
            &opts,
            seeds::derive(opts.seed, *i as u64),
            None,
        )
        .unwrap()
        .label
    };

    let mut group = c.benchmark_group("batch_prediction");
    group.sample_size(10);
    group.bench_with_input(BenchmarkId::new("par_map", idx.len()), &idx, |b, idx| {
        b.iter(|| par::map(idx, work))
    });
    group.bench_with_input(BenchmarkId::new("map_seq", idx.len()), &idx, |b, idx| {
        b.iter(|| par::map_seq(idx, work))
    });
    group.finish();
}

criterion_group!(benches, bench_batch_prediction);
criterion_main!(benches);
