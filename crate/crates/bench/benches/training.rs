use criterion::{criterion_group, criterion_main, Criterion};
use dann_bench::{mixed_images, tensor};
use dann_core::data::ImageSample;
use dann_core::eval::{tsne, TsneConfig};
use dann_core::training::{train_step, OptimizerState, TauSchedule, TrainConfig, TrainMode};
use dann_core::{BackboneConfig, ModelParams};
use std::hint::black_box;

fn step(c: &mut Criterion) {
    let backbone = BackboneConfig::default();
    let images = mixed_images(6, backbone.input_size);
    let batch: Vec<&ImageSample> = images.iter().collect();
    let schedule = TauSchedule::new(45, 90).unwrap();
    let mut group = c.benchmark_group("train_step");
    for mode in [TrainMode::SourceOnly, TrainMode::Dann] {
        let cfg = TrainConfig {
            mode,
            ..Default::default()
        };
        let mut params = ModelParams::build(&backbone, 0).unwrap();
        let mut state = OptimizerState::new(&params);
        group.bench_function(format!("{mode:?}_batch6_32px"), |bench| {
            bench.iter(|| black_box(train_step(&mut params, &batch, schedule, &cfg, &mut state).unwrap()))
        });
    }
    group.finish();
}

fn embedding(c: &mut Criterion) {
    let points: Vec<Vec<f64>> = tensor(&[180, 64], 7).data().chunks(64).map(<[f64]>::to_vec).collect();
    let cfg = TsneConfig {
        iterations: 250,
        ..Default::default()
    };
    let mut group = c.benchmark_group("tsne");
    group.sample_size(10);
    group.bench_function("180x64_250_iters", |bench| bench.iter(|| black_box(tsne(&points, &cfg).unwrap())));
    group.finish();
}

criterion_group!(benches, step, embedding);
criterion_main!(benches);
