use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use ll3d_core::datagen::DatasetConfig;
use ll3d_core::lm::{GenerationConfig, Strategy};
use ll3d_core::numerics::Graph;
use ll3d_core::pipeline::{Model, RunConfig};

/// Fixture-sized model with fresh weights over a few scenes.
fn setup() -> (Model, ll3d_core::datagen::Dataset) {
    let mut config = RunConfig::fixture();
    config.data = DatasetConfig {
        scenes: 2,
        ..config.data
    };
    let dataset = config.dataset().unwrap();
    let mut model = Model::new(config, dataset.vocabulary()).unwrap();
    model.freeze_base();
    (model, dataset)
}

fn model_passes(c: &mut Criterion) {
    let (model, dataset) = setup();
    let scene = &dataset.scenes[0];
    c.bench_function("scene_encoder_1024_points", |b| b.iter(|| black_box(model.scene_context(scene).unwrap())));

    let ctx = model.scene_context(scene).unwrap();
    let sample = dataset.samples.iter().find(|s| s.scene_id == scene.id && !s.prompts.is_empty()).unwrap();
    let seq = sample.sequence(&model.vocab);
    c.bench_function("training_sample_fwd_bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let loss = model.sample_loss(&mut g, &ctx, &sample.prompts, &seq).unwrap();
            g.backward(loss).unwrap();
            black_box(g.scalar(loss))
        })
    });

    let gen = GenerationConfig {
        strategy: Strategy::Greedy,
        max_new_tokens: 24,
        eos: model.vocab.len() as u32,
        ..GenerationConfig::default()
    };
    c.bench_function("greedy_24_tokens", |b| {
        b.iter(|| black_box(model.respond(&ctx, &sample.prompts, &sample.instruction, &gen).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = model_passes
}
criterion_main!(benches);
