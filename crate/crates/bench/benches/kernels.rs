use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ll3d_core::evalkit::cider_d;
use ll3d_core::geometry::{farthest_point_sampling, Box3D, SceneBounds};
use ll3d_core::lm::{beam_search, GenerationConfig, Strategy, TableScorer};
use ll3d_core::numerics::Graph;
use ll3d_core::textio::{parse_spatial, render_spatial, SpatialToken};

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn graph_ops(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, b) = (random(&mut rng, 64 * 64), random(&mut rng, 64 * 64));
    c.bench_function("matmul_64_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.leaf(64, 64, a.clone(), true).unwrap();
            let w = g.leaf(64, 64, b.clone(), true).unwrap();
            let y = g.matmul(x, w).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(x).map(|v| v[0]))
        })
    });
    let q = random(&mut rng, 32 * 64);
    let kv = random(&mut rng, 128 * 64);
    c.bench_function("attention_32x128_4_heads", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let q = g.leaf(32, 64, q.clone(), true).unwrap();
            let k = g.leaf(128, 64, kv.clone(), false).unwrap();
            let y = g.attention(q, k, k, 4, None).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.scalar(s))
        })
    });
}

fn geometry_and_codec(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let points: Vec<[f64; 3]> = (0..4096).map(|_| std::array::from_fn(|_| rng.random_range(0.0..5.0))).collect();
    c.bench_function("fps_4096_to_64", |b| b.iter(|| farthest_point_sampling(black_box(&points), 64).unwrap()));

    let bounds = SceneBounds::new([0.0; 3], [6.0, 5.0, 3.0]).unwrap();
    let boxes: Vec<Box3D> = (0..1000)
        .map(|_| {
            Box3D::new(
                std::array::from_fn(|a| rng.random_range(0.5..2.5) * (a + 1) as f64 * 0.5),
                std::array::from_fn(|_| rng.random_range(0.2..1.0)),
            )
            .unwrap()
        })
        .collect();
    c.bench_function("codec_1000_boxes_round_trip", |b| {
        b.iter(|| {
            let mut n = 0;
            for bx in &boxes {
                let text = render_spatial(&SpatialToken::quantize_box(bx, &bounds).unwrap());
                n += parse_spatial(&text).tokens.len();
            }
            black_box(n)
        })
    });
}

fn metrics_and_decoding(c: &mut Criterion) {
    let words = ["a", "red", "chair", "by", "the", "wall", "small", "table", "near", "lamp", "blue", "sofa"];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sentence = || (0..8).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ");
    let items: Vec<(String, Vec<String>)> = (0..200).map(|_| (sentence(), vec![sentence(), sentence()])).collect();
    c.bench_function("cider_d_200_items", |b| b.iter(|| black_box(cider_d(&items))));

    let gen = GenerationConfig {
        strategy: Strategy::Beam,
        beam: 4,
        max_new_tokens: 16,
        eos: 49,
        ..GenerationConfig::default()
    };
    c.bench_function("beam4_vocab50_len16", |b| {
        b.iter(|| {
            let mut t = TableScorer {
                vocab: 50,
                seed: 3,
                scale: 2.0,
            };
            black_box(beam_search(&mut t, &gen).unwrap())
        })
    });
}

criterion_group!(benches, graph_ops, geometry_and_codec, metrics_and_decoding);
criterion_main!(benches);
