use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqnet::network::{Model, NetworkConfig};
use seqnet::{brute_force_max_sequence, predict_max_sequence, HeadLogits, SequenceDistribution, Tensor};

fn distribution(n: usize, k: usize, rng: &mut ChaCha8Rng) -> SequenceDistribution {
    let mut logits = HeadLogits::zeros(n, k);
    logits.length.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
    logits.chars.iter_mut().flatten().for_each(|v| *v = rng.random_range(-3.0..3.0));
    SequenceDistribution::from_logits(&logits).unwrap()
}

fn decode(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("decode");
    for (n, k) in [(3, 10), (5, 10)] {
        let d = distribution(n, k, &mut rng);
        g.bench_with_input(BenchmarkId::new("map", format!("N{n}K{k}")), &d, |b, d| b.iter(|| predict_max_sequence(d)));
        g.bench_with_input(BenchmarkId::new("brute_force", format!("N{n}K{k}")), &d, |b, d| {
            b.iter(|| brute_force_max_sequence(d).unwrap())
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = c.benchmark_group("forward");
    g.sample_size(10);
    for (name, cfg) in [("desk", NetworkConfig::desk()), ("svhn-paper", NetworkConfig::svhn_paper())] {
        let model = Model::build(cfg.clone(), 0).unwrap();
        let n = cfg.input.iter().product();
        let img = Tensor::new(cfg.input.to_vec(), (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        g.bench_function(name, |b| b.iter(|| model.forward(&img).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, decode, forward);
criterion_main!(benches);
