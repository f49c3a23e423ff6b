//! Throughput comparison between the sequential and the rayon-partitioned
//! matrix kernels, plus the size-dispatched entry point the tape actually
//! calls and one end-to-end training step.
//!
//! The two kernels are bitwise-identical in output (a property test pins
//! that); this suite measures what the `parallel` feature buys at different
//! problem sizes. Sizes straddle the dispatch threshold `PAR_MIN_MACS`:
//! below it `matmul_into` always takes the sequential path because the fork
//! overhead dominates. On a single-core host the parallel kernel is
//! expected to lose at every size — run on a multi-core host to see the
//! crossover.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use dvt::data::{generate_moons, split_supervised, SupervisedSplit};
use dvt::kernels::{matmul_into, matmul_seq};
use dvt::model::{build_model, ArchConfig, DomainSpec, Likelihood};
use dvt::train::{train_semi_supervised, TrainConfig};

fn fill(n: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    group.sample_size(20);
    // MACs: 64³ = 2^18 (below the 2^20 threshold), 128³ = 2^21, 256³ = 2^24.
    for &s in &[64usize, 128, 256] {
        let a = fill(s * s, 1);
        let b = fill(s * s, 2);
        let mut out = vec![0.0; s * s];
        group.throughput(Throughput::Elements((s * s * s) as u64));
        group.bench_function(BenchmarkId::new("seq", s), |bench| {
            bench.iter(|| {
                out.fill(0.0);
                matmul_seq(&a, &b, s, s, s, &mut out);
                std::hint::black_box(&out);
            })
        });
        #[cfg(feature = "parallel")]
        group.bench_function(BenchmarkId::new("par", s), |bench| {
            bench.iter(|| {
                out.fill(0.0);
                dvt::kernels::matmul_par(&a, &b, s, s, s, &mut out);
                std::hint::black_box(&out);
            })
        });
        group.bench_function(BenchmarkId::new("dispatch", s), |bench| {
            bench.iter(|| {
                out.fill(0.0);
                matmul_into(&a, &b, s, s, s, &mut out);
                std::hint::black_box(&out);
            })
        });
    }
    group.finish();
}

fn bench_training(c: &mut Criterion) {
    let arch = ArchConfig {
        class_count: 2,
        latent_dim: 8,
        shared_hidden: vec![16, 16],
        domain_hidden: vec![16],
        shared_classifier: false,
        mu_scale: 10.0,
        prior_sigma: 0.1,
        domains: vec![DomainSpec {
            id: "source".into(),
            input_dim: 2,
            likelihood: Likelihood::Gaussian,
        }],
    };
    let full = generate_moons(500, 100, 0.05, 7, "source").expect("moons");
    let train = split_supervised(&full, SupervisedSplit::Fraction(0.1), true, 7).expect("split");
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("semi_supervised_50_steps", |bench| {
        bench.iter(|| {
            let cfg = TrainConfig { steps: 50, ..TrainConfig::default() };
            let model = build_model(&arch, 0).expect("model");
            let (model, _) = train_semi_supervised(model, &train, &cfg).expect("train");
            std::hint::black_box(model);
        })
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_training);
criterion_main!(benches);
