use criterion::{criterion_group, criterion_main, Criterion};
use obfsim::attacker::{aoa_tof_profile, extract_paths, ProfileConfig, ProfileMethod};
use obfsim::harness::{run_experiment, Experiment, ExperimentConfig};
use obfsim::{add_awgn, apply_precoder, dolos_precoder, synthesize_channel};
use obfsim_bench::fixture;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn channel_and_precoder(c: &mut Criterion) {
    let f = fixture(7);
    c.bench_function("synthesize_channel", |b| {
        b.iter(|| synthesize_channel(black_box(&f.paths), &f.array, &f.array, &f.band).unwrap())
    });
    let aods = f.paths.reflection_aods();
    c.bench_function("dolos_precoder", |b| {
        b.iter(|| dolos_precoder(black_box(&f.v_d), &aods, f.tau, &f.array, &f.band).unwrap())
    });
    let p = dolos_precoder(&f.v_d, &aods, f.tau, &f.array, &f.band).unwrap();
    c.bench_function("apply_precoder", |b| b.iter(|| apply_precoder(black_box(&f.channel), &p).unwrap()));
}

fn attacker(c: &mut Criterion) {
    let f = fixture(7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noisy = add_awgn(&f.channel, 10.0, &mut rng);
    let mut g = c.benchmark_group("attacker");
    g.sample_size(20);
    g.bench_function("extract_paths", |b| b.iter(|| extract_paths(black_box(&noisy), 5, 1e-3).unwrap()));
    for method in [ProfileMethod::Music, ProfileMethod::Bartlett] {
        let cfg = ProfileConfig {
            method,
            ..Default::default()
        };
        g.bench_function(format!("profile_{method:?}").to_lowercase(), |b| {
            b.iter(|| aoa_tof_profile(black_box(&noisy), &cfg).unwrap())
        });
    }
    g.finish();
}

fn experiment(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::demo(Experiment::AoaDegradation);
    cfg.trials = 4;
    let mut g = c.benchmark_group("experiment");
    g.sample_size(10);
    g.bench_function("aoa_degradation_4_trials", |b| b.iter(|| run_experiment(black_box(&cfg)).unwrap()));
    g.finish();
}

criterion_group!(benches, channel_and_precoder, attacker, experiment);
criterion_main!(benches);
