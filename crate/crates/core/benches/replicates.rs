use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowproc_core::model::{make_coefficients, CoefficientSpec};
use flowproc_core::noise::{make_noise_path, replicate_seed};
use flowproc_core::par::{map_replicates, Execution};
use flowproc_core::particles::{simulate, ParticleConfig};
use flowproc_core::spde::{run_spde, SpdeConfig};
use flowproc_core::AtomicMeasure;

fn particles(c: &mut Criterion) {
    let coeffs = make_coefficients(&CoefficientSpec::constant_1d(0.0, 0.5, 1.0)).unwrap();
    let mu = AtomicMeasure::dirac(&[0.0], 1.0).unwrap();
    let cfg = ParticleConfig::new(0.01);
    let mut group = c.benchmark_group("particle_replicates");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| {
                map_replicates(64, exec, |r| {
                    let s = replicate_seed(1, r as u64);
                    let w = make_noise_path(s, 1e-3, 500, 1).unwrap();
                    simulate(&coeffs, &mu, &cfg, &w, 1e-3, &[500], s).unwrap()[0].total_mass()
                })
            })
        });
    }
    group.finish();
}

fn spde(c: &mut Criterion) {
    let coeffs = make_coefficients(&CoefficientSpec::constant_1d(0.0, 0.5, 1.0)).unwrap();
    let mu = AtomicMeasure::dirac(&[0.0], 1.0).unwrap();
    let cfg = SpdeConfig {
        x_min: -4.0,
        x_max: 4.0,
        dx: 0.02,
        dt: 1e-4,
        t_final: 0.1,
        snapshot_times: Vec::new(),
        record_every: usize::MAX,
        safety_width: 0.5,
    };
    let mut group = c.benchmark_group("spde_replicates");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| {
                map_replicates(16, exec, |r| {
                    let s = replicate_seed(2, r as u64);
                    let w = make_noise_path(s, cfg.dt, cfg.steps(), 1).unwrap();
                    run_spde(&coeffs, &mu, &cfg, &w, &[], s).unwrap().final_field.mass()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, particles, spde);
criterion_main!(benches);
