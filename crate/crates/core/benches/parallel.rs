//! Sequential versus data-parallel execution of the batch-level routines:
//! dataset generation, flow-matching and prediction gradients, and the
//! finite-difference symplecticity check.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use psn_core::dataio::{generate_dataset, seeded_rng, RunConfig};
use psn_core::geometry::{canonical_form, dirac_lift, fd_jacobian};
use psn_core::integrators::LiftedTrajectory;
use psn_core::nets::{sympnet_step_flat, LossChannels, PsnParams, SympNetParams};
use psn_core::par::{self, Exec};
use psn_core::training::{flow_matching_grad, flow_samples, prediction_grad, prediction_pairs};
use rand::Rng;

const CONFIG: &str = r#"
[system]
kind = "pendulum_on_circle"
mass = 1.0
length = 1.0
gravity = 9.81
damping = 0.1

[control]
kind = "piecewise_constant_random"
amplitude = [0.5]
hold = 0.1
seed = 0

[integrator]
dt = 0.01
steps = 100
substeps = 10

[dataset]
trajectories = 16
seed = 3
position_range = 1.0
velocity_range = 1.0
"#;

fn modes() -> [(&'static str, Exec); 2] {
    [
        ("sequential", Exec::Sequential),
        ("parallel", Exec::Parallel),
    ]
}

fn lifted(cfg: &RunConfig) -> Vec<LiftedTrajectory> {
    let sys = cfg.system.build();
    generate_dataset(cfg, Exec::Parallel)
        .unwrap()
        .iter()
        .map(|g| dirac_lift(&g.trajectory, sys.as_ref()).unwrap())
        .collect()
}

fn bench_generate(c: &mut Criterion) {
    let cfg = RunConfig::from_toml(CONFIG).unwrap();
    let mut group = c.benchmark_group("generate_dataset");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| generate_dataset(&cfg, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_gradients(c: &mut Criterion) {
    let cfg = RunConfig::from_toml(CONFIG).unwrap();
    let data = lifted(&cfg);
    let samples = flow_samples(&data, 10, LossChannels::P0Only, 7).unwrap();
    let batch = &samples[..64.min(samples.len())];
    let psn = PsnParams::init(6, 32, LossChannels::P0Only, &mut seeded_rng(1));
    let pairs = prediction_pairs(&data, 3);
    let pairs = &pairs[..256.min(pairs.len())];
    let net = SympNetParams::init(4, 6, 32, &mut seeded_rng(2));

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(
            BenchmarkId::new("flow_matching", name),
            &exec,
            |b, &exec| b.iter(|| flow_matching_grad(&psn, batch, false, exec).unwrap()),
        );
        group.bench_with_input(BenchmarkId::new("prediction", name), &exec, |b, &exec| {
            b.iter(|| prediction_grad(&net, pairs, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_jacobian_checks(c: &mut Criterion) {
    let net = SympNetParams::init(4, 6, 32, &mut seeded_rng(5));
    let mut rng = seeded_rng(6);
    let points: Vec<Vec<f64>> = (0..100)
        .map(|_| (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();
    let form = canonical_form(4);
    let mut group = c.benchmark_group("symplecticity_check");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                par::map(exec, &points, |z| {
                    let jac = fd_jacobian(|x| sympnet_step_flat(&net, x, 0.01), z, 1e-5).unwrap();
                    form.pullback_defect(&form, &jac)
                })
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_generate,
    bench_gradients,
    bench_jacobian_checks
);
criterion_main!(benches);
