use psn_core::dataio::{generate_dataset, RunConfig};
use psn_core::geometry::{dirac_lift, lift_point, PhasePoint};
use psn_core::integrators::{generate_trajectory, LiftedTrajectory};
use psn_core::nets::{LossChannels, Model, PsnParams, SympNetParams};
use psn_core::systems::{ControlSignal, PendulumOnCircle};
use psn_core::training::{
    adam_step, central_difference, evaluate_p0, evaluate_rollout, flow_matching_loss, flow_samples,
    prediction_loss, prediction_pairs, train_psn, train_sympnet, AffinePredictor, EpochMetrics,
    OptimizerState, P0Source, PredictionPair, StepPredictor, TrainConfig,
};
use psn_core::verify::{random_points, symplecticity_certificate};
use psn_core::{Exec, Result};

fn config(system: &str, control: &str, trajectories: usize, steps: usize) -> RunConfig {
    RunConfig::from_toml(&format!(
        r#"
{system}
{control}
[integrator]
dt = 0.01
steps = {steps}
substeps = 4
[dataset]
trajectories = {trajectories}
seed = 11
position_range = 1.0
velocity_range = 1.0
"#
    ))
    .unwrap()
}

const OSCILLATOR: &str = r#"[system]
kind = "damped_driven_oscillator"
mass = 1.0
stiffness = 4.0
damping = 0.0"#;

const DAMPED_OSCILLATOR: &str = r#"[system]
kind = "damped_driven_oscillator"
mass = 1.0
stiffness = 4.0
damping = 0.5"#;

const PENDULUM: &str = r#"[system]
kind = "pendulum_on_circle"
mass = 1.0
length = 1.0
gravity = 9.81
damping = 0.1"#;

const NO_CONTROL: &str = r#"[control]
kind = "zero""#;

const RANDOM_TORQUE: &str = r#"[control]
kind = "piecewise_constant_random"
amplitude = [0.5]
hold = 0.1
seed = 2"#;

fn lifted(cfg: &RunConfig) -> Vec<LiftedTrajectory> {
    let sys = cfg.system.build();
    generate_dataset(cfg, Exec::Parallel)
        .unwrap()
        .iter()
        .map(|g| dirac_lift(&g.trajectory, sys.as_ref()).unwrap())
        .collect()
}

/// Zero-step map.
struct Identity;

impl StepPredictor for Identity {
    fn step_flat(&self, z: &[f64], _dt: f64) -> Result<Vec<f64>> {
        Ok(z.to_vec())
    }
}

#[test]
fn central_difference_of_sine() {
    let dt = 1e-2;
    let series: Vec<f64> = (0..200).map(|k| (k as f64 * dt).sin()).collect();
    for k in 1..199 {
        let d = central_difference(&series, k, dt).unwrap();
        assert!((d - (k as f64 * dt).cos()).abs() < 2e-5, "k = {k}");
    }
}

#[test]
fn first_adam_step_is_a_sign_step() {
    let cfg = TrainConfig::default();
    let mut state = OptimizerState::new(1);
    let next = adam_step(&[0.0], &[1.0], &mut state, &cfg).unwrap();
    assert!((next[0] + cfg.learning_rate).abs() < 1e-10);
    let next = adam_step(&next, &[1.0], &mut state, &cfg).unwrap();
    assert!((next[0] + 2.0 * cfg.learning_rate).abs() < 1e-10);
}

#[test]
fn flow_matching_loss_is_quadratic_in_the_residual() {
    let data = lifted(&config(PENDULUM, RANDOM_TORQUE, 2, 40));
    let samples = flow_samples(&data, 5, LossChannels::Full, 3).unwrap();
    // The zero network predicts zero velocity, so the residual is the target.
    let psn = PsnParams::zeros(6, 4, LossChannels::Full);
    let base = flow_matching_loss(&psn, &samples, false).unwrap();
    let doubled: Vec<_> = samples
        .iter()
        .cloned()
        .map(|mut s| {
            s.target_v.iter_mut().for_each(|v| *v *= 2.0);
            s
        })
        .collect();
    let quad = flow_matching_loss(&psn, &doubled, false).unwrap();
    assert!(base > 0.0);
    assert!((quad - 4.0 * base).abs() <= 1e-12 * quad);
    let zeroed: Vec<_> = samples
        .iter()
        .cloned()
        .map(|mut s| {
            s.target_v.iter_mut().for_each(|v| *v = 0.0);
            s
        })
        .collect();
    assert_eq!(flow_matching_loss(&psn, &zeroed, true).unwrap(), 0.0);
}

#[test]
fn identity_prediction_loss_is_the_dataset_self_difference() {
    let data = lifted(&config(PENDULUM, RANDOM_TORQUE, 3, 60));
    let pairs = prediction_pairs(&data, 1);
    let mut net = SympNetParams::init(4, 4, 8, &mut psn_core::dataio::seeded_rng(3));
    net.modules
        .iter_mut()
        .for_each(|m| m.a.iter_mut().for_each(|a| *a = 0.0));
    let mut direct = 0.0;
    let mut count = 0.0;
    for t in &data {
        for k in 0..t.len() - 1 {
            let (a, b) = (t.points[k].flatten(), t.points[k + 1].flatten());
            direct += a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            count += 1.0;
        }
    }
    let loss = prediction_loss(&net, &pairs).unwrap();
    assert!((loss - direct / count).abs() <= 1e-12 * loss);

    let mut reversed: Vec<PredictionPair> = pairs.clone();
    reversed.reverse();
    let l2 = prediction_loss(&net, &reversed).unwrap();
    assert!((l2 - loss).abs() <= 1e-12 * loss);
}

#[test]
fn identity_rollout_error_is_the_self_difference() {
    let cfg = config(PENDULUM, RANDOM_TORQUE, 1, 80);
    let sys = cfg.system.build();
    let traj = &lifted(&cfg)[0];
    let (k0, horizon) = (10, 40);
    let m = evaluate_rollout(&Identity, None, traj, k0, horizon, sys.as_ref()).unwrap();
    let start = traj.points[k0].flatten();
    let shape = traj.points[0].shape();
    for i in [1, 2, shape.p0_index(), 5, 6] {
        let oracle = ((1..=horizon)
            .map(|j| (traj.points[k0 + j].flatten()[i] - start[i]).powi(2))
            .sum::<f64>()
            / horizon as f64)
            .sqrt();
        assert!(
            (m.coord_rmse[i] - oracle).abs() <= 1e-12 * (1.0 + oracle),
            "coordinate {i}"
        );
    }
    assert_eq!(m.coord_rmse[0], 0.0);
    assert!(m.constraint_drift < 1e-10);
}

#[test]
fn rollout_rejects_a_horizon_past_the_end() {
    let cfg = config(PENDULUM, NO_CONTROL, 1, 20);
    let sys = cfg.system.build();
    let traj = &lifted(&cfg)[0];
    assert!(evaluate_rollout(&Identity, None, traj, 5, 16, sys.as_ref()).is_err());
    assert!(evaluate_rollout(&Identity, None, traj, 5, 15, sys.as_ref()).is_ok());
}

#[test]
fn constant_p0_dataset_trains_to_zero_velocity() {
    let data = lifted(&config(OSCILLATOR, NO_CONTROL, 6, 40));
    let cfg = TrainConfig {
        epochs: 50,
        context: 5,
        sample_stride: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let report = train_psn(&data, 64, &cfg).unwrap();
    let best = &report.history[report.best_epoch];
    assert!(best.val_loss < 1e-6, "{best:?}");
    assert!(report
        .history
        .iter()
        .all(|m| m.train_loss.is_finite() && m.val_loss.is_finite()));
    assert_eq!(report.history.len(), 50);
}

#[test]
fn equilibrium_dataset_gives_a_near_identity_sympnet() {
    let sys = PendulumOnCircle {
        mass: 1.0,
        length: 1.0,
        gravity: 9.81,
        damping: 0.1,
    };
    let rest = PhasePoint::new(vec![0.0, -1.0], vec![0.0, 0.0], 0.0, vec![0.0]);
    let gen = generate_trajectory(&sys, &rest, &ControlSignal::Zero, 60, 0.01, 2).unwrap();
    let data: Vec<LiftedTrajectory> = (0..4)
        .map(|_| dirac_lift(&gen.trajectory, &sys).unwrap())
        .collect();
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 32,
        val_fraction: 0.25,
        ..TrainConfig::default()
    };
    let report = train_sympnet(&data, P0Source::Analytic, 4, 8, &cfg).unwrap();
    let best = &report.history[report.best_epoch];
    assert!(best.val_loss < 1e-8, "{best:?}");
}

#[test]
fn damped_oscillator_one_step_error_is_small() {
    let data = lifted(&config(DAMPED_OSCILLATOR, NO_CONTROL, 20, 100));
    let (train, val) = data.split_at(16);
    let cfg = TrainConfig {
        epochs: 60,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let report = train_sympnet(train, P0Source::Analytic, 4, 16, &cfg).unwrap();
    let pairs = prediction_pairs(val, 1);
    let (mut err, mut norm) = (0.0, 0.0);
    for p in &pairs {
        let out = report.params.step_flat(&p.z, p.dt).unwrap();
        err += out
            .iter()
            .zip(&p.target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        norm += p.target.iter().map(|b| b * b).sum::<f64>();
    }
    let rel = (err / norm).sqrt();
    assert!(rel < 0.01, "{rel}");
}

#[test]
fn training_is_deterministic_and_execution_independent() {
    let data = lifted(&config(PENDULUM, RANDOM_TORQUE, 4, 40));
    let base = TrainConfig {
        epochs: 3,
        context: 5,
        batch_size: 8,
        sample_stride: 3,
        ..TrainConfig::default()
    };
    let seq = TrainConfig {
        exec: Exec::Sequential,
        ..base.clone()
    };
    let par = TrainConfig {
        exec: Exec::Parallel,
        ..base
    };
    let a = train_psn(&data, 6, &seq).unwrap();
    let b = train_psn(&data, 6, &par).unwrap();
    let c = train_psn(&data, 6, &par).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(b.params, c.params);
    let losses = |h: &[EpochMetrics]| -> Vec<(f64, f64)> {
        h.iter().map(|m| (m.train_loss, m.val_loss)).collect()
    };
    assert_eq!(losses(&a.history), losses(&b.history));

    let s1 = train_sympnet(&data, P0Source::Analytic, 4, 8, &seq).unwrap();
    let s2 = train_sympnet(&data, P0Source::Analytic, 4, 8, &par).unwrap();
    assert_eq!(s1.params, s2.params);

    let m1 = evaluate_p0(&a.params, &data, 5, Exec::Sequential).unwrap();
    let m2 = evaluate_p0(&a.params, &data, 5, Exec::Parallel).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn frozen_encoder_is_untouched_by_sympnet_training() {
    let data = lifted(&config(PENDULUM, RANDOM_TORQUE, 3, 40));
    let cfg = TrainConfig {
        epochs: 2,
        context: 5,
        ..TrainConfig::default()
    };
    let psn = train_psn(&data, 4, &cfg).unwrap().params;
    let before = psn.to_tensors();
    let source = P0Source::Psn {
        params: &psn,
        context: 5,
    };
    train_sympnet(&data, source, 2, 4, &cfg).unwrap();
    assert_eq!(psn.to_tensors(), before);
}

#[test]
fn affine_fit_is_not_symplectic() {
    let cfg = config(PENDULUM, RANDOM_TORQUE, 4, 100);
    let data = lifted(&cfg);
    let affine = AffinePredictor::fit(&prediction_pairs(&data, 1)).unwrap();
    let points = random_points(100, 8, 10.0, 4);
    let r = symplecticity_certificate(&affine, &points, 0.01, Exec::Parallel).unwrap();
    assert!(r >= 1e-2, "{r:e}");
}

#[test]
fn reimposed_gauge_on_exact_states_is_the_lift() {
    let cfg = config(PENDULUM, RANDOM_TORQUE, 1, 30);
    let sys = cfg.system.build();
    let traj = &lifted(&cfg)[0];
    for k in 0..traj.len() {
        let z = &traj.points[k];
        let mut w = z.clone();
        w.q0 = -1.0;
        w.lambda = vec![0.0];
        psn_core::training::reimpose_gauge(&mut w, traj.time(k), sys.as_ref(), &traj.controls[k])
            .unwrap();
        let lifted = lift_point(sys.as_ref(), &z.q, &z.p, traj.time(k), &traj.controls[k]).unwrap();
        assert_eq!(w.lambda, lifted.lambda);
        assert_eq!(w.q0, z.q0);
        assert_eq!(sys.n_constraints(), 1);
    }
}
