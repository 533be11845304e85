use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use psn_core::dataio::seeded_rng;
use psn_core::geometry::{canonical_form, fd_jacobian};
use psn_core::integrators::MidpointSolver;
use psn_core::nets::{
    encoder_forward, low_module, psn_step, recurrent_step, sympnet_inverse, sympnet_step_flat,
    up_module, CanonicalScaling, LossChannels, Model, PsnParams, RecurrentCellParams,
    SympNetParams,
};
use psn_core::tensor::{max_abs_diff, Mat};
use psn_core::training::{FlowMatchSample, PredictionPair};
use psn_core::verify::{
    flow_matching_gradient_error, prediction_gradient_error, random_points,
    symplecticity_certificate, volume_defect,
};
use rand::Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Entry-by-entry gated recurrent update, written without any shared helpers.
fn gru_oracle(c: &RecurrentCellParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let (nh, nx) = (h.len(), x.len());
    let mut r = vec![0.0; nh];
    let mut z = vec![0.0; nh];
    for i in 0..nh {
        let (mut sz, mut sr) = (c.b_z[i], c.b_r[i]);
        for j in 0..nx {
            sz += c.w_z.get(i, j) * x[j];
            sr += c.w_r.get(i, j) * x[j];
        }
        for j in 0..nh {
            sz += c.u_z.get(i, j) * h[j];
            sr += c.u_r.get(i, j) * h[j];
        }
        z[i] = sigmoid(sz);
        r[i] = sigmoid(sr);
    }
    (0..nh)
        .map(|i| {
            let mut s = c.b_h[i];
            for j in 0..nx {
                s += c.w_h.get(i, j) * x[j];
            }
            for j in 0..nh {
                s += c.u_h.get(i, j) * r[j] * h[j];
            }
            (1.0 - z[i]) * h[i] + z[i] * s.tanh()
        })
        .collect()
}

#[test]
fn recurrent_cell_matches_scalar_oracle() {
    let mut rng = seeded_rng(31);
    let mut cell = RecurrentCellParams::init(3, 4, &mut rng);
    cell.b_z = vec![0.1, -0.2, 0.3, 0.0];
    cell.b_h = vec![-0.4, 0.2, 0.0, 0.5];
    let x = [0.7, -1.1, 0.25];
    let h = [0.3, -0.6, 0.9, -0.05];
    let got = recurrent_step(&cell, &x, &h).unwrap();
    assert!(max_abs_diff(&got, &gru_oracle(&cell, &x, &h)) < 1e-14);
}

#[test]
fn stacked_encoder_matches_scalar_oracle() {
    let mut rng = seeded_rng(32);
    let mut psn = PsnParams::init(4, 3, LossChannels::Full, &mut rng);
    psn.head_b = vec![0.1, -0.1, 0.2, 0.0];
    let context: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let (v, _) = encoder_forward(&psn, &context, None).unwrap();

    let mut hs = vec![vec![0.0; 3]; 3];
    for x in &context[..4] {
        let mut input = x.clone();
        for (layer, h) in psn.cells.iter().zip(hs.iter_mut()) {
            *h = gru_oracle(layer, &input, h);
            input = h.clone();
        }
    }
    let zt = &context[4];
    let expected: Vec<f64> = (0..4)
        .map(|i| {
            let mut s = psn.head_b[i];
            for j in 0..4 {
                s += psn.head_w1.get(i, j) * zt[j];
            }
            for j in 0..3 {
                s += psn.head_w2.get(i, j) * hs[2][j];
            }
            psn.head_mask[i] * s
        })
        .collect();
    assert!(max_abs_diff(&v, &expected) < 1e-14);
}

#[test]
fn skew_linear_head_gives_the_cayley_step() {
    let mut psn = PsnParams::zeros(4, 2, LossChannels::Full);
    let a = [
        [0.0, 1.0, -0.5, 0.2],
        [-1.0, 0.0, 0.3, 0.0],
        [0.5, -0.3, 0.0, 0.8],
        [-0.2, 0.0, -0.8, 0.0],
    ];
    psn.head_w1 = Mat::from_rows(4, 4, a.iter().flatten().copied().collect());
    let context = vec![vec![0.0; 4]; 3];
    let z = [0.4, -0.2, 1.0, 0.3];
    let dt = 0.1;
    let out = psn_step(&psn, &context, &z, dt, MidpointSolver::default()).unwrap();
    let am = DMatrix::from_fn(4, 4, |i, j| a[i][j]);
    let eye = DMatrix::<f64>::identity(4, 4);
    let cayley = (&eye - &am * (0.5 * dt)).try_inverse().unwrap() * (&eye + &am * (0.5 * dt));
    let expected = cayley * DVector::from_column_slice(&z);
    assert!(max_abs_diff(&out, expected.as_slice()) < 1e-12);
}

fn module_residual(f: impl Fn(&[f64]) -> Vec<f64>, z: &[f64]) -> f64 {
    let jac = fd_jacobian(|x| Ok(f(x)), z, 1e-5).unwrap();
    let form = canonical_form(z.len() / 2);
    form.pullback_defect(&form, &jac)
}

#[test]
fn single_modules_and_compositions_are_symplectic() {
    let mut rng = seeded_rng(33);
    let k1 = Mat::uniform_fan_in(5, 3, &mut rng);
    let k2 = Mat::uniform_fan_in(5, 3, &mut rng);
    let k3 = Mat::uniform_fan_in(5, 3, &mut rng);
    let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let up = |k: &Mat, z: &[f64]| {
        let (q, p) = up_module(&z[..3], &z[3..], k, &a, &b).unwrap();
        [q, p].concat()
    };
    let low = |k: &Mat, z: &[f64]| {
        let (q, p) = low_module(&z[..3], &z[3..], k, &a, &b).unwrap();
        [q, p].concat()
    };
    for z in random_points(100, 6, 3.0, 34) {
        assert!(module_residual(|x| up(&k1, x), &z) <= 1e-6);
        assert!(module_residual(|x| low(&k1, x), &z) <= 1e-6);
        let composed = |x: &[f64]| up(&k3, &low(&k2, &up(&k1, x)));
        assert!(module_residual(composed, &z) <= 1e-6);
    }
}

fn lifted_net(seed: u64) -> SympNetParams {
    let mut rng = seeded_rng(seed);
    SympNetParams::init(4, 6, 32, &mut rng).with_scaling(CanonicalScaling {
        shift: vec![2.5, 0.0, -0.6, -12.0, -1.0, 0.0, 0.0, 0.0],
        scale: vec![1.4, 0.4, 0.1, 2.3],
        kappa: 0.35,
    })
}

#[test]
fn full_map_is_symplectic_and_volume_preserving() {
    let net = lifted_net(35);
    let points = random_points(100, 8, 10.0, 36);
    let r = symplecticity_certificate(&net, &points, 0.01, psn_core::Exec::Parallel).unwrap();
    assert!(r <= 1e-5, "{r:e}");
    let vol = volume_defect(&net, &points[..20], 0.01).unwrap();
    assert!(vol <= 1e-6, "{vol:e}");
}

#[test]
fn flow_matching_gradients_match_finite_differences() {
    let mut rng = seeded_rng(37);
    for channels in [LossChannels::P0Only, LossChannels::Full] {
        let psn = PsnParams::init(6, 3, channels, &mut rng);
        assert!(psn.n_params() <= 500);
        let batch: Vec<FlowMatchSample> = (0..2)
            .map(|_| FlowMatchSample {
                context: (0..4)
                    .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
                target_v: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                target_p0: 0.0,
                dt: 0.01,
            })
            .collect();
        for through_midpoint in [false, true] {
            let err = flow_matching_gradient_error(&psn, &batch, through_midpoint).unwrap();
            assert!(
                err <= 1e-4,
                "{channels:?} midpoint={through_midpoint}: {err:e}"
            );
        }
    }
}

#[test]
fn prediction_gradients_match_finite_differences() {
    let mut rng = seeded_rng(38);
    let net = SympNetParams::init(4, 4, 6, &mut rng);
    assert!(net.n_params() <= 500);
    let pairs: Vec<PredictionPair> = (0..3)
        .map(|_| PredictionPair {
            z: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            target: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            dt: 0.05,
        })
        .collect();
    let err = prediction_gradient_error(&net, &pairs).unwrap();
    assert!(err <= 1e-4, "{err:e}");
    let scaled = SympNetParams {
        scaling: lifted_net(1).scaling,
        ..net
    };
    let err = prediction_gradient_error(&scaled, &pairs).unwrap();
    assert!(err <= 1e-4, "scaled: {err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sympnet_inverse_recovers_input(
        seed in 0u64..1000,
        z in prop::collection::vec(-10.0f64..10.0, 8),
        dt in 0.001f64..0.5,
    ) {
        let net = lifted_net(seed);
        let fwd = sympnet_step_flat(&net, &z, dt).unwrap();
        let back = sympnet_inverse(&net, &fwd, dt).unwrap();
        prop_assert!(max_abs_diff(&back, &z) <= 1e-10);
    }

    #[test]
    fn psn_flat_round_trip(seed in 0u64..1000, hidden in 1usize..6) {
        let psn = PsnParams::init(6, hidden, LossChannels::P0Only, &mut seeded_rng(seed));
        prop_assert_eq!(psn.with_flat(&psn.to_flat()), psn.clone());
        prop_assert_eq!(PsnParams::from_tensors(&psn.to_tensors()).unwrap(), psn);
    }
}
