//! Reference data generation (RK4 with manifold projection) and the implicit
//! midpoint step.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::geometry::{LiftedPoint, PhasePoint};
use crate::systems::{self, ControlSignal, MechanicalSystem};
use crate::tensor::{all_finite, norm};

/// Trajectory bookkeeping shared by raw and lifted trajectories.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrajectoryMeta {
    pub id: u64,
    pub seed: u64,
}

/// Uniformly sampled physical trajectory; `states[k].t == t0 + k·dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<PhasePoint>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn controls(&self) -> impl Iterator<Item = &[f64]> {
        self.states.iter().map(|s| s.u.as_slice())
    }

    /// Largest `|t_k - (t_0 + k·dt)|`.
    pub fn grid_error(&self) -> f64 {
        let t0 = self.states.first().map_or(0.0, |s| s.t);
        self.states
            .iter()
            .enumerate()
            .map(|(k, s)| (s.t - (t0 + k as f64 * self.dt)).abs())
            .fold(0.0, f64::max)
    }
}

/// Lifted counterpart of a [`Trajectory`], with the auxiliary work channels.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedTrajectory {
    pub dt: f64,
    pub points: Vec<LiftedPoint>,
    /// Control held over `[t_k, t_k + dt)`.
    pub controls: Vec<Vec<f64>>,
    /// `-∫ uᵀBᵀq̇ dτ`.
    pub p_ctrl: Vec<f64>,
    /// `-∫ q̇ᵀDq̇ dτ`.
    pub p_diss: Vec<f64>,
    pub meta: TrajectoryMeta,
}

impl LiftedTrajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.points[k].q0
    }
}

/// Result of [`generate_trajectory`]: the sampled trajectory plus the work
/// integrals accumulated by the reference integrator at every sample.
#[derive(Clone, Debug)]
pub struct GeneratedTrajectory {
    pub trajectory: Trajectory,
    pub work_ctrl: Vec<f64>,
    pub work_diss: Vec<f64>,
    pub energy: Vec<f64>,
}

impl GeneratedTrajectory {
    /// `max_k |H(t_k) - H(0) - (W_ctrl(t_k) - W_diss(t_k))|`.
    pub fn bookkeeping_residual(&self) -> f64 {
        let h0 = self.energy.first().copied().unwrap_or(0.0);
        self.energy
            .iter()
            .zip(self.work_ctrl.iter().zip(&self.work_diss))
            .map(|(h, (wc, wd))| (h - h0 - (wc - wd)).abs())
            .fold(0.0, f64::max)
    }
}

/// One classical Runge–Kutta step of `ż = f(t, z)`.
pub fn rk4_step<F>(f: F, z: &[f64], t: f64, dt: f64) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> Result<Vec<f64>>,
{
    let stage = |v: Vec<f64>, which: &str| -> Result<Vec<f64>> {
        if all_finite(&v) {
            Ok(v)
        } else {
            Err(Error::non_finite(format!("RK4 stage {which}")))
        }
    };
    let shifted =
        |k: &[f64], h: f64| -> Vec<f64> { z.iter().zip(k).map(|(a, b)| a + h * b).collect() };
    let k1 = stage(f(t, z)?, "k1")?;
    let k2 = stage(f(t + 0.5 * dt, &shifted(&k1, 0.5 * dt))?, "k2")?;
    let k3 = stage(f(t + 0.5 * dt, &shifted(&k2, 0.5 * dt))?, "k3")?;
    let k4 = stage(f(t + dt, &shifted(&k3, dt))?, "k4")?;
    Ok((0..z.len())
        .map(|i| z[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

const PROJECTION_MAX_ITER: usize = 20;
const PROJECTION_TOL: f64 = 1e-12;

/// Projects `(q, p)` onto `φ(q) = 0`, `J_c M⁻¹ p = 0`.
///
/// Positions use minimum-norm Gauss–Newton steps; momenta are corrected by
/// `p' = p - J_cᵀ μ` with `(J_c M⁻¹ J_cᵀ) μ = J_c M⁻¹ p`.
pub fn project_to_manifold(
    sys: &dyn MechanicalSystem,
    q: &[f64],
    p: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    systems::check_state(sys, q, p)?;
    if sys.n_constraints() == 0 {
        return Ok((q.to_vec(), p.to_vec()));
    }
    let mut q = DVector::from_column_slice(q);
    let tol = PROJECTION_TOL * q.norm_squared().max(1.0);
    let mut converged = false;
    for _ in 0..=PROJECTION_MAX_ITER {
        let phi = sys.constraints(q.as_slice());
        if phi.amax() <= tol {
            converged = true;
            break;
        }
        let jac = sys.constraint_jacobian(q.as_slice());
        let gram = &jac * jac.transpose();
        let step = gram
            .cholesky()
            .map(|c| c.solve(&phi))
            .ok_or_else(|| Error::Projection {
                residual: phi.amax(),
                step: None,
                detail: "constraint Jacobian lost rank".into(),
            })?;
        q -= jac.transpose() * step;
    }
    let residual = sys.constraints(q.as_slice()).amax();
    if !converged || !residual.is_finite() {
        return Err(Error::Projection {
            residual,
            step: None,
            detail: format!(
                "Gauss-Newton did not reach tolerance in {PROJECTION_MAX_ITER} iterations"
            ),
        });
    }
    let jac = sys.constraint_jacobian(q.as_slice());
    let p = DVector::from_column_slice(p);
    let minv_p = systems::solve_mass(sys, q.as_slice(), &p)?;
    let mu = systems::solve_gram(sys, q.as_slice(), &jac, &(&jac * minv_p))?;
    let p = p - jac.transpose() * mu;
    Ok((q.as_slice().to_vec(), p.as_slice().to_vec()))
}

/// Constraint residuals `(max|φ|, max|J_c M⁻¹ p|)`.
pub fn manifold_residual(sys: &dyn MechanicalSystem, q: &[f64], p: &[f64]) -> Result<(f64, f64)> {
    if sys.n_constraints() == 0 {
        return Ok((0.0, 0.0));
    }
    let phi = sys.constraints(q).amax();
    let vel = sys.constraint_jacobian(q) * systems::velocity(sys, q, p)?;
    Ok((phi, vel.amax()))
}

/// Feasibility tolerance for initial states and emitted samples.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Integrates `n_steps` samples of spacing `dt`, each made of `substeps` RK4
/// steps followed by a projection. The control is sampled at the start of each
/// data step and held (zero-order hold). Work integrals are carried as two
/// extra RK4 states.
pub fn generate_trajectory(
    sys: &dyn MechanicalSystem,
    x0: &PhasePoint,
    ctrl: &ControlSignal,
    n_steps: usize,
    dt: f64,
    substeps: usize,
) -> Result<GeneratedTrajectory> {
    systems::check_state(sys, &x0.q, &x0.p)?;
    if !(dt > 0.0) || substeps == 0 {
        return Err(Error::Invalid(format!("dt = {dt}, substeps = {substeps}")));
    }
    let (phi, vel) = manifold_residual(sys, &x0.q, &x0.p)?;
    if phi > FEASIBILITY_TOL || vel > FEASIBILITY_TOL {
        return Err(Error::Projection {
            residual: phi.max(vel),
            step: Some(0),
            detail: format!("initial state infeasible: |phi| = {phi:.3e}, |J M^-1 p| = {vel:.3e}"),
        });
    }
    let (n_q, n_p, n_u) = (sys.n_q(), sys.n_p(), sys.n_u());
    let h = dt / substeps as f64;
    let t0 = x0.t;

    let mut states = Vec::with_capacity(n_steps + 1);
    let mut work_ctrl = Vec::with_capacity(n_steps + 1);
    let mut work_diss = Vec::with_capacity(n_steps + 1);
    let mut energy = Vec::with_capacity(n_steps + 1);

    let mut z: Vec<f64> =
        x0.q.iter()
            .chain(&x0.p)
            .copied()
            .chain([0.0, 0.0])
            .collect();
    for k in 0..=n_steps {
        let t = t0 + k as f64 * dt;
        let u = ctrl.eval(t, n_u);
        let (q, p) = (&z[..n_q], &z[n_q..n_q + n_p]);
        if !all_finite(&z) {
            return Err(Error::non_finite("state").at_step(k));
        }
        energy.push(systems::hamiltonian(sys, q, p)?);
        states.push(PhasePoint {
            q: q.to_vec(),
            p: p.to_vec(),
            t,
            u: u.clone(),
        });
        work_ctrl.push(z[n_q + n_p]);
        work_diss.push(z[n_q + n_p + 1]);
        if k == n_steps {
            break;
        }
        for s in 0..substeps {
            let rhs = |tau: f64, y: &[f64]| -> Result<Vec<f64>> {
                let (q, p) = (&y[..n_q], &y[n_q..n_q + n_p]);
                let (dq, dp) = systems::dynamics_rhs(sys, q, p, tau, &u)?;
                let (pc, pd) = systems::nonconservative_power(sys, q, p, &u)?;
                Ok(dq
                    .iter()
                    .chain(dp.iter())
                    .copied()
                    .chain([pc, pd])
                    .collect())
            };
            let next = rk4_step(rhs, &z, t + s as f64 * h, h).map_err(|e| e.at_step(k))?;
            let (q, p) = project_to_manifold(sys, &next[..n_q], &next[n_q..n_q + n_p])
                .map_err(|e| e.at_step(k))?;
            z = q
                .into_iter()
                .chain(p)
                .chain([next[n_q + n_p], next[n_q + n_p + 1]])
                .collect();
        }
    }
    Ok(GeneratedTrajectory {
        trajectory: Trajectory {
            dt,
            states,
            meta: TrajectoryMeta::default(),
        },
        work_ctrl,
        work_diss,
        energy,
    })
}

/// Fixed-point solver settings for [`implicit_midpoint_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MidpointSolver {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MidpointSolver {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

impl MidpointSolver {
    /// Relaxation used at fixed-point iteration `iter`.
    pub fn damping(&self, iter: usize) -> f64 {
        if iter < self.max_iter / 2 {
            1.0
        } else {
            0.5
        }
    }

    pub fn converged(&self, update: f64, z_norm: f64) -> bool {
        update <= self.tol * (1.0 + z_norm)
    }
}

/// Solves `z' = z + dt·v((z + z')/2, t + dt/2)` by relaxed fixed-point iteration,
/// followed by one plain sweep once the update is below tolerance.
///
/// Converges when `dt·Lip(v) < 1`.
pub fn implicit_midpoint_step<V>(
    mut v: V,
    z: &[f64],
    t: f64,
    dt: f64,
    solver: MidpointSolver,
) -> Result<Vec<f64>>
where
    V: FnMut(&[f64], f64) -> Vec<f64>,
{
    let z_norm = norm(z);
    let t_mid = t + 0.5 * dt;
    let mut next = z.to_vec();
    let mut mid = vec![0.0; z.len()];
    let mut residual = f64::INFINITY;
    for iter in 0..solver.max_iter {
        for i in 0..z.len() {
            mid[i] = 0.5 * (z[i] + next[i]);
        }
        let vel = v(&mid, t_mid);
        if vel.len() != z.len() {
            return Err(Error::Dimension(format!(
                "velocity has {} entries, state has {}",
                vel.len(),
                z.len()
            )));
        }
        let omega = solver.damping(iter);
        let mut update_sq = 0.0;
        for i in 0..z.len() {
            let delta = omega * (z[i] + dt * vel[i] - next[i]);
            next[i] += delta;
            update_sq += delta * delta;
        }
        residual = update_sq.sqrt();
        if !residual.is_finite() {
            break;
        }
        if solver.converged(residual, z_norm) {
            // One more full sweep shrinks the remaining error by the contraction
            // factor; it keeps long rollouts from accumulating the tolerance.
            for i in 0..z.len() {
                mid[i] = 0.5 * (z[i] + next[i]);
            }
            let vel = v(&mid, t_mid);
            for i in 0..z.len() {
                next[i] = z[i] + dt * vel[i];
            }
            return Ok(next);
        }
    }
    Err(Error::NoConvergence {
        residual,
        iterations: solver.max_iter,
        step: None,
    })
}

/// `n` successive midpoint steps from `z0`; returns all `n + 1` states.
pub fn midpoint_rollout<V>(
    mut v: V,
    z0: &[f64],
    t0: f64,
    n: usize,
    dt: f64,
    solver: MidpointSolver,
) -> Result<Vec<Vec<f64>>>
where
    V: FnMut(&[f64], f64) -> Vec<f64>,
{
    let mut out = Vec::with_capacity(n + 1);
    out.push(z0.to_vec());
    for k in 0..n {
        let t = t0 + k as f64 * dt;
        let next =
            implicit_midpoint_step(&mut v, &out[k], t, dt, solver).map_err(|e| e.at_step(k))?;
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{DampedDrivenOscillator, PendulumOnCircle};

    fn rotation(z: &[f64]) -> Vec<f64> {
        vec![z[1], -z[0]]
    }

    #[test]
    fn rk4_zero_field_is_identity() {
        let z = [1.0, -2.0, 3.5];
        let out = rk4_step(|_, z| Ok(vec![0.0; z.len()]), &z, 0.0, 0.3).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn rk4_exponential_matches_truncated_series() {
        // One RK4 step of ż = z equals the degree-4 Taylor polynomial of exp(dt).
        let h: f64 = 0.1;
        let oracle = 1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0;
        let out = rk4_step(|_, z| Ok(z.to_vec()), &[1.0], 0.0, h).unwrap();
        assert!((out[0] - oracle).abs() < 1e-15);
        assert!((oracle - 1.105_170_833_333_333_3).abs() < 1e-15);
    }

    #[test]
    fn rk4_nonfinite_stage_is_reported() {
        let err = rk4_step(|_, _| Ok(vec![f64::NAN]), &[0.0], 0.0, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn midpoint_trivial_cases() {
        let z = [0.3, -0.4];
        let s = MidpointSolver::default();
        assert_eq!(
            implicit_midpoint_step(|z, _| vec![0.0; z.len()], &z, 0.0, 0.1, s).unwrap(),
            z
        );
        assert_eq!(
            implicit_midpoint_step(|z, _| rotation(z), &z, 0.0, 0.0, s).unwrap(),
            z
        );
    }

    #[test]
    fn midpoint_reports_divergence() {
        let s = MidpointSolver::default();
        let err =
            implicit_midpoint_step(|z, _| vec![50.0 * z[0]], &[1.0], 0.0, 1.0, s).unwrap_err();
        assert!(
            matches!(err, Error::NoConvergence { iterations: 50, .. }),
            "{err}"
        );
    }

    #[test]
    fn constant_field_rollout_is_exact() {
        let c = [0.5, -1.0];
        let out = midpoint_rollout(
            |_, _| c.to_vec(),
            &[0.0, 0.0],
            0.0,
            8,
            0.25,
            MidpointSolver::default(),
        )
        .unwrap();
        for (k, z) in out.iter().enumerate() {
            let t = k as f64 * 0.25;
            assert_eq!(z, &vec![t * c[0], t * c[1]]);
        }
    }

    #[test]
    fn midpoint_is_time_symmetric() {
        let s = MidpointSolver::default();
        let f = |z: &[f64], _t: f64| vec![z[1], -z[0].sin()];
        let z0 = [0.9, 0.2];
        let fwd = implicit_midpoint_step(f, &z0, 0.0, 0.05, s).unwrap();
        let back = implicit_midpoint_step(f, &fwd, 0.05, -0.05, s).unwrap();
        for i in 0..2 {
            assert!((back[i] - z0[i]).abs() <= 10.0 * s.tol);
        }
    }

    #[test]
    fn projection_fixed_point_and_radial_case() {
        let sys = PendulumOnCircle {
            mass: 1.0,
            length: 2.0,
            gravity: 9.81,
            damping: 0.0,
        };
        let (q, p) = sys.state_from_minimal(&[0.4], &[1.3]);
        let (q2, p2) = project_to_manifold(&sys, &q, &p).unwrap();
        for i in 0..2 {
            assert!((q2[i] - q[i]).abs() < 1e-12 && (p2[i] - p[i]).abs() < 1e-12);
        }
        let scaled: Vec<f64> = q.iter().map(|x| 1.1 * x).collect();
        let (q3, p3) = project_to_manifold(&sys, &scaled, &[0.7, 0.3]).unwrap();
        for i in 0..2 {
            assert!((q3[i] - q[i]).abs() < 1e-12, "radial projection");
        }
        let (phi, vel) = manifold_residual(&sys, &q3, &p3).unwrap();
        assert!(phi <= 1e-10 && vel <= 1e-10);
    }

    #[test]
    fn projection_failure_reports_residual() {
        let sys = PendulumOnCircle {
            mass: 1.0,
            length: 1.0,
            gravity: 1.0,
            damping: 0.0,
        };
        let err = project_to_manifold(&sys, &[0.0, 0.0], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Projection { .. }), "{err}");
    }

    #[test]
    fn equilibrium_trajectory_stays_at_rest() {
        let sys = DampedDrivenOscillator {
            mass: 1.0,
            stiffness: 1.0,
            damping: 0.2,
        };
        let x0 = PhasePoint::new(vec![0.0], vec![0.0], 0.0, vec![0.0]);
        let g = generate_trajectory(&sys, &x0, &ControlSignal::Zero, 50, 0.01, 2).unwrap();
        assert_eq!(g.trajectory.len(), 51);
        assert!(g
            .trajectory
            .states
            .iter()
            .all(|s| s.q[0] == 0.0 && s.p[0] == 0.0));
        assert_eq!(g.trajectory.grid_error(), 0.0);
    }

    #[test]
    fn infeasible_initial_state_is_rejected() {
        let sys = PendulumOnCircle {
            mass: 1.0,
            length: 1.0,
            gravity: 9.81,
            damping: 0.0,
        };
        let x0 = PhasePoint::new(vec![0.5, 0.0], vec![0.0, 0.0], 0.0, vec![0.0]);
        let err = generate_trajectory(&sys, &x0, &ControlSignal::Zero, 10, 0.01, 1).unwrap_err();
        assert!(
            matches!(err, Error::Projection { step: Some(0), .. }),
            "{err}"
        );
    }
}
