//! Constrained, dissipative, controlled mechanical systems in momentum form.
//!
//! The equations of motion are
//!
//! ```text
//! dq/dt = M(q)⁻¹ p
//! dp/dt = -∂V/∂q - D(q) M⁻¹p + B(q) u + J_c(q)ᵀ λ
//! ```
//!
//! with the multipliers `λ` eliminated so that `d²φ/dt² = 0` along the flow.
//! The velocity-product term `C(q, q̇)` is identically zero for the Cartesian
//! benchmark systems shipped here; [`MechanicalSystem::coriolis`] exists so
//! that systems in curvilinear coordinates can supply it.

mod benchmarks;
mod control;

pub use benchmarks::{DampedDrivenOscillator, PendulumOnCircle, SystemSpec, TwoLinkPinned};
pub use control::ControlSignal;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub trait MechanicalSystem: Send + Sync {
    fn name(&self) -> &'static str;
    fn n_q(&self) -> usize;
    fn n_p(&self) -> usize;
    fn n_u(&self) -> usize;
    /// Number of holonomic constraints.
    fn n_constraints(&self) -> usize;

    fn mass_matrix(&self, q: &[f64]) -> DMatrix<f64>;
    fn potential(&self, q: &[f64]) -> f64;
    fn potential_gradient(&self, q: &[f64]) -> DVector<f64>;
    fn damping_matrix(&self, q: &[f64]) -> DMatrix<f64>;
    /// `B(q)`, shape `n_p × n_u`.
    fn input_matrix(&self, q: &[f64]) -> DMatrix<f64>;
    fn constraints(&self, q: &[f64]) -> DVector<f64>;
    /// `J_c = ∂φ/∂q`, shape `m × n_q`.
    fn constraint_jacobian(&self, q: &[f64]) -> DMatrix<f64>;

    /// `(dJ_c/dt) q̇`. The default differentiates `J_c` along `q̇` by central differences.
    fn constraint_curvature(&self, q: &[f64], qdot: &[f64]) -> DVector<f64> {
        let h = 1e-6;
        let plus: Vec<f64> = q.iter().zip(qdot).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = q.iter().zip(qdot).map(|(a, b)| a - h * b).collect();
        let dj = (self.constraint_jacobian(&plus) - self.constraint_jacobian(&minus)) / (2.0 * h);
        dj * DVector::from_column_slice(qdot)
    }

    fn coriolis(&self, _q: &[f64], _qdot: &[f64]) -> DVector<f64> {
        DVector::zeros(self.n_p())
    }

    /// Maps minimal coordinates (angles/displacements and their rates) to a
    /// feasible phase-space point. Used for sampling initial conditions.
    fn state_from_minimal(&self, coords: &[f64], rates: &[f64]) -> (Vec<f64>, Vec<f64>);

    /// Number of minimal coordinates accepted by [`Self::state_from_minimal`].
    fn n_minimal(&self) -> usize;
}

fn check_len(what: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Dimension(format!(
            "{what}: expected {n}, got {}",
            v.len()
        )));
    }
    Ok(())
}

pub(crate) fn check_state(sys: &dyn MechanicalSystem, q: &[f64], p: &[f64]) -> Result<()> {
    check_len("q", q, sys.n_q())?;
    check_len("p", p, sys.n_p())
}

/// `M(q)⁻¹ v` through a Cholesky factorisation.
pub fn solve_mass(sys: &dyn MechanicalSystem, q: &[f64], v: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = sys.mass_matrix(q).cholesky().ok_or(Error::SingularMass)?;
    Ok(chol.solve(v))
}

/// Generalised velocity `q̇ = M(q)⁻¹ p`.
pub fn velocity(sys: &dyn MechanicalSystem, q: &[f64], p: &[f64]) -> Result<DVector<f64>> {
    solve_mass(sys, q, &DVector::from_column_slice(p))
}

/// `H(q, p) = ½ pᵀ M(q)⁻¹ p + V(q)`. Defined off the constraint manifold too.
pub fn hamiltonian(sys: &dyn MechanicalSystem, q: &[f64], p: &[f64]) -> Result<f64> {
    check_state(sys, q, p)?;
    let qdot = velocity(sys, q, p)?;
    let kinetic = 0.5 * qdot.dot(&DVector::from_column_slice(p));
    Ok(kinetic + sys.potential(q))
}

/// Solves the symmetric positive-definite Gram system `(J M⁻¹ Jᵀ) x = rhs`.
///
/// A Gram matrix whose smallest eigenvalue falls below `1e-12` times its largest
/// is reported as singular; no pseudo-inverse is substituted.
pub(crate) fn solve_gram(
    sys: &dyn MechanicalSystem,
    q: &[f64],
    jac: &DMatrix<f64>,
    rhs: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = jac.nrows();
    if m == 0 {
        return Ok(DVector::zeros(0));
    }
    let chol_m = sys.mass_matrix(q).cholesky().ok_or(Error::SingularMass)?;
    let minv_jt = chol_m.solve(&jac.transpose());
    let gram = jac * &minv_jt;
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if !(max > 0.0) || !(min > 1e-12 * max) {
        return Err(Error::SingularGram {
            step: None,
            detail: format!("eigenvalues in [{min:.3e}, {max:.3e}]"),
        });
    }
    gram.cholesky()
        .map(|c| c.solve(rhs))
        .ok_or_else(|| Error::SingularGram {
            step: None,
            detail: "Cholesky factorisation failed".into(),
        })
}

/// Generalised force excluding constraint reactions: `B u - ∂V/∂q - D q̇ - C(q, q̇)`.
fn applied_force(
    sys: &dyn MechanicalSystem,
    q: &[f64],
    qdot: &DVector<f64>,
    u: &[f64],
) -> DVector<f64> {
    let bu = sys.input_matrix(q) * DVector::from_column_slice(u);
    bu - sys.potential_gradient(q) - sys.damping_matrix(q) * qdot - sys.coriolis(q, qdot.as_slice())
}

/// Lagrange multipliers that keep `d²φ/dt² = 0`:
/// `(J M⁻¹ Jᵀ) λ = -J M⁻¹ f - (dJ/dt) q̇`.
pub fn constraint_multipliers(
    sys: &dyn MechanicalSystem,
    q: &[f64],
    p: &[f64],
    u: &[f64],
) -> Result<DVector<f64>> {
    check_state(sys, q, p)?;
    check_len("u", u, sys.n_u())?;
    if sys.n_constraints() == 0 {
        return Ok(DVector::zeros(0));
    }
    let qdot = velocity(sys, q, p)?;
    let f = applied_force(sys, q, &qdot, u);
    let jac = sys.constraint_jacobian(q);
    let minv_f = solve_mass(sys, q, &f)?;
    let rhs = -(&jac * minv_f) - sys.constraint_curvature(q, qdot.as_slice());
    solve_gram(sys, q, &jac, &rhs)
}

/// Right-hand side of the constrained equations of motion, `(dq/dt, dp/dt)`.
pub fn dynamics_rhs(
    sys: &dyn MechanicalSystem,
    q: &[f64],
    p: &[f64],
    _t: f64,
    u: &[f64],
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_state(sys, q, p)?;
    check_len("u", u, sys.n_u())?;
    let qdot = velocity(sys, q, p)?;
    let mut dp = applied_force(sys, q, &qdot, u);
    if sys.n_constraints() > 0 {
        let lambda = constraint_multipliers(sys, q, p, u)?;
        dp += sys.constraint_jacobian(q).transpose() * lambda;
    }
    Ok((qdot, dp))
}

/// Control power `uᵀBᵀq̇` and dissipated power `q̇ᵀDq̇` (both in watts).
pub fn nonconservative_power(
    sys: &dyn MechanicalSystem,
    q: &[f64],
    p: &[f64],
    u: &[f64],
) -> Result<(f64, f64)> {
    check_state(sys, q, p)?;
    check_len("u", u, sys.n_u())?;
    let qdot = velocity(sys, q, p)?;
    let ctrl = (sys.input_matrix(q).transpose() * &qdot).dot(&DVector::from_column_slice(u));
    let diss = qdot.dot(&(sys.damping_matrix(q) * &qdot));
    Ok((ctrl, diss))
}
