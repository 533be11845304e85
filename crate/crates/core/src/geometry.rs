//! Extended phase space, its canonical symplectic form, the Dirac gauge and
//! the analytic lift, plus the pullback and isotropy predicates.
//!
//! Lifted states are flattened in the fixed order `(q0, q, λ, p0, p, π)`:
//! all position-like coordinates first, then their conjugate momenta in the
//! same order. [`CanonicalForm`] is built for exactly that ordering.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::integrators::{LiftedTrajectory, Trajectory};
use crate::systems::{self, MechanicalSystem};

#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub t: f64,
    pub u: Vec<f64>,
}

impl PhasePoint {
    pub fn new(q: Vec<f64>, p: Vec<f64>, t: f64, u: Vec<f64>) -> Self {
        Self { q, p, t, u }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self
                .q
                .iter()
                .chain(&self.p)
                .chain(&self.u)
                .all(|v| v.is_finite())
    }
}

/// Point `(q0, q, λ; p0, p, π)` of the symplectified space.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedPoint {
    pub q0: f64,
    pub q: Vec<f64>,
    pub lambda: Vec<f64>,
    pub p0: f64,
    pub p: Vec<f64>,
    pub pi: Vec<f64>,
}

/// Shape of a lifted point: `(n_q, n_p, m)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LiftedShape {
    pub n_q: usize,
    pub n_p: usize,
    pub m: usize,
}

impl LiftedShape {
    pub fn of(sys: &dyn MechanicalSystem) -> Self {
        Self {
            n_q: sys.n_q(),
            n_p: sys.n_p(),
            m: sys.n_constraints(),
        }
    }

    pub fn dim(&self) -> usize {
        lifted_dimension(self.n_q, self.n_p, self.m)
    }

    /// Number of position-like coordinates, `1 + n_q + m`.
    pub fn positions(&self) -> usize {
        1 + self.n_q + self.m
    }

    /// Flat index of `p0`.
    pub fn p0_index(&self) -> usize {
        1 + self.n_q + self.m
    }
}

impl LiftedPoint {
    pub fn shape(&self) -> LiftedShape {
        LiftedShape {
            n_q: self.q.len(),
            n_p: self.p.len(),
            m: self.lambda.len(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.shape().dim());
        out.push(self.q0);
        out.extend(&self.q);
        out.extend(&self.lambda);
        out.push(self.p0);
        out.extend(&self.p);
        out.extend(&self.pi);
        out
    }

    pub fn from_flat(z: &[f64], shape: LiftedShape) -> Result<Self> {
        if z.len() != shape.dim() {
            return Err(Error::Dimension(format!(
                "lifted vector has {} entries, shape needs {}",
                z.len(),
                shape.dim()
            )));
        }
        let LiftedShape { n_q, n_p, m } = shape;
        let mut it = z.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let q0 = take(1)[0];
        let q = take(n_q);
        let lambda = take(m);
        let p0 = take(1)[0];
        let p = take(n_p);
        let pi = take(m);
        Ok(Self {
            q0,
            q,
            lambda,
            p0,
            p,
            pi,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// `n_q + n_p + 2 + 2m`.
pub fn lifted_dimension(n_q: usize, n_p: usize, m: usize) -> usize {
    n_q + n_p + 2 + 2 * m
}

/// Canonical form `J = [[0, I_N], [-I_N, 0]]` on a space with `N` position-like
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CanonicalForm {
    n: usize,
}

pub fn canonical_form(n: usize) -> CanonicalForm {
    assert!(n >= 1, "canonical form needs at least one coordinate pair");
    CanonicalForm { n }
}

impl CanonicalForm {
    pub fn half_dim(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        2 * self.n
    }

    /// Dense integer-valued matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(2 * n, 2 * n, |i, j| {
            if j == i + n {
                1.0
            } else if i == j + n {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// `J v` without forming the matrix.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..2 * n)
            .map(|i| if i < n { v[i + n] } else { -v[i - n] })
            .collect()
    }

    /// Flat map `ω♭(v) = ω(v, ·)`, i.e. the covector `Jᵀ v`.
    pub fn flat(&self, v: &[f64]) -> Vec<f64> {
        self.apply(v).into_iter().map(|x| -x).collect()
    }

    /// `‖Aᵀ J_big A - J_self‖_max` for a `dim(big) × dim(self)` matrix `A`.
    pub fn pullback_defect(&self, big: &CanonicalForm, a: &DMatrix<f64>) -> f64 {
        assert_eq!(a.nrows(), big.dim());
        assert_eq!(a.ncols(), self.dim());
        let pulled = a.transpose() * big.matrix() * a;
        (pulled - self.matrix()).amax()
    }
}

/// `aᵀ J b`.
pub fn symplectic_pairing(a: &[f64], b: &[f64], form: &CanonicalForm) -> Result<f64> {
    if a.len() != form.dim() || b.len() != form.dim() {
        return Err(Error::Dimension(format!(
            "pairing of {} and {} entries on a {}-dimensional form",
            a.len(),
            b.len(),
            form.dim()
        )));
    }
    Ok(a.iter().zip(form.apply(b)).map(|(x, y)| x * y).sum())
}

fn check_lifted(z: &LiftedPoint, sys: &dyn MechanicalSystem) -> Result<()> {
    if z.shape() != LiftedShape::of(sys) || z.pi.len() != z.lambda.len() {
        return Err(Error::Dimension(format!(
            "lifted point {:?} does not match system {}",
            z.shape(),
            sys.name()
        )));
    }
    Ok(())
}

/// `H̃ = H(q, p) + p0 + λ·φ(q)`.
pub fn extended_hamiltonian(z: &LiftedPoint, sys: &dyn MechanicalSystem) -> Result<f64> {
    check_lifted(z, sys)?;
    let h = systems::hamiltonian(sys, &z.q, &z.p)?;
    let phi = sys.constraints(&z.q);
    let lam_phi: f64 = z.lambda.iter().zip(phi.iter()).map(|(l, f)| l * f).sum();
    Ok(h + z.p0 + lam_phi)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaugeResidual {
    /// `p0 + H + λ·φ`.
    pub r0: f64,
    /// `max |π_a|`.
    pub r_pi: f64,
}

impl GaugeResidual {
    /// Both residuals within `1e-8 (1 + |H|)`.
    pub fn satisfied(&self, h: f64) -> bool {
        let tol = gauge_tolerance(h);
        self.r0.abs() <= tol && self.r_pi <= tol
    }
}

pub fn gauge_tolerance(h: f64) -> f64 {
    1e-8 * (1.0 + h.abs())
}

pub fn gauge_residual(z: &LiftedPoint, sys: &dyn MechanicalSystem) -> Result<GaugeResidual> {
    Ok(GaugeResidual {
        r0: extended_hamiltonian(z, sys)?,
        r_pi: z.pi.iter().fold(0.0, |a, b| a.max(b.abs())),
    })
}

/// Lifts a physical state at time `t` into the Dirac gauge.
pub fn lift_point(
    sys: &dyn MechanicalSystem,
    q: &[f64],
    p: &[f64],
    t: f64,
    u: &[f64],
) -> Result<LiftedPoint> {
    let lambda = systems::constraint_multipliers(sys, q, p, u)?;
    let h = systems::hamiltonian(sys, q, p)?;
    let phi = sys.constraints(q);
    let p0 = -(h + lambda.dot(&phi));
    Ok(LiftedPoint {
        q0: t,
        q: q.to_vec(),
        lambda: lambda.as_slice().to_vec(),
        p0,
        p: p.to_vec(),
        pi: vec![0.0; sys.n_constraints()],
    })
}

/// Applies the Dirac lift to every sample: `q0 = t`, `λ` from multiplier
/// elimination, `π = 0`, `p0 = -(H + λ·φ)`. Also accumulates the control and
/// dissipation momenta by the trapezoidal rule, respecting the zero-order-hold
/// control on each interval.
pub fn dirac_lift(traj: &Trajectory, sys: &dyn MechanicalSystem) -> Result<LiftedTrajectory> {
    let n = traj.len();
    let mut points = Vec::with_capacity(n);
    let mut p_ctrl = Vec::with_capacity(n);
    let mut p_diss = Vec::with_capacity(n);
    for (k, x) in traj.states.iter().enumerate() {
        points.push(lift_point(sys, &x.q, &x.p, x.t, &x.u).map_err(|e| e.at_step(k))?);
        if k == 0 {
            p_ctrl.push(0.0);
            p_diss.push(0.0);
            continue;
        }
        let prev = &traj.states[k - 1];
        let (c0, d0) = systems::nonconservative_power(sys, &prev.q, &prev.p, &prev.u)
            .map_err(|e| e.at_step(k - 1))?;
        let (c1, d1) =
            systems::nonconservative_power(sys, &x.q, &x.p, &prev.u).map_err(|e| e.at_step(k))?;
        let h = x.t - prev.t;
        p_ctrl.push(p_ctrl[k - 1] - 0.5 * h * (c0 + c1));
        p_diss.push(p_diss[k - 1] - 0.5 * h * (d0 + d1));
    }
    Ok(LiftedTrajectory {
        dt: traj.dt,
        points,
        controls: traj.states.iter().map(|s| s.u.clone()).collect(),
        p_ctrl,
        p_diss,
        meta: traj.meta.clone(),
    })
}

/// Frozen-clock analytic lift `(q, p) ↦ (t0, q, λ(q, p), -(H + λφ), p, 0)`
/// acting on the flat original state `(q, p)`.
pub fn frozen_clock_lift<'a>(
    sys: &'a dyn MechanicalSystem,
    t0: f64,
    u: &'a [f64],
) -> impl Fn(&[f64]) -> Result<Vec<f64>> + 'a {
    move |x: &[f64]| {
        let n_q = sys.n_q();
        lift_point(sys, &x[..n_q], &x[n_q..], t0, u).map(|z| z.flatten())
    }
}

/// Central-difference Jacobian of `f` at `x`, shape `len(f(x)) × len(x)`.
pub fn fd_jacobian<F>(f: F, x: &[f64], step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let f0 = f(x)?;
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + step;
        let plus = f(&xp)?;
        xp[j] = x[j] - step;
        let minus = f(&xp)?;
        xp[j] = x[j];
        if plus.len() != f0.len() || minus.len() != f0.len() {
            return Err(Error::Dimension("map changed output size".into()));
        }
        for i in 0..f0.len() {
            let d = (plus[i] - minus[i]) / (2.0 * step);
            if !d.is_finite() {
                return Err(Error::non_finite(format!("Jacobian entry ({i}, {j})")));
            }
            jac[(i, j)] = d;
        }
    }
    Ok(jac)
}

/// `‖DΨᵀ J̃ DΨ - J‖_max` with `DΨ` from central differences. `x` is the flat
/// original state `(q, p)`; the lift output is a flat lifted vector.
pub fn pullback_residual<F>(lift: F, x: &[f64], fd_step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(fd_step > 0.0) {
        return Err(Error::Invalid(format!(
            "fd_step must be positive, got {fd_step}"
        )));
    }
    if x.is_empty() || x.len() % 2 != 0 {
        return Err(Error::Dimension(format!(
            "original state has odd length {}",
            x.len()
        )));
    }
    let jac = fd_jacobian(&lift, x, fd_step)?;
    if jac.nrows() % 2 != 0 {
        return Err(Error::Dimension(format!(
            "lifted state has odd length {}",
            jac.nrows()
        )));
    }
    let small = canonical_form(x.len() / 2);
    let big = canonical_form(jac.nrows() / 2);
    Ok(small.pullback_defect(&big, &jac))
}

/// Symmetric pairing `⟨(v, α), (w, β)⟩ = α(w) + β(v)` on `V ⊕ V*`.
pub fn isotropy_pairing(v: &[f64], alpha: &[f64], w: &[f64], beta: &[f64]) -> f64 {
    let a: f64 = alpha.iter().zip(w).map(|(x, y)| x * y).sum();
    let b: f64 = beta.iter().zip(v).map(|(x, y)| x * y).sum();
    a + b
}

/// Whether the pair `(v, α)`, `(w, β)` is isotropic to within `tol`, scaled by
/// the magnitudes involved. Pairs drawn from `graph(ω♭)` always are.
pub fn isotropy_check(
    v: &[f64],
    alpha: &[f64],
    w: &[f64],
    beta: &[f64],
    omega: &CanonicalForm,
    tol: f64,
) -> Result<bool> {
    let d = omega.dim();
    if [v.len(), alpha.len(), w.len(), beta.len()]
        .iter()
        .any(|&l| l != d)
    {
        return Err(Error::Dimension(format!(
            "isotropy check on a {d}-dimensional space"
        )));
    }
    let scale = 1.0
        + crate::tensor::norm(v) * crate::tensor::norm(beta)
        + crate::tensor::norm(w) * crate::tensor::norm(alpha);
    Ok(isotropy_pairing(v, alpha, w, beta).abs() <= tol * scale)
}
