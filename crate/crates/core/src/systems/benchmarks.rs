//! Desk-scale benchmark systems in Cartesian coordinates.
//!
//! Potentials are offset so that `H = 0` at the stable equilibrium.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::MechanicalSystem;

/// `m₀ q̈ = -k q - c q̇ + u`. No constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DampedDrivenOscillator {
    pub mass: f64,
    pub stiffness: f64,
    pub damping: f64,
}

/// Point mass in the plane held on a circle of radius `length` about the origin,
/// gravity along `-y`, viscous damping `c·I`, and a tangential force input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumOnCircle {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub damping: f64,
}

/// Planar two-link arm pinned at the origin, described by the Cartesian
/// positions of its two endpoint masses with two distance constraints.
/// Damping and the two torque inputs act on the shoulder angle and the
/// relative elbow angle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoLinkPinned {
    pub mass1: f64,
    pub mass2: f64,
    pub length1: f64,
    pub length2: f64,
    pub gravity: f64,
    pub damping: f64,
}

/// Serializable selection of a benchmark system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemSpec {
    DampedDrivenOscillator(DampedDrivenOscillator),
    PendulumOnCircle(PendulumOnCircle),
    TwoLinkPinned(TwoLinkPinned),
}

impl SystemSpec {
    pub fn build(&self) -> Box<dyn MechanicalSystem> {
        match self {
            SystemSpec::DampedDrivenOscillator(s) => Box::new(s.clone()),
            SystemSpec::PendulumOnCircle(s) => Box::new(s.clone()),
            SystemSpec::TwoLinkPinned(s) => Box::new(s.clone()),
        }
    }

    /// Characteristic squared length used for constraint-drift tolerances.
    pub fn length_scale_sq(&self) -> f64 {
        match self {
            SystemSpec::DampedDrivenOscillator(_) => 1.0,
            SystemSpec::PendulumOnCircle(s) => s.length * s.length,
            SystemSpec::TwoLinkPinned(s) => s.length1.max(s.length2).powi(2),
        }
    }
}

impl MechanicalSystem for DampedDrivenOscillator {
    fn name(&self) -> &'static str {
        "damped_driven_oscillator"
    }
    fn n_q(&self) -> usize {
        1
    }
    fn n_p(&self) -> usize {
        1
    }
    fn n_u(&self) -> usize {
        1
    }
    fn n_constraints(&self) -> usize {
        0
    }
    fn mass_matrix(&self, _q: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.mass)
    }
    fn potential(&self, q: &[f64]) -> f64 {
        0.5 * self.stiffness * q[0] * q[0]
    }
    fn potential_gradient(&self, q: &[f64]) -> DVector<f64> {
        DVector::from_element(1, self.stiffness * q[0])
    }
    fn damping_matrix(&self, _q: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.damping)
    }
    fn input_matrix(&self, _q: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }
    fn constraints(&self, _q: &[f64]) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn constraint_jacobian(&self, _q: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(0, 1)
    }
    fn constraint_curvature(&self, _q: &[f64], _qdot: &[f64]) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn state_from_minimal(&self, coords: &[f64], rates: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (vec![coords[0]], vec![self.mass * rates[0]])
    }
    fn n_minimal(&self) -> usize {
        1
    }
}

impl MechanicalSystem for PendulumOnCircle {
    fn name(&self) -> &'static str {
        "pendulum_on_circle"
    }
    fn n_q(&self) -> usize {
        2
    }
    fn n_p(&self) -> usize {
        2
    }
    fn n_u(&self) -> usize {
        1
    }
    fn n_constraints(&self) -> usize {
        1
    }
    fn mass_matrix(&self, _q: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * self.mass
    }
    fn potential(&self, q: &[f64]) -> f64 {
        self.mass * self.gravity * (q[1] + self.length)
    }
    fn potential_gradient(&self, _q: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(&[0.0, self.mass * self.gravity])
    }
    fn damping_matrix(&self, _q: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * self.damping
    }
    fn input_matrix(&self, q: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[-q[1] / self.length, q[0] / self.length])
    }
    fn constraints(&self, q: &[f64]) -> DVector<f64> {
        DVector::from_element(
            1,
            0.5 * (q[0] * q[0] + q[1] * q[1] - self.length * self.length),
        )
    }
    fn constraint_jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, q)
    }
    fn constraint_curvature(&self, _q: &[f64], qdot: &[f64]) -> DVector<f64> {
        DVector::from_element(1, qdot[0] * qdot[0] + qdot[1] * qdot[1])
    }
    fn state_from_minimal(&self, coords: &[f64], rates: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (s, c) = coords[0].sin_cos();
        let l = self.length;
        let v = rates[0] * l;
        (
            vec![l * s, -l * c],
            vec![self.mass * v * c, self.mass * v * s],
        )
    }
    fn n_minimal(&self) -> usize {
        1
    }
}

impl TwoLinkPinned {
    /// Rows of the shoulder-rate and elbow-rate covectors: `θ̇₁ = g₁·q̇`,
    /// `θ̇₂ - θ̇₁ = g₂₁·q̇`.
    fn joint_rate_covectors(&self, q: &[f64]) -> ([f64; 4], [f64; 4]) {
        let l1s = self.length1 * self.length1;
        let l2s = self.length2 * self.length2;
        let (x1, y1) = (q[0], q[1]);
        let (dx, dy) = (q[2] - q[0], q[3] - q[1]);
        let g1 = [-y1 / l1s, x1 / l1s, 0.0, 0.0];
        let g2 = [dy / l2s, -dx / l2s, -dy / l2s, dx / l2s];
        let g21 = [g2[0] - g1[0], g2[1] - g1[1], g2[2], g2[3]];
        (g1, g21)
    }
}

impl MechanicalSystem for TwoLinkPinned {
    fn name(&self) -> &'static str {
        "two_link_pinned"
    }
    fn n_q(&self) -> usize {
        4
    }
    fn n_p(&self) -> usize {
        4
    }
    fn n_u(&self) -> usize {
        2
    }
    fn n_constraints(&self) -> usize {
        2
    }
    fn mass_matrix(&self, _q: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&[
            self.mass1, self.mass1, self.mass2, self.mass2,
        ]))
    }
    fn potential(&self, q: &[f64]) -> f64 {
        let (l1, l2) = (self.length1, self.length2);
        self.gravity * (self.mass1 * (q[1] + l1) + self.mass2 * (q[3] + l1 + l2))
    }
    fn potential_gradient(&self, _q: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(&[
            0.0,
            self.mass1 * self.gravity,
            0.0,
            self.mass2 * self.gravity,
        ])
    }
    fn damping_matrix(&self, q: &[f64]) -> DMatrix<f64> {
        let (g1, g21) = self.joint_rate_covectors(q);
        let a = DVector::from_column_slice(&g1);
        let b = DVector::from_column_slice(&g21);
        (&a * a.transpose() + &b * b.transpose()) * self.damping
    }
    fn input_matrix(&self, q: &[f64]) -> DMatrix<f64> {
        let (g1, g21) = self.joint_rate_covectors(q);
        DMatrix::from_fn(4, 2, |i, j| if j == 0 { g1[i] } else { g21[i] })
    }
    fn constraints(&self, q: &[f64]) -> DVector<f64> {
        let (dx, dy) = (q[2] - q[0], q[3] - q[1]);
        DVector::from_column_slice(&[
            0.5 * (q[0] * q[0] + q[1] * q[1] - self.length1 * self.length1),
            0.5 * (dx * dx + dy * dy - self.length2 * self.length2),
        ])
    }
    fn constraint_jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        let (dx, dy) = (q[2] - q[0], q[3] - q[1]);
        DMatrix::from_row_slice(2, 4, &[q[0], q[1], 0.0, 0.0, -dx, -dy, dx, dy])
    }
    fn constraint_curvature(&self, _q: &[f64], v: &[f64]) -> DVector<f64> {
        let (dvx, dvy) = (v[2] - v[0], v[3] - v[1]);
        DVector::from_column_slice(&[v[0] * v[0] + v[1] * v[1], dvx * dvx + dvy * dvy])
    }
    fn state_from_minimal(&self, coords: &[f64], rates: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (th1, th12) = (coords[0], coords[0] + coords[1]);
        let (w1, w12) = (rates[0], rates[0] + rates[1]);
        let (l1, l2) = (self.length1, self.length2);
        let (s1, c1) = th1.sin_cos();
        let (s2, c2) = th12.sin_cos();
        let x1 = [l1 * s1, -l1 * c1];
        let v1 = [l1 * c1 * w1, l1 * s1 * w1];
        let x2 = [x1[0] + l2 * s2, x1[1] - l2 * c2];
        let v2 = [v1[0] + l2 * c2 * w12, v1[1] + l2 * s2 * w12];
        (
            vec![x1[0], x1[1], x2[0], x2[1]],
            vec![
                self.mass1 * v1[0],
                self.mass1 * v1[1],
                self.mass2 * v2[0],
                self.mass2 * v2[1],
            ],
        )
    }
    fn n_minimal(&self) -> usize {
        2
    }
}
