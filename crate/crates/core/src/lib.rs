//! Dirac symplectification of constrained, dissipative mechanical systems.
//!
//! The crate lifts trajectories of a [`systems::MechanicalSystem`] into the
//! extended phase space `(q0, q, λ; p0, p, π)` where the dynamics are
//! conservative, learns the clock momentum `p0` with a recurrent
//! flow-matching encoder, and forecasts lifted states with a SympNet whose
//! every layer is exactly symplectic.

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod integrators;
pub mod nets;
pub mod par;
pub mod systems;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use par::Exec;
