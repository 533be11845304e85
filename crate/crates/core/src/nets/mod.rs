//! Learnable components: the recurrent encoder with its linear velocity head,
//! the implicit-midpoint wrapper, and the gradient-module SympNet.

mod psn;
mod sympnet;

pub use psn::{
    encoder_forward, psn_step, psn_step_tape, recurrent_step, LossChannels, PsnParams, PsnVars,
    RecurrentCellParams,
};
pub use sympnet::{
    low_module, sympnet_inverse, sympnet_step, sympnet_step_flat, sympnet_tape, up_module,
    CanonicalScaling, GradientModule, ModuleKind, SympNetParams, SympNetVars,
};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// A named tensor in row-major order, the unit of weight serialization.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn matrix(name: impl Into<String>, m: &Mat) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.rows, m.cols],
            values: m.data.clone(),
        }
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            shape: vec![v.len()],
            values: v.to_vec(),
        }
    }
}

/// Looks tensors up by name and checks their shapes.
pub(crate) struct TensorReader<'a> {
    tensors: &'a [NamedTensor],
}

impl<'a> TensorReader<'a> {
    pub(crate) fn new(tensors: &'a [NamedTensor]) -> Self {
        Self { tensors }
    }

    fn find(&self, name: &str) -> Result<&'a NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::CorruptArchive(format!("missing tensor {name}")))
    }

    pub(crate) fn matrix(
        &self,
        name: &str,
        rows: Option<usize>,
        cols: Option<usize>,
    ) -> Result<Mat> {
        let t = self.find(name)?;
        let ok = t.shape.len() == 2
            && rows.map_or(true, |r| t.shape[0] == r)
            && cols.map_or(true, |c| t.shape[1] == c)
            && t.values.len() == t.shape[0] * t.shape[1];
        if !ok {
            return Err(Error::CorruptArchive(format!(
                "tensor {name} has shape {:?}, expected [{}, {}]",
                t.shape,
                rows.map_or("*".into(), |r| r.to_string()),
                cols.map_or("*".into(), |c| c.to_string())
            )));
        }
        Ok(Mat::from_rows(t.shape[0], t.shape[1], t.values.clone()))
    }

    pub(crate) fn vector(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let t = self.find(name)?;
        if t.shape != [len] || t.values.len() != len {
            return Err(Error::CorruptArchive(format!(
                "tensor {name} has shape {:?}, expected [{len}]",
                t.shape
            )));
        }
        Ok(t.values.clone())
    }
}

/// Parameter container that can be placed on a tape and differentiated.
pub trait Model: Clone + Send + Sync {
    type Vars;

    /// Places every parameter on the tape, as differentiable leaves when
    /// `trainable` is set and as constants otherwise.
    fn register(&self, tape: &mut Tape, trainable: bool) -> Self::Vars;

    /// Gradient container with the same shapes as `self`.
    fn collect_gradient(&self, grads: &Gradients, vars: &Self::Vars) -> Self;

    /// Trainable parameters in a fixed order.
    fn to_flat(&self) -> Vec<f64>;

    /// Copy of `self` with trainable parameters replaced from `flat`.
    fn with_flat(&self, flat: &[f64]) -> Self;

    fn n_params(&self) -> usize {
        self.to_flat().len()
    }

    fn to_tensors(&self) -> Vec<NamedTensor>;
}

/// Reverse-mode gradients of a scalar loss closure with respect to every
/// parameter of `model`. Returns the loss value and a same-shaped gradient.
pub fn param_gradients<M, F>(model: &M, loss: F) -> Result<(f64, M)>
where
    M: Model,
    F: FnOnce(&mut Tape, &M::Vars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let l = loss(&mut tape, &vars)?;
    let value = tape.scalar(l);
    if !value.is_finite() {
        return Err(Error::non_finite("loss"));
    }
    let grads = tape.backward(l);
    Ok((value, model.collect_gradient(&grads, &vars)))
}
