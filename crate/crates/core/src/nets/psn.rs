//! Presymplectification network: a three-layer gated recurrent encoder over
//! the context window followed by the affine velocity head
//! `v = W1 ẑ_t + W2 h_{t-1} + b`, optionally advanced by an implicit midpoint
//! step with the hidden state held fixed.
//!
//! Input slots are `(t, p_ctrl, q, p)`. Head outputs are read as the velocity
//! of `(t, p0, q, p)`: slot 1 carries the inpainted clock momentum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Model, NamedTensor, TensorReader};
use crate::autodiff::{Gradients, MatVar, Tape, Var};
use crate::error::{Error, Result};
use crate::integrators::{implicit_midpoint_step, MidpointSolver};
use crate::tensor::{all_finite, Mat};

pub const PSN_LAYERS: usize = 3;

/// Index of the inpainted momentum slot in the encoder input.
pub const MOMENTUM_SLOT: usize = 1;

/// Which head outputs are supervised (and therefore active).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossChannels {
    /// Only the clock-momentum velocity.
    #[default]
    P0Only,
    /// Velocity of every slot `(t, p0, q, p)`.
    #[serde(rename = "full_lifted_state")]
    Full,
}

impl LossChannels {
    pub fn mask(self, dim: usize) -> Vec<f64> {
        match self {
            LossChannels::P0Only => (0..dim)
                .map(|i| f64::from(u8::from(i == MOMENTUM_SLOT)))
                .collect(),
            LossChannels::Full => vec![1.0; dim],
        }
    }

    pub fn from_mask(mask: &[f64]) -> Result<Self> {
        let dim = mask.len();
        for c in [LossChannels::P0Only, LossChannels::Full] {
            if c.mask(dim) == mask {
                return Ok(c);
            }
        }
        Err(Error::CorruptArchive(format!(
            "unrecognised head mask {mask:?}"
        )))
    }

    pub fn indices(self, dim: usize) -> Vec<usize> {
        match self {
            LossChannels::P0Only => vec![MOMENTUM_SLOT],
            LossChannels::Full => (0..dim).collect(),
        }
    }
}

/// Gated recurrent cell weights: input maps `W_*` (hidden × input),
/// recurrent maps `U_*` (hidden × hidden) and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentCellParams {
    pub w_z: Mat,
    pub w_r: Mat,
    pub w_h: Mat,
    pub u_z: Mat,
    pub u_r: Mat,
    pub u_h: Mat,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_h: Vec<f64>,
}

impl RecurrentCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_z: Mat::zeros(hidden, input),
            w_r: Mat::zeros(hidden, input),
            w_h: Mat::zeros(hidden, input),
            u_z: Mat::zeros(hidden, hidden),
            u_r: Mat::zeros(hidden, hidden),
            u_h: Mat::zeros(hidden, hidden),
            b_z: vec![0.0; hidden],
            b_r: vec![0.0; hidden],
            b_h: vec![0.0; hidden],
        }
    }

    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_z: Mat::uniform_fan_in(hidden, input, rng),
            w_r: Mat::uniform_fan_in(hidden, input, rng),
            w_h: Mat::uniform_fan_in(hidden, input, rng),
            u_z: Mat::uniform_fan_in(hidden, hidden, rng),
            u_r: Mat::uniform_fan_in(hidden, hidden, rng),
            u_h: Mat::uniform_fan_in(hidden, hidden, rng),
            b_z: vec![0.0; hidden],
            b_r: vec![0.0; hidden],
            b_h: vec![0.0; hidden],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.rows
    }

    fn mats(&self) -> [&Mat; 6] {
        [
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h,
        ]
    }

    fn vecs(&self) -> [&Vec<f64>; 3] {
        [&self.b_z, &self.b_r, &self.b_h]
    }

    fn validate(&self) -> Result<()> {
        let (h, i) = (self.hidden_dim(), self.input_dim());
        let shapes_ok = self.mats()[..3].iter().all(|m| (m.rows, m.cols) == (h, i))
            && self.mats()[3..].iter().all(|m| (m.rows, m.cols) == (h, h))
            && self.vecs().iter().all(|b| b.len() == h);
        if !shapes_ok {
            return Err(Error::Dimension(
                "recurrent cell shapes are inconsistent".into(),
            ));
        }
        if !self.mats().iter().all(|m| m.is_finite()) || !self.vecs().iter().all(|b| all_finite(b))
        {
            return Err(Error::non_finite("recurrent cell parameters"));
        }
        Ok(())
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> CellVars {
        let mut m = |x: &Mat| {
            if trainable {
                tape.param_mat(x)
            } else {
                tape.constant_mat(x)
            }
        };
        let (w_z, w_r, w_h) = (m(&self.w_z), m(&self.w_r), m(&self.w_h));
        let (u_z, u_r, u_h) = (m(&self.u_z), m(&self.u_r), m(&self.u_h));
        let mut v = |x: &[f64]| {
            if trainable {
                tape.param(x)
            } else {
                tape.constant(x)
            }
        };
        CellVars {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z: v(&self.b_z),
            b_r: v(&self.b_r),
            b_h: v(&self.b_h),
        }
    }

    fn flat_into(&self, out: &mut Vec<f64>) {
        for m in self.mats() {
            out.extend(&m.data);
        }
        for b in self.vecs() {
            out.extend(b.iter());
        }
    }

    fn read_flat(&self, flat: &[f64], offset: &mut usize) -> Self {
        let mut take = |n: usize| {
            let s = flat[*offset..*offset + n].to_vec();
            *offset += n;
            s
        };
        let mut mat = |m: &Mat| Mat::from_rows(m.rows, m.cols, take(m.rows * m.cols));
        let (w_z, w_r, w_h) = (mat(&self.w_z), mat(&self.w_r), mat(&self.w_h));
        let (u_z, u_r, u_h) = (mat(&self.u_z), mat(&self.u_r), mat(&self.u_h));
        let h = self.hidden_dim();
        let mut take = |n: usize| {
            let s = flat[*offset..*offset + n].to_vec();
            *offset += n;
            s
        };
        Self {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z: take(h),
            b_r: take(h),
            b_h: take(h),
        }
    }
}

pub(crate) struct CellVars {
    w_z: MatVar,
    w_r: MatVar,
    w_h: MatVar,
    u_z: MatVar,
    u_r: MatVar,
    u_h: MatVar,
    b_z: Var,
    b_r: Var,
    b_h: Var,
}

impl CellVars {
    fn gradient(&self, g: &Gradients) -> RecurrentCellParams {
        RecurrentCellParams {
            w_z: g.get_mat(self.w_z),
            w_r: g.get_mat(self.w_r),
            w_h: g.get_mat(self.w_h),
            u_z: g.get_mat(self.u_z),
            u_r: g.get_mat(self.u_r),
            u_h: g.get_mat(self.u_h),
            b_z: g.get(self.b_z),
            b_r: g.get(self.b_r),
            b_h: g.get(self.b_h),
        }
    }

    /// `(1 - z)⊙h + z⊙h̃` with logistic gates and a tanh candidate.
    fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Var {
        let gate = |tape: &mut Tape, w: MatVar, u: MatVar, b: Var, hh: Var| {
            let wx = tape.matvec(w, x);
            let uh = tape.matvec(u, hh);
            let s = tape.add(wx, uh);
            tape.add(s, b)
        };
        let z_pre = gate(tape, self.w_z, self.u_z, self.b_z, h);
        let z = tape.sigmoid(z_pre);
        let r_pre = gate(tape, self.w_r, self.u_r, self.b_r, h);
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h);
        let c_pre = gate(tape, self.w_h, self.u_h, self.b_h, rh);
        let cand = tape.tanh(c_pre);
        let keep = tape.one_minus(z);
        let carried = tape.mul(keep, h);
        let fresh = tape.mul(z, cand);
        tape.add(carried, fresh)
    }
}

/// One gated recurrent update `h_k = GRU(x_k, h_{k-1})`.
pub fn recurrent_step(cell: &RecurrentCellParams, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if x.len() != cell.input_dim() || h.len() != cell.hidden_dim() {
        return Err(Error::Dimension(format!(
            "cell expects input {} / hidden {}, got {} / {}",
            cell.input_dim(),
            cell.hidden_dim(),
            x.len(),
            h.len()
        )));
    }
    let mut tape = Tape::new();
    let vars = cell.register(&mut tape, false);
    let (xv, hv) = (tape.constant(x), tape.constant(h));
    let out = vars.step(&mut tape, xv, hv);
    Ok(tape.value(out).to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsnParams {
    pub cells: Vec<RecurrentCellParams>,
    pub head_w1: Mat,
    pub head_w2: Mat,
    pub head_b: Vec<f64>,
    /// 0/1 mask applied to the head output; not trained.
    pub head_mask: Vec<f64>,
}

pub struct PsnVars {
    cells: Vec<CellVars>,
    pub head_w1: MatVar,
    pub head_w2: MatVar,
    pub head_b: Var,
    mask: Var,
}

impl PsnParams {
    pub fn init<R: Rng>(
        input_dim: usize,
        hidden: usize,
        channels: LossChannels,
        rng: &mut R,
    ) -> Self {
        let cells = (0..PSN_LAYERS)
            .map(|l| {
                RecurrentCellParams::init(if l == 0 { input_dim } else { hidden }, hidden, rng)
            })
            .collect();
        let bound = 1.0 / ((input_dim + hidden) as f64).sqrt();
        let mut uniform = |rows: usize, cols: usize| {
            Mat::from_rows(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| rng.gen_range(-bound..=bound))
                    .collect(),
            )
        };
        let head_w1 = uniform(input_dim, input_dim);
        let head_w2 = uniform(input_dim, hidden);
        Self {
            cells,
            head_w1,
            head_w2,
            head_b: vec![0.0; input_dim],
            head_mask: channels.mask(input_dim),
        }
    }

    /// All weights zero; the velocity is identically zero.
    pub fn zeros(input_dim: usize, hidden: usize, channels: LossChannels) -> Self {
        Self {
            cells: (0..PSN_LAYERS)
                .map(|l| {
                    RecurrentCellParams::zeros(if l == 0 { input_dim } else { hidden }, hidden)
                })
                .collect(),
            head_w1: Mat::zeros(input_dim, input_dim),
            head_w2: Mat::zeros(input_dim, hidden),
            head_b: vec![0.0; input_dim],
            head_mask: channels.mask(input_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.head_w1.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.head_w2.cols
    }

    pub fn channels(&self) -> Result<LossChannels> {
        LossChannels::from_mask(&self.head_mask)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.input_dim(), self.hidden_dim());
        if self.cells.len() != PSN_LAYERS {
            return Err(Error::Dimension(format!(
                "expected {PSN_LAYERS} recurrent layers"
            )));
        }
        for (l, c) in self.cells.iter().enumerate() {
            c.validate()?;
            let want_in = if l == 0 { d } else { h };
            if c.input_dim() != want_in || c.hidden_dim() != h {
                return Err(Error::Dimension(format!("layer {l} has the wrong width")));
            }
        }
        if (self.head_w1.rows, self.head_w2.rows) != (d, d)
            || self.head_b.len() != d
            || self.head_mask.len() != d
        {
            return Err(Error::Dimension("head shapes are inconsistent".into()));
        }
        if !self.head_w1.is_finite() || !self.head_w2.is_finite() || !all_finite(&self.head_b) {
            return Err(Error::non_finite("head parameters"));
        }
        Ok(())
    }

    /// Runs the stacked recurrence over `inputs`, returning per-layer hidden
    /// sequences (`trace[layer][k]`) on the tape.
    pub(crate) fn encode_tape(
        &self,
        tape: &mut Tape,
        vars: &PsnVars,
        inputs: &[Var],
        h0: Option<&[Vec<f64>]>,
    ) -> Vec<Vec<Var>> {
        let mut trace = Vec::with_capacity(PSN_LAYERS);
        let mut layer_inputs = inputs.to_vec();
        for (l, cell) in vars.cells.iter().enumerate() {
            let start = match h0 {
                Some(h) => h[l].clone(),
                None => vec![0.0; self.hidden_dim()],
            };
            let mut h = tape.constant(&start);
            let mut seq = Vec::with_capacity(layer_inputs.len());
            for &x in &layer_inputs {
                h = cell.step(tape, x, h);
                seq.push(h);
            }
            layer_inputs = seq.clone();
            trace.push(seq);
        }
        trace
    }

    /// Top-layer hidden state after consuming `inputs`.
    pub(crate) fn final_hidden_tape(&self, tape: &mut Tape, vars: &PsnVars, inputs: &[Var]) -> Var {
        let trace = self.encode_tape(tape, vars, inputs, None);
        match trace.last().and_then(|s| s.last()) {
            Some(&h) => h,
            None => tape.constant(&vec![0.0; self.hidden_dim()]),
        }
    }

    /// Masked `W1 z + W2 h + b`.
    pub(crate) fn head_tape(&self, tape: &mut Tape, vars: &PsnVars, z: Var, h: Var) -> Var {
        let a = tape.matvec(vars.head_w1, z);
        let b = tape.matvec(vars.head_w2, h);
        let s = tape.add(a, b);
        let s = tape.add(s, vars.head_b);
        tape.mul(s, vars.mask)
    }

    /// Head evaluated outside any tape, with `W2 h + b` precomputed.
    fn head_plain(&self, z: &[f64], w2h_b: &[f64]) -> Vec<f64> {
        self.head_w1
            .matvec(z)
            .iter()
            .zip(w2h_b)
            .zip(&self.head_mask)
            .map(|((a, b), m)| m * (a + b))
            .collect()
    }

    fn check_context(&self, context: &[Vec<f64>]) -> Result<()> {
        if context.is_empty() {
            return Err(Error::Invalid(
                "context must hold at least one entry".into(),
            ));
        }
        if let Some(bad) = context.iter().find(|c| c.len() != self.input_dim()) {
            return Err(Error::Dimension(format!(
                "context entry has {} slots, network expects {}",
                bad.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `W2 h_{t-1} + b` from a context window whose last entry is `ẑ_t`.
    fn context_bias(&self, context: &[Vec<f64>]) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let inputs: Vec<Var> = context[..context.len() - 1]
            .iter()
            .map(|c| tape.constant(c))
            .collect();
        let h = self.final_hidden_tape(&mut tape, &vars, &inputs);
        let w2h = self.head_w2.matvec(tape.value(h));
        w2h.iter().zip(&self.head_b).map(|(a, b)| a + b).collect()
    }
}

/// Runs the recurrence over the first `T-1` context entries and applies the
/// head to the last entry and the top-layer hidden state. Returns the
/// velocity and the hidden trace `trace[layer][k]`.
pub fn encoder_forward(
    params: &PsnParams,
    context: &[Vec<f64>],
    h0: Option<&[Vec<f64>]>,
) -> Result<(Vec<f64>, Vec<Vec<Vec<f64>>>)> {
    params.check_context(context)?;
    if let Some(h0) = h0 {
        if h0.len() != PSN_LAYERS || h0.iter().any(|h| h.len() != params.hidden_dim()) {
            return Err(Error::Dimension(
                "initial hidden stack has the wrong shape".into(),
            ));
        }
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let t = context.len();
    let inputs: Vec<Var> = context[..t - 1].iter().map(|c| tape.constant(c)).collect();
    let trace = params.encode_tape(&mut tape, &vars, &inputs, h0);
    let h_top = match trace.last().and_then(|s| s.last()) {
        Some(&h) => h,
        None => tape.constant(&h0.map_or(vec![0.0; params.hidden_dim()], |h| {
            h[PSN_LAYERS - 1].clone()
        })),
    };
    let z = tape.constant(&context[t - 1]);
    let v = params.head_tape(&mut tape, &vars, z, h_top);
    let values = trace
        .iter()
        .map(|seq| seq.iter().map(|&h| tape.value(h).to_vec()).collect())
        .collect();
    Ok((tape.value(v).to_vec(), values))
}

/// Implicit midpoint step of `v(z) = head(z, h_{t-1})` from `z_t`, with the
/// hidden state computed from `context[..T-1]` and held fixed.
pub fn psn_step(
    params: &PsnParams,
    context: &[Vec<f64>],
    z_t: &[f64],
    dt: f64,
    solver: MidpointSolver,
) -> Result<Vec<f64>> {
    params.check_context(context)?;
    if z_t.len() != params.input_dim() {
        return Err(Error::Dimension(
            "z_t does not match the network input".into(),
        ));
    }
    let bias = params.context_bias(context);
    implicit_midpoint_step(|z, _| params.head_plain(z, &bias), z_t, 0.0, dt, solver)
}

/// Differentiable midpoint step: the fixed-point iterations are unrolled on the tape.
pub fn psn_step_tape(
    params: &PsnParams,
    tape: &mut Tape,
    vars: &PsnVars,
    h: Var,
    z: Var,
    dt: f64,
    solver: MidpointSolver,
) -> Result<Var> {
    let z_norm = crate::tensor::norm(tape.value(z));
    let mut next = z;
    let mut residual = f64::INFINITY;
    for iter in 0..solver.max_iter {
        let sum = tape.add(z, next);
        let mid = tape.scale(sum, 0.5);
        let v = params.head_tape(tape, vars, mid, h);
        let dv = tape.scale(v, dt);
        let cand = tape.add(z, dv);
        let delta = tape.sub(cand, next);
        let delta = tape.scale(delta, solver.damping(iter));
        residual = crate::tensor::norm(tape.value(delta));
        next = tape.add(next, delta);
        if !residual.is_finite() {
            break;
        }
        if solver.converged(residual, z_norm) {
            let sum = tape.add(z, next);
            let mid = tape.scale(sum, 0.5);
            let v = params.head_tape(tape, vars, mid, h);
            let dv = tape.scale(v, dt);
            return Ok(tape.add(z, dv));
        }
    }
    Err(Error::NoConvergence {
        residual,
        iterations: solver.max_iter,
        step: None,
    })
}

impl Model for PsnParams {
    type Vars = PsnVars;

    fn register(&self, tape: &mut Tape, trainable: bool) -> PsnVars {
        let cells = self
            .cells
            .iter()
            .map(|c| c.register(tape, trainable))
            .collect();
        let (head_w1, head_w2, head_b) = if trainable {
            (
                tape.param_mat(&self.head_w1),
                tape.param_mat(&self.head_w2),
                tape.param(&self.head_b),
            )
        } else {
            (
                tape.constant_mat(&self.head_w1),
                tape.constant_mat(&self.head_w2),
                tape.constant(&self.head_b),
            )
        };
        PsnVars {
            cells,
            head_w1,
            head_w2,
            head_b,
            mask: tape.constant(&self.head_mask),
        }
    }

    fn collect_gradient(&self, g: &Gradients, vars: &PsnVars) -> Self {
        Self {
            cells: vars.cells.iter().map(|c| c.gradient(g)).collect(),
            head_w1: g.get_mat(vars.head_w1),
            head_w2: g.get_mat(vars.head_w2),
            head_b: g.get(vars.head_b),
            head_mask: self.head_mask.clone(),
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.cells {
            c.flat_into(&mut out);
        }
        out.extend(&self.head_w1.data);
        out.extend(&self.head_w2.data);
        out.extend(&self.head_b);
        out
    }

    fn with_flat(&self, flat: &[f64]) -> Self {
        let mut offset = 0;
        let cells = self
            .cells
            .iter()
            .map(|c| c.read_flat(flat, &mut offset))
            .collect();
        let mut take = |n: usize| {
            let s = flat[offset..offset + n].to_vec();
            offset += n;
            s
        };
        let head_w1 = Mat::from_rows(
            self.head_w1.rows,
            self.head_w1.cols,
            take(self.head_w1.data.len()),
        );
        let head_w2 = Mat::from_rows(
            self.head_w2.rows,
            self.head_w2.cols,
            take(self.head_w2.data.len()),
        );
        let head_b = take(self.head_b.len());
        assert_eq!(offset, flat.len(), "flat parameter length");
        Self {
            cells,
            head_w1,
            head_w2,
            head_b,
            head_mask: self.head_mask.clone(),
        }
    }

    fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (l, c) in self.cells.iter().enumerate() {
            for (name, m) in ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h"]
                .iter()
                .zip(c.mats())
            {
                out.push(NamedTensor::matrix(format!("cell{l}.{name}"), m));
            }
            for (name, b) in ["b_z", "b_r", "b_h"].iter().zip(c.vecs()) {
                out.push(NamedTensor::vector(format!("cell{l}.{name}"), b));
            }
        }
        out.push(NamedTensor::matrix("head.w1", &self.head_w1));
        out.push(NamedTensor::matrix("head.w2", &self.head_w2));
        out.push(NamedTensor::vector("head.b", &self.head_b));
        out.push(NamedTensor::vector("head.mask", &self.head_mask));
        out
    }
}

impl PsnParams {
    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let r = TensorReader::new(tensors);
        let head_w1 = r.matrix("head.w1", None, None)?;
        let d = head_w1.rows;
        if head_w1.cols != d {
            return Err(Error::CorruptArchive("head.w1 must be square".into()));
        }
        let head_w2 = r.matrix("head.w2", Some(d), None)?;
        let h = head_w2.cols;
        let mut cells = Vec::with_capacity(PSN_LAYERS);
        for l in 0..PSN_LAYERS {
            let input = if l == 0 { d } else { h };
            let m = |n: &str, cols: usize| r.matrix(&format!("cell{l}.{n}"), Some(h), Some(cols));
            let v = |n: &str| r.vector(&format!("cell{l}.{n}"), h);
            cells.push(RecurrentCellParams {
                w_z: m("w_z", input)?,
                w_r: m("w_r", input)?,
                w_h: m("w_h", input)?,
                u_z: m("u_z", h)?,
                u_r: m("u_r", h)?,
                u_h: m("u_h", h)?,
                b_z: v("b_z")?,
                b_r: v("b_r")?,
                b_h: v("b_h")?,
            });
        }
        let params = Self {
            cells,
            head_w1,
            head_w2,
            head_b: r.vector("head.b", d)?,
            head_mask: r.vector("head.mask", d)?,
        };
        params.channels()?;
        params.validate()?;
        Ok(params)
    }
}
