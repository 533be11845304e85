//! Flow-matching training of the encoder, one-step prediction training of the
//! SympNet, the Adam optimizer, and held-out evaluation.
//!
//! Encoder inputs are `ẑ_k = (t_k, p_ctrl_k, q_k, p_k)`: the clock momentum is
//! withheld and its slot carries the control-induced momentum instead. The
//! velocity matched in that slot is the rate of the gap `p0 - p_ctrl`, so the
//! flow started from the observed `p_ctrl` fills in the missing
//! (dissipative) part of `p0`.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataio::seeded_rng;
use crate::error::{Error, Result};
use crate::geometry::{extended_hamiltonian, LiftedPoint, LiftedShape};
use crate::integrators::{LiftedTrajectory, MidpointSolver};
use crate::nets::{
    param_gradients, psn_step, psn_step_tape, sympnet_step_flat, sympnet_tape, CanonicalScaling,
    LossChannels, Model, PsnParams, SympNetParams,
};
use crate::par::{self, Exec};
use crate::systems::{self, MechanicalSystem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Context length `T`.
    pub context: usize,
    pub seed: u64,
    pub channels: LossChannels,
    /// Supervise the implicit-midpoint increment instead of the raw head velocity.
    pub through_midpoint: bool,
    /// Use every `sample_stride`-th step of each trajectory as a training sample.
    pub sample_stride: usize,
    /// Fraction of trajectories held out for validation.
    pub val_fraction: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            epochs: 200,
            context: 10,
            seed: 0,
            channels: LossChannels::P0Only,
            through_midpoint: false,
            sample_stride: 1,
            val_fraction: 0.2,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0) {
            return Err("learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return Err("eps must be positive".into());
        }
        if self.batch_size == 0 || self.sample_stride == 0 {
            return Err("batch_size and sample_stride must be at least 1".into());
        }
        if self.context < 2 {
            return Err("context must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err("val_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport<M> {
    /// Parameters of the epoch with the lowest validation loss.
    pub params: M,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    /// Batch elements dropped because their loss or gradient was not finite
    /// or the midpoint solve failed.
    pub skipped: usize,
}

/// Adam moments and step counter for a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients leave `state` untouched.
pub fn adam_step(
    params: &[f64],
    grads: &[f64],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Dimension(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::non_finite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut out = params.to_vec();
    for i in 0..out.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        out[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(out)
}

/// `(v_{k+1} - v_{k-1}) / 2dt`, one-sided at either end.
pub fn central_difference(series: &[f64], k: usize, dt: f64) -> Result<f64> {
    let n = series.len();
    if n < 2 || k >= n {
        return Err(Error::Invalid(format!(
            "difference at index {k} of a length-{n} series"
        )));
    }
    Ok(if k == 0 {
        (series[1] - series[0]) / dt
    } else if k == n - 1 {
        (series[n - 1] - series[n - 2]) / dt
    } else {
        (series[k + 1] - series[k - 1]) / (2.0 * dt)
    })
}

/// Width of the encoder input for a system shape.
pub fn psn_input_dim(shape: LiftedShape) -> usize {
    2 + shape.n_q + shape.n_p
}

/// Masked encoder input `(t, p_ctrl, q, p)` at step `k`.
pub fn psn_input(traj: &LiftedTrajectory, k: usize) -> Vec<f64> {
    let z = &traj.points[k];
    let mut out = Vec::with_capacity(2 + z.q.len() + z.p.len());
    out.push(z.q0);
    out.push(traj.p_ctrl[k]);
    out.extend(&z.q);
    out.extend(&z.p);
    out
}

/// Slot values whose velocity is matched: `(t, p0 - p_ctrl, q, p)`.
fn flow_slots(traj: &LiftedTrajectory, k: usize) -> Vec<f64> {
    let mut s = psn_input(traj, k);
    s[1] = traj.points[k].p0 - traj.p_ctrl[k];
    s
}

/// Data velocity of the selected channels at step `k` by central differences.
pub fn data_velocity(
    traj: &LiftedTrajectory,
    k: usize,
    channels: LossChannels,
) -> Result<Vec<f64>> {
    let n = traj.len();
    if n < 2 || k >= n {
        return Err(Error::Invalid(format!(
            "data velocity at step {k} of a {n}-sample trajectory"
        )));
    }
    let (a, b, span) = if k == 0 {
        (0, 1, 1.0)
    } else if k == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (k - 1, k + 1, 2.0)
    };
    let (za, zb) = (flow_slots(traj, a), flow_slots(traj, b));
    Ok(channels
        .indices(za.len())
        .into_iter()
        .map(|i| (zb[i] - za[i]) / (span * traj.dt))
        .collect())
}

/// One flow-matching training example.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMatchSample {
    /// `T` consecutive masked inputs ending at the supervised step.
    pub context: Vec<Vec<f64>>,
    /// Target velocity for every slot; zero in unsupervised slots.
    pub target_v: Vec<f64>,
    pub target_p0: f64,
    pub dt: f64,
}

/// Samples at steps `T-1, T-1+stride, …` of every trajectory.
pub fn flow_samples(
    trajs: &[LiftedTrajectory],
    context: usize,
    channels: LossChannels,
    stride: usize,
) -> Result<Vec<FlowMatchSample>> {
    let mut out = Vec::new();
    for traj in trajs {
        if traj.len() < context.max(2) {
            continue;
        }
        let d = psn_input_dim(traj.points[0].shape());
        let inputs: Vec<Vec<f64>> = (0..traj.len()).map(|k| psn_input(traj, k)).collect();
        for k in (context - 1..traj.len()).step_by(stride.max(1)) {
            let mut target_v = vec![0.0; d];
            for (i, v) in channels
                .indices(d)
                .into_iter()
                .zip(data_velocity(traj, k, channels)?)
            {
                target_v[i] = v;
            }
            out.push(FlowMatchSample {
                context: inputs[k + 1 - context..=k].to_vec(),
                target_v,
                target_p0: traj.points[k].p0,
                dt: traj.dt,
            });
        }
    }
    Ok(out)
}

fn psn_sample_loss(
    params: &PsnParams,
    tape: &mut Tape,
    vars: &<PsnParams as Model>::Vars,
    s: &FlowMatchSample,
    through_midpoint: bool,
) -> Result<Var> {
    let t = s.context.len();
    let inputs: Vec<Var> = s.context[..t - 1]
        .iter()
        .map(|c| tape.constant(c))
        .collect();
    let h = params.final_hidden_tape(tape, vars, &inputs);
    let z = tape.constant(&s.context[t - 1]);
    let v = if through_midpoint {
        let next = psn_step_tape(params, tape, vars, h, z, s.dt, MidpointSolver::default())?;
        let inc = tape.sub(next, z);
        tape.scale(inc, 1.0 / s.dt)
    } else {
        params.head_tape(tape, vars, z, h)
    };
    let target = tape.constant(&s.target_v);
    let r = tape.sub(v, target);
    Ok(tape.sum_sq(r))
}

/// Loss and gradient of a batch; failed elements are dropped from the mean.
struct BatchResult {
    loss: f64,
    grad: Option<Vec<f64>>,
    used: usize,
    dropped: usize,
}

fn reduce(results: Vec<Result<(f64, Vec<f64>)>>) -> BatchResult {
    let mut loss = 0.0;
    let mut grad: Option<Vec<f64>> = None;
    let (mut used, mut dropped) = (0, 0);
    for r in results {
        match r {
            Ok((l, g)) if l.is_finite() && g.iter().all(|x| x.is_finite()) => {
                loss += l;
                match grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => grad = Some(g),
                }
                used += 1;
            }
            _ => dropped += 1,
        }
    }
    if used > 0 {
        let inv = 1.0 / used as f64;
        loss *= inv;
        if let Some(g) = grad.as_mut() {
            g.iter_mut().for_each(|x| *x *= inv);
        }
    }
    BatchResult {
        loss,
        grad,
        used,
        dropped,
    }
}

/// Mean over the batch of `‖v* - v_pred‖²`.
pub fn flow_matching_loss(
    params: &PsnParams,
    batch: &[FlowMatchSample],
    through_midpoint: bool,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let l = psn_sample_loss(params, &mut tape, &vars, s, through_midpoint)?;
        let v = tape.scalar(l);
        if !v.is_finite() {
            return Err(Error::non_finite("flow-matching prediction"));
        }
        total += v;
    }
    Ok(total / batch.len() as f64)
}

/// Flow-matching loss and its gradient, per-sample work distributed by `exec`.
pub fn flow_matching_grad(
    params: &PsnParams,
    batch: &[FlowMatchSample],
    through_midpoint: bool,
    exec: Exec,
) -> Result<(f64, PsnParams)> {
    let r = flow_batch(params, batch, through_midpoint, exec);
    match r.grad {
        Some(g) if r.dropped == 0 => Ok((r.loss, params.with_flat(&g))),
        _ => Err(Error::non_finite("flow-matching loss")),
    }
}

fn flow_batch(
    params: &PsnParams,
    batch: &[FlowMatchSample],
    through_midpoint: bool,
    exec: Exec,
) -> BatchResult {
    reduce(par::map(exec, batch, |s| {
        let (l, g) = param_gradients(params, |tape, vars| {
            psn_sample_loss(params, tape, vars, s, through_midpoint)
        })?;
        Ok((l, g.to_flat()))
    }))
}

/// A lifted state and its successor, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionPair {
    pub z: Vec<f64>,
    pub target: Vec<f64>,
    pub dt: f64,
}

/// Consecutive pairs `(z_k, z_{k+1})` at every `stride`-th step.
pub fn prediction_pairs(trajs: &[LiftedTrajectory], stride: usize) -> Vec<PredictionPair> {
    let mut out = Vec::new();
    for traj in trajs {
        for k in (0..traj.len().saturating_sub(1)).step_by(stride.max(1)) {
            out.push(PredictionPair {
                z: traj.points[k].flatten(),
                target: traj.points[k + 1].flatten(),
                dt: traj.dt,
            });
        }
    }
    out
}

/// Mean over pairs of `‖S(z_t) - z_{t+Δ}‖²`.
pub fn prediction_loss(params: &SympNetParams, pairs: &[PredictionPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        let pred = sympnet_step_flat(params, &p.z, p.dt)?;
        if pred.len() != p.target.len() {
            return Err(Error::Dimension(
                "prediction and target lengths differ".into(),
            ));
        }
        total += pred
            .iter()
            .zip(&p.target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(total / pairs.len() as f64)
}

pub fn prediction_grad(
    params: &SympNetParams,
    pairs: &[PredictionPair],
    exec: Exec,
) -> Result<(f64, SympNetParams)> {
    let r = prediction_batch(params, pairs, exec);
    match r.grad {
        Some(g) if r.dropped == 0 => Ok((r.loss, params.with_flat(&g))),
        _ => Err(Error::non_finite("prediction loss")),
    }
}

fn prediction_batch(params: &SympNetParams, pairs: &[PredictionPair], exec: Exec) -> BatchResult {
    reduce(par::map(exec, pairs, |p| {
        if p.z.len() != params.dim() || p.target.len() != params.dim() {
            return Err(Error::Dimension("pair does not match the SympNet".into()));
        }
        let (l, g) = param_gradients(params, |tape, vars| {
            let z = tape.constant(&p.z);
            let out = sympnet_tape(params, tape, vars, z, p.dt);
            let target = tape.constant(&p.target);
            let r = tape.sub(out, target);
            Ok(tape.sum_sq(r))
        })?;
        Ok((l, g.to_flat()))
    }))
}

/// Seeded split of `n` trajectory indices into training and validation sets.
/// With fewer than two trajectories both sets are the full list.
pub fn split_by_trajectory(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 {
        return (idx.clone(), idx);
    }
    idx.shuffle(&mut seeded_rng(seed));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Minibatch Adam with best-validation selection.
fn fit<M, S>(
    init: M,
    train: &[S],
    val: &[S],
    cfg: &TrainConfig,
    rng_seed: u64,
    batch: impl Fn(&M, &[S]) -> BatchResult,
) -> Result<TrainReport<M>>
where
    M: Model,
    S: Clone,
{
    if train.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let start = Instant::now();
    let mut rng = seeded_rng(rng_seed);
    let mut params = init;
    let mut state = OptimizerState::new(params.n_params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, params.clone(), 0);
    let mut skipped = 0;
    let val_loss = |p: &M| -> f64 {
        let r = batch(p, val);
        if r.used == 0 {
            f64::INFINITY
        } else {
            r.loss
        }
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut used) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<S> = chunk.iter().map(|&i| train[i].clone()).collect();
            let r = batch(&params, &samples);
            skipped += r.dropped;
            let Some(g) = r.grad else { continue };
            params = params.with_flat(&adam_step(&params.to_flat(), &g, &mut state, cfg)?);
            loss_sum += r.loss * r.used as f64;
            used += r.used;
        }
        if used == 0 {
            return Err(Error::non_finite(format!("every batch of epoch {epoch}")));
        }
        let train_loss = loss_sum / used as f64;
        let v = if val.is_empty() {
            train_loss
        } else {
            val_loss(&params)
        };
        if v < best.0 {
            best = (v, params.clone(), epoch);
        }
        history.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss: v,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    if cfg.epochs == 0 {
        best.1 = params;
    }
    Ok(TrainReport {
        params: best.1,
        history,
        best_epoch: best.2,
        skipped,
    })
}

/// Trains the encoder on the flow-matching objective.
pub fn train_psn(
    dataset: &[LiftedTrajectory],
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<TrainReport<PsnParams>> {
    cfg.validate().map_err(Error::Config)?;
    let first = dataset
        .iter()
        .find(|t| !t.is_empty())
        .ok_or_else(|| Error::Invalid("empty dataset".into()))?;
    let d = psn_input_dim(first.points[0].shape());
    let (tr, va) = split_by_trajectory(dataset.len(), cfg.val_fraction, cfg.seed);
    let build = |idx: &[usize]| {
        flow_samples(
            &pick(dataset, idx),
            cfg.context,
            cfg.channels,
            cfg.sample_stride,
        )
    };
    let (train, val) = (build(&tr)?, build(&va)?);
    let init = PsnParams::init(d, hidden, cfg.channels, &mut seeded_rng(cfg.seed));
    fit(init, &train, &val, cfg, cfg.seed.wrapping_add(1), |p, b| {
        flow_batch(p, b, cfg.through_midpoint, cfg.exec)
    })
}

/// Source of the clock momentum fed to the SympNet.
#[derive(Clone, Copy, Debug)]
pub enum P0Source<'a> {
    /// Ground-truth gauge value.
    Analytic,
    /// Estimated by a frozen encoder with the given context length.
    Psn {
        params: &'a PsnParams,
        context: usize,
    },
}

/// Trains the SympNet on one-step prediction. The encoder, when supplied,
/// is only read.
pub fn train_sympnet(
    dataset: &[LiftedTrajectory],
    source: P0Source<'_>,
    modules: usize,
    width: usize,
    cfg: &TrainConfig,
) -> Result<TrainReport<SympNetParams>> {
    cfg.validate().map_err(Error::Config)?;
    let first = dataset
        .iter()
        .find(|t| !t.is_empty())
        .ok_or_else(|| Error::Invalid("empty dataset".into()))?;
    let shape = first.points[0].shape();
    if shape.n_q != shape.n_p {
        return Err(Error::Dimension("SympNet needs n_q == n_p".into()));
    }
    let (tr, va) = split_by_trajectory(dataset.len(), cfg.val_fraction, cfg.seed);
    let build = |idx: &[usize]| -> Result<Vec<PredictionPair>> {
        let trajs = pick(dataset, idx);
        match source {
            P0Source::Analytic => Ok(prediction_pairs(&trajs, cfg.sample_stride)),
            P0Source::Psn { params, context } => {
                let mut pairs = Vec::new();
                for traj in &trajs {
                    let est = infer_p0(params, traj, context)?;
                    let p0i = shape.p0_index();
                    for k in (est.start..traj.len().saturating_sub(1)).step_by(cfg.sample_stride) {
                        let mut z = traj.points[k].flatten();
                        z[p0i] = est.at(k);
                        pairs.push(PredictionPair {
                            z,
                            target: traj.points[k + 1].flatten(),
                            dt: traj.dt,
                        });
                    }
                }
                Ok(pairs)
            }
        }
    };
    let (train, val) = (build(&tr)?, build(&va)?);
    let scaling = CanonicalScaling::fit(shape.positions(), train.iter().map(|p| p.z.as_slice()));
    let init = SympNetParams::init(shape.positions(), modules, width, &mut seeded_rng(cfg.seed))
        .with_scaling(scaling);
    fit(init, &train, &val, cfg, cfg.seed.wrapping_add(1), |p, b| {
        prediction_batch(p, b, cfg.exec)
    })
}

/// Encoder estimate of `p0` along a trajectory, from step `start = T-1` on.
#[derive(Clone, Debug, PartialEq)]
pub struct P0Estimate {
    pub start: usize,
    pub values: Vec<f64>,
}

impl P0Estimate {
    pub fn at(&self, k: usize) -> f64 {
        self.values[k - self.start]
    }
}

/// Runs the encoder flow along `traj`. The gap `p0 - p_ctrl` is anchored to
/// its gauge value at step `T-1` and then advanced by the implicit-midpoint
/// increments of the masked slot; the estimate is `p_ctrl + gap`.
pub fn infer_p0(psn: &PsnParams, traj: &LiftedTrajectory, context: usize) -> Result<P0Estimate> {
    if context < 1 || traj.len() < context {
        return Err(Error::Invalid(format!(
            "trajectory of {} samples is shorter than the context {context}",
            traj.len()
        )));
    }
    let start = context - 1;
    let inputs: Vec<Vec<f64>> = (0..traj.len()).map(|k| psn_input(traj, k)).collect();
    let mut gap = traj.points[start].p0 - traj.p_ctrl[start];
    let mut values = Vec::with_capacity(traj.len() - start);
    values.push(traj.points[start].p0);
    for k in start..traj.len() - 1 {
        let ctx = &inputs[k + 1 - context..=k];
        let next = psn_step(psn, ctx, &inputs[k], traj.dt, MidpointSolver::default())
            .map_err(|e| e.at_step(k))?;
        gap += next[1] - inputs[k][1];
        values.push(traj.p_ctrl[k + 1] + gap);
    }
    Ok(P0Estimate { start, values })
}

/// Held-out accuracy of the encoder's `p0` estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct P0Metrics {
    pub rmse: f64,
    pub max_abs_error: f64,
    /// Standard deviation of the ground-truth `p0` over the scored samples.
    pub std: f64,
    /// RMSE of the best single constant (the mean), equal to `std`.
    pub constant_rmse: f64,
    /// RMSE of holding each trajectory's anchor value constant.
    pub anchored_constant_rmse: f64,
    pub samples: usize,
}

pub fn evaluate_p0(
    psn: &PsnParams,
    trajs: &[LiftedTrajectory],
    context: usize,
    exec: Exec,
) -> Result<P0Metrics> {
    let estimates: Vec<Result<P0Estimate>> = par::map(exec, trajs, |t| infer_p0(psn, t, context));
    let (mut se, mut max_err, mut se_anchor) = (0.0, 0.0f64, 0.0);
    let mut truth = Vec::new();
    for (traj, est) in trajs.iter().zip(estimates) {
        let est = est?;
        let anchor = traj.points[est.start].p0;
        for (i, &v) in est.values.iter().enumerate() {
            let p0 = traj.points[est.start + i].p0;
            se += (v - p0).powi(2);
            se_anchor += (anchor - p0).powi(2);
            max_err = max_err.max((v - p0).abs());
            truth.push(p0);
        }
    }
    let n = truth.len();
    if n == 0 {
        return Err(Error::Invalid("no samples to score".into()));
    }
    let mean = truth.iter().sum::<f64>() / n as f64;
    let std = (truth.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    Ok(P0Metrics {
        rmse: (se / n as f64).sqrt(),
        max_abs_error: max_err,
        std,
        constant_rmse: std,
        anchored_constant_rmse: (se_anchor / n as f64).sqrt(),
        samples: n,
    })
}

/// One-step map on flattened lifted states.
pub trait StepPredictor: Sync {
    fn step_flat(&self, z: &[f64], dt: f64) -> Result<Vec<f64>>;
}

impl StepPredictor for SympNetParams {
    fn step_flat(&self, z: &[f64], dt: f64) -> Result<Vec<f64>> {
        sympnet_step_flat(self, z, dt)
    }
}

/// Least-squares affine one-step map `z' = A z + c`. Not symplectic in general.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinePredictor {
    pub a: DMatrix<f64>,
    pub c: Vec<f64>,
}

impl AffinePredictor {
    /// Minimum-norm least-squares fit over the pairs.
    pub fn fit(pairs: &[PredictionPair]) -> Result<Self> {
        let n = pairs
            .first()
            .map(|p| p.z.len())
            .ok_or_else(|| Error::Invalid("no pairs to fit".into()))?;
        let x = DMatrix::from_fn(
            pairs.len(),
            n + 1,
            |i, j| if j < n { pairs[i].z[j] } else { 1.0 },
        );
        let y = DMatrix::from_fn(pairs.len(), n, |i, j| pairs[i].target[j]);
        let svd = x.svd(true, true);
        let w = svd
            .solve(&y, 1e-12)
            .map_err(|e| Error::Invalid(format!("affine fit: {e}")))?;
        let a = w.rows(0, n).transpose();
        let c = w.row(n).iter().copied().collect();
        Ok(Self { a, c })
    }
}

impl StepPredictor for AffinePredictor {
    fn step_flat(&self, z: &[f64], _dt: f64) -> Result<Vec<f64>> {
        if z.len() != self.c.len() {
            return Err(Error::Dimension("affine predictor input".into()));
        }
        let out = &self.a * nalgebra::DVector::from_column_slice(z);
        Ok(out.iter().zip(&self.c).map(|(a, b)| a + b).collect())
    }
}

/// Metrics of one predicted window against ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutMetrics {
    pub p0_rmse: f64,
    pub p0_max_error: f64,
    /// RMSE of every flattened lifted coordinate over the horizon.
    pub coord_rmse: Vec<f64>,
    /// `max_k |H̃_k - H̃_0|` along the prediction.
    pub hamiltonian_drift: f64,
    /// `max_k |φ(q_k)|` along the prediction.
    pub constraint_drift: f64,
    /// `max_k |p0 + H + λ·φ|` along the prediction.
    pub gauge_residual: f64,
    pub predicted: Vec<LiftedPoint>,
    pub actual: Vec<LiftedPoint>,
}

/// Restores the algebraic part of the gauge on a predicted point: `q0 = t`,
/// `π = 0`, and `λ` from multiplier elimination at the predicted `(q, p)`.
pub fn reimpose_gauge(
    z: &mut LiftedPoint,
    t: f64,
    sys: &dyn MechanicalSystem,
    u: &[f64],
) -> Result<()> {
    z.q0 = t;
    z.pi.iter_mut().for_each(|x| *x = 0.0);
    if !z.lambda.is_empty() {
        z.lambda = systems::constraint_multipliers(sys, &z.q, &z.p, u)?
            .as_slice()
            .to_vec();
    }
    Ok(())
}

/// Predicts `horizon` steps from step `k0` of `traj`. The starting `p0` is
/// `p0_init` when given (e.g. an encoder estimate) and the gauge value otherwise.
pub fn evaluate_rollout<P: StepPredictor + ?Sized>(
    predictor: &P,
    p0_init: Option<f64>,
    traj: &LiftedTrajectory,
    k0: usize,
    horizon: usize,
    sys: &dyn MechanicalSystem,
) -> Result<RolloutMetrics> {
    if horizon == 0 || k0 + horizon >= traj.len() {
        return Err(Error::Invalid(format!(
            "horizon {horizon} from step {k0} exceeds a {}-sample trajectory",
            traj.len()
        )));
    }
    let shape = traj.points[k0].shape();
    let mut z = traj.points[k0].clone();
    if let Some(p0) = p0_init {
        z.p0 = p0;
    }
    let mut predicted = vec![z.clone()];
    for k in k0..k0 + horizon {
        let next = predictor
            .step_flat(&z.flatten(), traj.dt)
            .map_err(|e| e.at_step(k))?;
        let mut next = LiftedPoint::from_flat(&next, shape)?;
        reimpose_gauge(&mut next, traj.time(k + 1), sys, &traj.controls[k + 1])
            .map_err(|e| e.at_step(k + 1))?;
        if !next.is_finite() {
            return Err(Error::non_finite("predicted state").at_step(k + 1));
        }
        predicted.push(next.clone());
        z = next;
    }
    let actual: Vec<LiftedPoint> = traj.points[k0..=k0 + horizon].to_vec();
    let dim = shape.dim();
    let mut se = vec![0.0; dim];
    for (p, a) in predicted[1..].iter().zip(&actual[1..]) {
        for (i, (x, y)) in p.flatten().iter().zip(a.flatten()).enumerate() {
            se[i] += (x - y).powi(2);
        }
    }
    let coord_rmse: Vec<f64> = se.iter().map(|s| (s / horizon as f64).sqrt()).collect();
    let p0i = shape.p0_index();
    let p0_max_error = predicted[1..]
        .iter()
        .zip(&actual[1..])
        .map(|(p, a)| (p.p0 - a.p0).abs())
        .fold(0.0, f64::max);
    let h_ext: Vec<f64> = predicted
        .iter()
        .map(|p| extended_hamiltonian(p, sys))
        .collect::<Result<_>>()?;
    let hamiltonian_drift = h_ext
        .iter()
        .map(|h| (h - h_ext[0]).abs())
        .fold(0.0, f64::max);
    let gauge_residual = h_ext.iter().map(|h| h.abs()).fold(0.0, f64::max);
    let constraint_drift = predicted
        .iter()
        .map(|p| sys.constraints(&p.q).amax())
        .fold(0.0, f64::max);
    Ok(RolloutMetrics {
        p0_rmse: coord_rmse[p0i],
        p0_max_error,
        coord_rmse,
        hamiltonian_drift,
        constraint_drift,
        gauge_residual,
        predicted,
        actual,
    })
}

/// Pooled rollout metrics over several windows.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSummary {
    pub windows: usize,
    /// Root of the mean squared error over all windows, per coordinate.
    pub coord_rmse: Vec<f64>,
    /// `max - min` of each coordinate over the scored ground truth.
    pub coord_range: Vec<f64>,
    pub p0_rmse: f64,
    pub p0_max_error: f64,
    pub hamiltonian_drift: f64,
    pub constraint_drift: f64,
    pub gauge_residual: f64,
    /// `max |H|` over the scored ground truth.
    pub max_energy: f64,
}

impl RolloutSummary {
    pub fn from_windows(windows: &[RolloutMetrics], sys: &dyn MechanicalSystem) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Invalid("no rollout windows".into()))?;
        let dim = first.coord_rmse.len();
        let mut mse = vec![0.0; dim];
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        let mut max_energy = 0.0f64;
        for w in windows {
            for (m, r) in mse.iter_mut().zip(&w.coord_rmse) {
                *m += r * r / windows.len() as f64;
            }
            for a in &w.actual {
                for (i, x) in a.flatten().into_iter().enumerate() {
                    lo[i] = lo[i].min(x);
                    hi[i] = hi[i].max(x);
                }
                max_energy = max_energy.max(systems::hamiltonian(sys, &a.q, &a.p)?.abs());
            }
        }
        let max = |f: fn(&RolloutMetrics) -> f64| windows.iter().map(f).fold(0.0, f64::max);
        let p0i = first.predicted[0].shape().p0_index();
        let coord_rmse: Vec<f64> = mse.iter().map(|m| m.sqrt()).collect();
        Ok(Self {
            windows: windows.len(),
            p0_rmse: coord_rmse[p0i],
            coord_rmse,
            coord_range: hi.iter().zip(&lo).map(|(h, l)| h - l).collect(),
            p0_max_error: max(|w| w.p0_max_error),
            hamiltonian_drift: max(|w| w.hamiltonian_drift),
            constraint_drift: max(|w| w.constraint_drift),
            gauge_residual: max(|w| w.gauge_residual),
            max_energy,
        })
    }
}

/// Frozen-encoder + predictor rollouts of length `horizon` starting at steps
/// `T-1, T-1+horizon, …` of each trajectory, with the encoder supplying `p0`
/// at every window start.
pub fn rollout_windows<P: StepPredictor + ?Sized>(
    predictor: &P,
    psn: Option<(&PsnParams, usize)>,
    trajs: &[LiftedTrajectory],
    horizon: usize,
    max_windows_per_traj: usize,
    sys: &dyn MechanicalSystem,
    exec: Exec,
) -> Result<Vec<RolloutMetrics>> {
    let per_traj: Vec<Result<Vec<RolloutMetrics>>> = par::map(exec, trajs, |traj| {
        let (est, start) = match psn {
            Some((params, context)) => {
                let est = infer_p0(params, traj, context)?;
                let start = est.start;
                (Some(est), start)
            }
            None => (None, 0),
        };
        let mut out = Vec::new();
        let mut k0 = start;
        while k0 + horizon < traj.len() && out.len() < max_windows_per_traj {
            let p0 = est.as_ref().map(|e| e.at(k0));
            out.push(evaluate_rollout(predictor, p0, traj, k0, horizon, sys)?);
            k0 += horizon;
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for r in per_traj {
        all.extend(r?);
    }
    Ok(all)
}
