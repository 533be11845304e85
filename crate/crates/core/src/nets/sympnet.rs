//! Exactly-symplectic step predictor built from alternating gradient modules.
//!
//! An up module maps `(q, p) ↦ (q, p + dt·Kᵀ(a ⊙ tanh(Kq + b)))`; a low
//! module does the same with the roles of `q` and `p` exchanged. Each is the
//! time-`dt` flow of a Hamiltonian depending on one half of the state only,
//! so every composition preserves the canonical form.

use rand::Rng;

use super::{Model, NamedTensor, TensorReader};
use crate::autodiff::{Gradients, MatVar, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::LiftedPoint;
use crate::tensor::{all_finite, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModuleKind {
    Up,
    Low,
}

impl ModuleKind {
    /// Kinds alternate starting with `Up`.
    pub fn at(index: usize) -> Self {
        if index % 2 == 0 {
            ModuleKind::Up
        } else {
            ModuleKind::Low
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientModule {
    pub kind: ModuleKind,
    /// `width × N`.
    pub k: Mat,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl GradientModule {
    pub fn width(&self) -> usize {
        self.k.rows
    }

    /// `Kᵀ(a ⊙ tanh(K x + b))`.
    fn shear(&self, x: &[f64]) -> Vec<f64> {
        let mut kx = self.k.matvec(x);
        for ((v, a), b) in kx.iter_mut().zip(&self.a).zip(&self.b) {
            *v = a * (*v + b).tanh();
        }
        let mut out = vec![0.0; self.k.cols];
        for (i, s) in kx.iter().enumerate() {
            for (o, kij) in out.iter_mut().zip(self.k.row(i)) {
                *o += kij * s;
            }
        }
        out
    }

    /// Applies the module with step `dt` to `(q, p)` in place.
    fn apply(&self, q: &mut [f64], p: &mut [f64], dt: f64) {
        match self.kind {
            ModuleKind::Up => {
                let s = self.shear(q);
                p.iter_mut().zip(&s).for_each(|(x, d)| *x += dt * d);
            }
            ModuleKind::Low => {
                let s = self.shear(p);
                q.iter_mut().zip(&s).for_each(|(x, d)| *x += dt * d);
            }
        }
    }
}

fn module(
    kind: ModuleKind,
    q: &[f64],
    p: &[f64],
    k: &Mat,
    a: &[f64],
    b: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if q.len() != k.cols || p.len() != k.cols || a.len() != k.rows || b.len() != k.rows {
        return Err(Error::Dimension(format!(
            "module with K {}×{} cannot act on q,p of length {},{}",
            k.rows,
            k.cols,
            q.len(),
            p.len()
        )));
    }
    let m = GradientModule {
        kind,
        k: k.clone(),
        a: a.to_vec(),
        b: b.to_vec(),
    };
    let (mut q, mut p) = (q.to_vec(), p.to_vec());
    m.apply(&mut q, &mut p, 1.0);
    Ok((q, p))
}

/// `(q, p + Kᵀ(a ⊙ tanh(Kq + b)))`.
pub fn up_module(
    q: &[f64],
    p: &[f64],
    k: &Mat,
    a: &[f64],
    b: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    module(ModuleKind::Up, q, p, k, a, b)
}

/// `(q + Kᵀ(a ⊙ tanh(Kp + b)), p)`.
pub fn low_module(
    q: &[f64],
    p: &[f64],
    k: &Mat,
    a: &[f64],
    b: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    module(ModuleKind::Low, q, p, k, a, b)
}

/// Fixed affine change of coordinates wrapped around the modules:
/// `Qᵢ ↦ (Qᵢ - cᵢ)/sᵢ`, `Pᵢ ↦ (Pᵢ - dᵢ)·sᵢ/κ`. Its linear part satisfies
/// `DᵀJD = J/κ`, so conjugating a symplectic map by it stays symplectic.
/// Not trained.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalScaling {
    /// `2N` offsets `(c, d)`.
    pub shift: Vec<f64>,
    /// `N` position scales.
    pub scale: Vec<f64>,
    pub kappa: f64,
}

impl CanonicalScaling {
    pub fn identity(n: usize) -> Self {
        Self {
            shift: vec![0.0; 2 * n],
            scale: vec![1.0; n],
            kappa: 1.0,
        }
    }

    /// Centers every coordinate on the sample mean and scales positions to
    /// unit spread; `κ` is the geometric mean of the per-pair spread products
    /// over pairs whose momentum varies. Constant coordinates keep scale 1.
    pub fn fit<'a, I: IntoIterator<Item = &'a [f64]>>(n: usize, samples: I) -> Self {
        let samples: Vec<&[f64]> = samples.into_iter().collect();
        if samples.is_empty() {
            return Self::identity(n);
        }
        let count = samples.len() as f64;
        let mean: Vec<f64> = (0..2 * n)
            .map(|i| samples.iter().map(|z| z[i]).sum::<f64>() / count)
            .collect();
        // Two passes, so that constant coordinates get exactly zero spread.
        let sd: Vec<f64> = (0..2 * n)
            .map(|i| {
                let ss: f64 = samples.iter().map(|z| (z[i] - mean[i]).powi(2)).sum();
                (ss / count).sqrt()
            })
            .collect();
        let tiny = |i: usize| !(sd[i] > 1e-12 * (1.0 + mean[i].abs()));
        let scale: Vec<f64> = (0..n).map(|i| if tiny(i) { 1.0 } else { sd[i] }).collect();
        let logs: Vec<f64> = (0..n)
            .filter(|&i| !tiny(n + i))
            .map(|i| (scale[i] * sd[n + i]).ln())
            .collect();
        let kappa = if logs.is_empty() {
            1.0
        } else {
            (logs.iter().sum::<f64>() / logs.len() as f64).exp()
        };
        Self {
            shift: mean,
            scale,
            kappa,
        }
    }

    fn factors(&self) -> Vec<f64> {
        let n = self.scale.len();
        (0..2 * n)
            .map(|i| {
                if i < n {
                    1.0 / self.scale[i]
                } else {
                    self.scale[i - n] / self.kappa
                }
            })
            .collect()
    }

    pub fn forward(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.shift)
            .zip(self.factors())
            .map(|((x, c), f)| (x - c) * f)
            .collect()
    }

    pub fn backward(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.shift)
            .zip(self.factors())
            .map(|((x, c), f)| x / f + c)
            .collect()
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.shift.len() != 2 * n || self.scale.len() != n {
            return Err(Error::Dimension(format!(
                "scaling has {} offsets and {} scales, expected {} and {n}",
                self.shift.len(),
                self.scale.len(),
                2 * n
            )));
        }
        if !all_finite(&self.shift)
            || !self.scale.iter().all(|s| s.is_finite() && *s > 0.0)
            || !(self.kappa > 0.0 && self.kappa.is_finite())
        {
            return Err(Error::Invalid(
                "scaling must be finite with positive scales".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SympNetParams {
    /// Number of position-like coordinates; the map acts on `R^{2N}`.
    pub n: usize,
    pub modules: Vec<GradientModule>,
    pub scaling: CanonicalScaling,
}

pub struct SympNetVars {
    modules: Vec<(MatVar, Var, Var)>,
    shift: Var,
    factors: Var,
    inv_factors: Var,
}

impl SympNetParams {
    pub fn init<R: Rng>(n: usize, n_modules: usize, width: usize, rng: &mut R) -> Self {
        let a_bound = 0.1 / (width as f64).sqrt();
        let modules = (0..n_modules)
            .map(|i| GradientModule {
                kind: ModuleKind::at(i),
                k: Mat::uniform_fan_in(width, n, rng),
                a: (0..width)
                    .map(|_| rng.gen_range(-a_bound..=a_bound))
                    .collect(),
                b: vec![0.0; width],
            })
            .collect();
        Self {
            n,
            modules,
            scaling: CanonicalScaling::identity(n),
        }
    }

    pub fn with_scaling(mut self, scaling: CanonicalScaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn dim(&self) -> usize {
        2 * self.n
    }

    pub fn validate(&self) -> Result<()> {
        self.scaling.validate(self.n)?;
        for (i, m) in self.modules.iter().enumerate() {
            if m.kind != ModuleKind::at(i) {
                return Err(Error::Dimension(format!(
                    "module {i} breaks the up/low alternation"
                )));
            }
            if m.k.cols != self.n
                || m.a.len() != m.width()
                || m.b.len() != m.width()
                || m.width() == 0
            {
                return Err(Error::Dimension(format!(
                    "module {i}: K is {}×{}, a has {}, b has {}; expected width×{}",
                    m.k.rows,
                    m.k.cols,
                    m.a.len(),
                    m.b.len(),
                    self.n
                )));
            }
            if !m.k.is_finite() || !all_finite(&m.a) || !all_finite(&m.b) {
                return Err(Error::non_finite(format!("module {i} parameters")));
            }
        }
        Ok(())
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "SympNet acts on {} coordinates, got {}",
                self.dim(),
                z.len()
            )));
        }
        Ok(())
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let r = TensorReader::new(tensors);
        let count = tensors.iter().filter(|t| t.name.ends_with(".K")).count();
        if count == 0 {
            return Err(Error::CorruptArchive(
                "SympNet archive holds no modules".into(),
            ));
        }
        let mut modules = Vec::with_capacity(count);
        let mut n = None;
        for i in 0..count {
            let k = r.matrix(&format!("module{i}.K"), None, n)?;
            n = Some(k.cols);
            let width = k.rows;
            modules.push(GradientModule {
                kind: ModuleKind::at(i),
                a: r.vector(&format!("module{i}.a"), width)?,
                b: r.vector(&format!("module{i}.b"), width)?,
                k,
            });
        }
        let n = n.unwrap_or(0);
        let kappa = r.vector("scaling.kappa", 1)?[0];
        let params = Self {
            n,
            modules,
            scaling: CanonicalScaling {
                shift: r.vector("scaling.shift", 2 * n)?,
                scale: r.vector("scaling.scale", n)?,
                kappa,
            },
        };
        params.validate()?;
        Ok(params)
    }
}

/// Applies the modules in order with step `dt` to a flat `(Q, P)` vector.
pub fn sympnet_step_flat(params: &SympNetParams, z: &[f64], dt: f64) -> Result<Vec<f64>> {
    params.check_len(z)?;
    let y = params.scaling.forward(z);
    let (mut q, mut p) = (y[..params.n].to_vec(), y[params.n..].to_vec());
    for m in &params.modules {
        m.apply(&mut q, &mut p, dt);
    }
    q.extend(p);
    Ok(params.scaling.backward(&q))
}

/// One predictor step on a lifted point, in the fixed flattening order.
pub fn sympnet_step(params: &SympNetParams, z: &LiftedPoint, dt: f64) -> Result<LiftedPoint> {
    let shape = z.shape();
    if shape.n_q != shape.n_p || shape.positions() != params.n {
        return Err(Error::Dimension(format!(
            "lifted point with {} positions and {} momenta does not match SympNet N = {}",
            shape.positions(),
            1 + shape.n_p + shape.m,
            params.n
        )));
    }
    let out = sympnet_step_flat(params, &z.flatten(), dt)?;
    LiftedPoint::from_flat(&out, shape)
}

/// Explicit inverse of [`sympnet_step_flat`]: modules in reverse with `-dt`.
pub fn sympnet_inverse(params: &SympNetParams, z: &[f64], dt: f64) -> Result<Vec<f64>> {
    params.check_len(z)?;
    let y = params.scaling.forward(z);
    let (mut q, mut p) = (y[..params.n].to_vec(), y[params.n..].to_vec());
    for m in params.modules.iter().rev() {
        m.apply(&mut q, &mut p, -dt);
    }
    q.extend(p);
    Ok(params.scaling.backward(&q))
}

/// Differentiable version of [`sympnet_step_flat`].
pub fn sympnet_tape(
    params: &SympNetParams,
    tape: &mut Tape,
    vars: &SympNetVars,
    z: Var,
    dt: f64,
) -> Var {
    let n = params.n;
    let z = tape.sub(z, vars.shift);
    let z = tape.mul(z, vars.factors);
    let mut q = tape.slice(z, 0, n);
    let mut p = tape.slice(z, n, n);
    for (m, &(k, a, b)) in params.modules.iter().zip(&vars.modules) {
        let x = match m.kind {
            ModuleKind::Up => q,
            ModuleKind::Low => p,
        };
        let kx = tape.matvec(k, x);
        let pre = tape.add(kx, b);
        let act = tape.tanh(pre);
        let scaled = tape.mul(a, act);
        let s = tape.matvec_t(k, scaled);
        let ds = tape.scale(s, dt);
        match m.kind {
            ModuleKind::Up => p = tape.add(p, ds),
            ModuleKind::Low => q = tape.add(q, ds),
        }
    }
    let y = tape.concat(&[q, p]);
    let y = tape.mul(y, vars.inv_factors);
    tape.add(y, vars.shift)
}

impl Model for SympNetParams {
    type Vars = SympNetVars;

    fn register(&self, tape: &mut Tape, trainable: bool) -> SympNetVars {
        let modules = self
            .modules
            .iter()
            .map(|m| {
                if trainable {
                    (tape.param_mat(&m.k), tape.param(&m.a), tape.param(&m.b))
                } else {
                    (
                        tape.constant_mat(&m.k),
                        tape.constant(&m.a),
                        tape.constant(&m.b),
                    )
                }
            })
            .collect();
        let factors = self.scaling.factors();
        let inv: Vec<f64> = factors.iter().map(|f| 1.0 / f).collect();
        SympNetVars {
            modules,
            shift: tape.constant(&self.scaling.shift),
            factors: tape.constant(&factors),
            inv_factors: tape.constant(&inv),
        }
    }

    fn collect_gradient(&self, g: &Gradients, vars: &SympNetVars) -> Self {
        Self {
            n: self.n,
            modules: self
                .modules
                .iter()
                .zip(&vars.modules)
                .map(|(m, &(k, a, b))| GradientModule {
                    kind: m.kind,
                    k: g.get_mat(k),
                    a: g.get(a),
                    b: g.get(b),
                })
                .collect(),
            scaling: self.scaling.clone(),
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in &self.modules {
            out.extend(&m.k.data);
            out.extend(&m.a);
            out.extend(&m.b);
        }
        out
    }

    fn with_flat(&self, flat: &[f64]) -> Self {
        let mut offset = 0;
        let mut take = |len: usize| {
            let s = flat[offset..offset + len].to_vec();
            offset += len;
            s
        };
        let modules = self
            .modules
            .iter()
            .map(|m| GradientModule {
                kind: m.kind,
                k: Mat::from_rows(m.k.rows, m.k.cols, take(m.k.data.len())),
                a: take(m.a.len()),
                b: take(m.b.len()),
            })
            .collect();
        assert_eq!(offset, flat.len(), "flat parameter length");
        Self {
            n: self.n,
            modules,
            scaling: self.scaling.clone(),
        }
    }

    fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, m) in self.modules.iter().enumerate() {
            out.push(NamedTensor::matrix(format!("module{i}.K"), &m.k));
            out.push(NamedTensor::vector(format!("module{i}.a"), &m.a));
            out.push(NamedTensor::vector(format!("module{i}.b"), &m.b));
        }
        out.push(NamedTensor::vector("scaling.shift", &self.scaling.shift));
        out.push(NamedTensor::vector("scaling.scale", &self.scaling.scale));
        out.push(NamedTensor::vector("scaling.kappa", &[self.scaling.kappa]));
        out
    }
}
