//! Vector-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints. Nodes carry whole vectors (or row-major matrices), so a recurrent
//! network step is a few dozen nodes rather than thousands of scalar ones.

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a matrix leaf on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatVar {
    var: Var,
    rows: usize,
    cols: usize,
}

impl MatVar {
    pub fn var(&self) -> Var {
        self.var
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatVec {
        w: usize,
        x: usize,
        rows: usize,
        cols: usize,
    },
    MatTVec {
        w: usize,
        x: usize,
        rows: usize,
        cols: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    OneMinus(usize),
    SumSq(usize),
    Slice {
        x: usize,
        start: usize,
    },
    Concat(Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node reached from the loss.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Vec<f64> {
        let g = &self.grads[v.0];
        if g.is_empty() {
            vec![0.0; self.sizes[v.0]]
        } else {
            g.clone()
        }
    }

    pub fn get_mat(&self, m: MatVar) -> Mat {
        Mat::from_rows(m.rows, m.cols, self.get(m.var))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: &[f64]) -> Var {
        self.nodes.push(Node {
            value: value.to_vec(),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, value: &[f64]) -> Var {
        self.nodes.push(Node {
            value: value.to_vec(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_mat(&mut self, m: &Mat) -> MatVar {
        MatVar {
            var: self.param(&m.data),
            rows: m.rows,
            cols: m.cols,
        }
    }

    pub fn constant_mat(&mut self, m: &Mat) -> MatVar {
        MatVar {
            var: self.constant(&m.data),
            rows: m.rows,
            cols: m.cols,
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// `W x`.
    pub fn matvec(&mut self, w: MatVar, x: Var) -> Var {
        let (rows, cols) = (w.rows, w.cols);
        let wv = &self.nodes[w.var.0].value;
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), cols, "matvec shape");
        let out = (0..rows)
            .map(|i| {
                let row = &wv[i * cols..(i + 1) * cols];
                row.iter().zip(xv).map(|(a, b)| a * b).sum()
            })
            .collect();
        self.push(
            out,
            Op::MatVec {
                w: w.var.0,
                x: x.0,
                rows,
                cols,
            },
            &[w.var.0, x.0],
        )
    }

    /// `Wᵀ x`.
    pub fn matvec_t(&mut self, w: MatVar, x: Var) -> Var {
        let (rows, cols) = (w.rows, w.cols);
        let wv = &self.nodes[w.var.0].value;
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), rows, "matvec_t shape");
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            let xi = xv[i];
            if xi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(&wv[i * cols..(i + 1) * cols]) {
                *o += a * xi;
            }
        }
        self.push(
            out,
            Op::MatTVec {
                w: w.var.0,
                x: x.0,
                rows,
                cols,
            },
            &[w.var.0, x.0],
        )
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.len(), bv.len(), "elementwise shape");
        av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes[a.0].value.iter().map(|x| f(*x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| c * x);
        self.push(v, Op::Scale(a.0, c), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a.0), &[a.0])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| 1.0 - x);
        self.push(v, Op::OneMinus(a.0), &[a.0])
    }

    /// Scalar `Σ aᵢ²`.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().map(|x| x * x).sum();
        self.push(vec![s], Op::SumSq(a.0), &[a.0])
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0].value[start..start + len].to_vec();
        self.push(v, Op::Slice { x: a.0, start }, &[a.0])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let v = parts
            .iter()
            .flat_map(|p| self.nodes[p.0].value.iter().copied())
            .collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(v, Op::Concat(ids.clone()), &ids)
    }

    /// Sum of several nodes of equal length.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); n];
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar");
        grads[loss.0] = vec![1.0];
        for id in (0..=loss.0).rev() {
            if grads[id].is_empty() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[id]);
            match &self.nodes[id].op {
                Op::Leaf => {}
                &Op::MatVec { w, x, rows, cols } => {
                    if self.nodes[w].requires_grad {
                        let xv = &self.nodes[x].value;
                        let gw = acc(&mut grads[w], rows * cols);
                        for i in 0..rows {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for (dst, xj) in gw[i * cols..(i + 1) * cols].iter_mut().zip(xv) {
                                *dst += gi * xj;
                            }
                        }
                    }
                    if self.nodes[x].requires_grad {
                        let wv = &self.nodes[w].value;
                        let gx = acc(&mut grads[x], cols);
                        for i in 0..rows {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for (dst, a) in gx.iter_mut().zip(&wv[i * cols..(i + 1) * cols]) {
                                *dst += gi * a;
                            }
                        }
                    }
                }
                &Op::MatTVec { w, x, rows, cols } => {
                    // y_j = Σ_i W_ij x_i
                    if self.nodes[w].requires_grad {
                        let xv = &self.nodes[x].value;
                        let gw = acc(&mut grads[w], rows * cols);
                        for i in 0..rows {
                            let xi = xv[i];
                            for (dst, gj) in gw[i * cols..(i + 1) * cols].iter_mut().zip(&g) {
                                *dst += xi * gj;
                            }
                        }
                    }
                    if self.nodes[x].requires_grad {
                        let wv = &self.nodes[w].value;
                        let gx = acc(&mut grads[x], rows);
                        for i in 0..rows {
                            gx[i] += wv[i * cols..(i + 1) * cols]
                                .iter()
                                .zip(&g)
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                }
                &Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, &g, 1.0);
                    self.accumulate(&mut grads, b, &g, 1.0);
                }
                &Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, &g, 1.0);
                    self.accumulate(&mut grads, b, &g, -1.0);
                }
                &Op::Mul(a, b) => {
                    if self.nodes[a].requires_grad {
                        let bv = &self.nodes[b].value;
                        let ga = acc(&mut grads[a], g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    if self.nodes[b].requires_grad {
                        let av = &self.nodes[a].value;
                        let gb = acc(&mut grads[b], g.len());
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                }
                &Op::Scale(a, c) => self.accumulate(&mut grads, a, &g, c),
                &Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    let local: Vec<f64> =
                        (0..g.len()).map(|i| g[i] * y[i] * (1.0 - y[i])).collect();
                    self.accumulate(&mut grads, a, &local, 1.0);
                }
                &Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let local: Vec<f64> =
                        (0..g.len()).map(|i| g[i] * (1.0 - y[i] * y[i])).collect();
                    self.accumulate(&mut grads, a, &local, 1.0);
                }
                &Op::OneMinus(a) => self.accumulate(&mut grads, a, &g, -1.0),
                &Op::SumSq(a) => {
                    let av = &self.nodes[a].value;
                    let local: Vec<f64> = av.iter().map(|x| 2.0 * x * g[0]).collect();
                    self.accumulate(&mut grads, a, &local, 1.0);
                }
                &Op::Slice { x, start } => {
                    if self.nodes[x].requires_grad {
                        let len = self.nodes[x].value.len();
                        let gx = acc(&mut grads[x], len);
                        for (i, gi) in g.iter().enumerate() {
                            gx[start + i] += gi;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.len();
                        self.accumulate(&mut grads, p, &g[offset..offset + len], 1.0);
                        offset += len;
                    }
                }
            }
            // Leaves keep their adjoint; intermediates were taken above.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = g;
            }
        }
        Gradients {
            grads,
            sizes: self.nodes.iter().map(|n| n.value.len()).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Vec<f64>], target: usize, g: &[f64], c: f64) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let dst = acc(&mut grads[target], g.len());
        for (d, x) in dst.iter_mut().zip(g) {
            *d += c * x;
        }
    }
}

fn acc(slot: &mut Vec<f64>, len: usize) -> &mut [f64] {
    if slot.is_empty() {
        *slot = vec![0.0; len];
    }
    slot
}
