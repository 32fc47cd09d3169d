//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to its [`Var`] handles in
//! insertion order. [`Graph::backward`] walks that record once in reverse,
//! accumulating adjoints additively where a value fans out. Graphs are cheap
//! and meant to be rebuilt for every forward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    /// `x · wᵀ` with `x: [B, in]`, `w: [out, in]`.
    Linear(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    WindowMean(Var, usize),
    Reshape(Var),
    Standardize {
        input: Var,
        inv_std: Vec<f64>,
    },
    WeightedSum {
        terms: Vec<Var>,
        weights: Var,
    },
    SelectRow(Var, usize),
    CrossEntropy {
        logits: Var,
        /// Row-wise `softmax(logits) - target`, already divided by the row count.
        residual: Tensor,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// The tape of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Adjoint of `var`, zeros of `like`'s shape when absent.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rows_of(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.as_rows().ok_or_else(|| Error::Shape {
        op,
        left: t.shape().to_vec(),
        right: vec![],
    })
}

fn window_bounds(i: usize, radius: usize, n: usize) -> (usize, usize) {
    (i.saturating_sub(radius), (i + radius + 1).min(n))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input (parameter or probe point).
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("graph input")?;
        Ok(self.push(Op::Leaf, value, true))
    }

    /// An input that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("graph constant")?;
        Ok(self.push(Op::Leaf, value, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let mut out = va.clone();
        out.axpy(1.0, vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let mut out = va.clone();
        out.axpy(-1.0, vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), out, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| c * v);
        let ng = self.needs(a);
        Ok(self.push(Op::Scale(a, c), out, ng))
    }

    /// Tensor times a rank-0 (or single-element) variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if vs.len() != 1 {
            return Err(Error::Shape {
                op: "mul_scalar",
                left: self.value(a).shape().to_vec(),
                right: vs.shape().to_vec(),
            });
        }
        let c = vs.item();
        let out = self.value(a).map(|v| c * v);
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(Op::MulScalar(a, s), out, ng))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = match (va.shape(), vb.shape()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => (0, 1, 0, 0),
        };
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, ng))
    }

    /// `x · wᵀ` for `x: [B, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (b, i, o, i2) = match (vx.shape(), vw.shape()) {
            ([b, i], [o, i2]) => (*b, *i, *o, *i2),
            _ => (0, 1, 0, 0),
        };
        if i != i2 {
            return Err(Error::Shape {
                op: "linear",
                left: vx.shape().to_vec(),
                right: vw.shape().to_vec(),
            });
        }
        let (xd, wd) = (vx.data(), vw.data());
        let mut out = vec![0.0; b * o];
        for r in 0..b {
            let xr = &xd[r * i..(r + 1) * i];
            for c in 0..o {
                let wr = &wd[c * i..(c + 1) * i];
                out[r * o + c] = xr.iter().zip(wr).map(|(p, q)| p * q).sum();
            }
        }
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Op::Linear(x, w), Tensor::new(vec![b, o], out)?, ng))
    }

    /// Adds a `[n]` bias to every row of a `[B, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let ok = matches!((vx.shape(), vb.shape()), ([_, n], [m]) if n == m);
        if !ok {
            return Err(Error::Shape {
                op: "add_bias",
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let n = vb.len();
        let mut out = vx.clone();
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            *v += vb.data()[j % n];
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBias(x, bias), out, ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(a);
        Ok(self.push(Op::Relu(a), out, ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        Ok(self.push(Op::Sigmoid(a), out, ng))
    }

    /// Softmax over the last dimension of a vector or each row of a matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = rows_of("softmax", va)?;
        if c == 0 {
            return Err(Error::invalid("softmax of an empty vector"));
        }
        let mut out = va.clone();
        for row in 0..r {
            softmax_in_place(&mut out.data_mut()[row * c..(row + 1) * c]);
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Softmax(a), out, ng))
    }

    /// Mean over a sliding feature window of half-width `radius`, per row.
    /// Windows are truncated at the borders (no padding in the average).
    pub fn window_mean(&mut self, a: Var, radius: usize) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = rows_of("window_mean", va)?;
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            let src = &va.data()[row * c..(row + 1) * c];
            for i in 0..c {
                let (lo, hi) = window_bounds(i, radius, c);
                out[row * c + i] = src[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            }
        }
        let ng = self.needs(a);
        let out = Tensor::new(va.shape().to_vec(), out)?;
        Ok(self.push(Op::WindowMean(a, radius), out, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), out, ng))
    }

    /// Per-feature standardization over the batch (rows) of a `[B, n]`
    /// matrix: `(x - mean) / sqrt(var + eps)`, biased variance.
    pub fn standardize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let va = self.value(a);
        let (b, n) = match va.shape() {
            [b, n] if *b > 0 => (*b, *n),
            s => {
                return Err(Error::Shape {
                    op: "standardize",
                    left: s.to_vec(),
                    right: vec![],
                })
            }
        };
        let d = va.data();
        let mut mean = vec![0.0; n];
        for r in 0..b {
            for j in 0..n {
                mean[j] += d[r * n + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; n];
        for r in 0..b {
            for j in 0..n {
                let e = d[r * n + j] - mean[j];
                var[j] += e * e;
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v / b as f64 + eps).sqrt())
            .collect();
        let mut out = vec![0.0; b * n];
        for r in 0..b {
            for j in 0..n {
                out[r * n + j] = (d[r * n + j] - mean[j]) * inv_std[j];
            }
        }
        let ng = self.needs(a);
        let out = Tensor::new(vec![b, n], out)?;
        Ok(self.push(Op::Standardize { input: a, inv_std }, out, ng))
    }

    /// `Σ_k weights[k] · terms[k]`; all terms share one shape and
    /// `weights` is a vector with one entry per term.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: Var) -> Result<Var> {
        let vw = self.value(weights);
        if vw.rank() != 1 || vw.len() != terms.len() || terms.is_empty() {
            return Err(Error::Shape {
                op: "weighted_sum",
                left: vec![terms.len()],
                right: vw.shape().to_vec(),
            });
        }
        let w = vw.data().to_vec();
        let mut out = Tensor::zeros(self.value(terms[0]).shape());
        for (k, &t) in terms.iter().enumerate() {
            let vt = self.value(t);
            same_shape("weighted_sum", &out, vt)?;
            out.axpy(w[k], vt);
        }
        let ng = self.needs(weights) || terms.iter().any(|&t| self.needs(t));
        Ok(self.push(
            Op::WeightedSum {
                terms: terms.to_vec(),
                weights,
            },
            out,
            ng,
        ))
    }

    /// Row `r` of a `[R, C]` matrix as a `[C]` vector.
    pub fn select_row(&mut self, m: Var, r: usize) -> Result<Var> {
        let vm = self.value(m);
        let (rows, _) = match vm.shape() {
            [rows, cols] => (*rows, *cols),
            s => {
                return Err(Error::Shape {
                    op: "select_row",
                    left: s.to_vec(),
                    right: vec![r],
                })
            }
        };
        if r >= rows {
            return Err(Error::invalid(format!("row {r} out of range for {rows} rows")));
        }
        let out = Tensor::vector(vm.row(r).to_vec());
        let ng = self.needs(m);
        Ok(self.push(Op::SelectRow(m, r), out, ng))
    }

    /// Mean over rows of `-yᵀ ln softmax(logits)`. `target` must be one-hot
    /// per row and shaped like `logits` (a `[C]` vector or `[B, C]`).
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let vl = self.value(logits);
        same_shape("cross_entropy", vl, target)?;
        let (r, c) = rows_of("cross_entropy", vl)?;
        if r == 0 || c == 0 {
            return Err(Error::invalid("cross_entropy on an empty batch"));
        }
        let mut loss = 0.0;
        let mut residual = vec![0.0; r * c];
        for row in 0..r {
            let y = &target.data()[row * c..(row + 1) * c];
            let hot = y.iter().filter(|&&v| v == 1.0).count();
            let cold = y.iter().filter(|&&v| v == 0.0).count();
            if hot != 1 || hot + cold != c {
                return Err(Error::invalid(format!("target row {row} is not one-hot")));
            }
            let z = &vl.data()[row * c..(row + 1) * c];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                let p = (z[j] - lse).exp();
                residual[row * c + j] = (p - y[j]) / r as f64;
                if y[j] == 1.0 {
                    loss += lse - z[j];
                }
            }
        }
        let residual = Tensor::new(vl.shape().to_vec(), residual)?;
        let ng = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, residual },
            Tensor::scalar(loss / r as f64),
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        Ok(self.push(Op::Sum(a), Tensor::scalar(s), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = va.sum() / va.len() as f64;
        let ng = self.needs(a);
        Ok(self.push(Op::Mean(a), Tensor::scalar(s), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let vl = self.value(loss);
        if vl.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: vl.shape().to_vec(),
                right: vec![],
            });
        }
        vl.check_finite("loss")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(vl.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("adjoint of node {idx}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &delta),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.map(|v| c * v)),
            Op::MulScalar(a, s) => {
                let c = self.value(s).item();
                if self.needs(a) {
                    self.accumulate(grads, a, g.map(|v| c * v));
                }
                if self.needs(s) {
                    let ds = g.dot(self.value(a));
                    let shape = self.value(s).shape().to_vec();
                    self.accumulate(grads, s, Tensor::new(shape, vec![ds])?);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.needs(a) {
                    // dA = dY · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g.data()[i * n + j] * vb.data()[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    self.accumulate(grads, a, Tensor::new(vec![m, k], da)?);
                }
                if self.needs(b) {
                    // dB = Aᵀ · dY
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = va.data()[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += a_ip * g.data()[i * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Linear(x, w) => {
                let (vx, vw) = (self.value(x), self.value(w));
                let (b, i) = (vx.shape()[0], vx.shape()[1]);
                let o = vw.shape()[0];
                let gd = g.data();
                if self.needs(x) {
                    // dX = dY · W
                    let mut dx = vec![0.0; b * i];
                    for r in 0..b {
                        let dxr = &mut dx[r * i..(r + 1) * i];
                        for c in 0..o {
                            let gv = gd[r * o + c];
                            if gv == 0.0 {
                                continue;
                            }
                            let wr = &vw.data()[c * i..(c + 1) * i];
                            for (d, wv) in dxr.iter_mut().zip(wr) {
                                *d += gv * wv;
                            }
                        }
                    }
                    self.accumulate(grads, x, Tensor::new(vec![b, i], dx)?);
                }
                if self.needs(w) {
                    // dW = dYᵀ · X
                    let mut dw = vec![0.0; o * i];
                    for r in 0..b {
                        let xr = &vx.data()[r * i..(r + 1) * i];
                        for c in 0..o {
                            let gv = gd[r * o + c];
                            if gv == 0.0 {
                                continue;
                            }
                            let dwr = &mut dw[c * i..(c + 1) * i];
                            for (d, xv) in dwr.iter_mut().zip(xr) {
                                *d += gv * xv;
                            }
                        }
                    }
                    self.accumulate(grads, w, Tensor::new(vec![o, i], dw)?);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, x, g.clone());
                if self.needs(bias) {
                    let n = self.value(bias).len();
                    let mut db = vec![0.0; n];
                    for (j, v) in g.data().iter().enumerate() {
                        db[j % n] += v;
                    }
                    self.accumulate(grads, bias, Tensor::vector(db));
                }
            }
            Op::Relu(a) => {
                let va = self.value(a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(va.data()) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                for (dv, &y) in d.data_mut().iter_mut().zip(out.data()) {
                    *dv *= y * (1.0 - y);
                }
                self.accumulate(grads, a, d);
            }
            Op::Softmax(a) => {
                let (r, c) = rows_of("softmax", out)?;
                let mut d = g.clone();
                for row in 0..r {
                    let y = &out.data()[row * c..(row + 1) * c];
                    let gr = &g.data()[row * c..(row + 1) * c];
                    let inner: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        d.data_mut()[row * c + j] = y[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::WindowMean(a, radius) => {
                let (r, c) = rows_of("window_mean", out)?;
                let mut d = Tensor::zeros(out.shape());
                for row in 0..r {
                    for i in 0..c {
                        let (lo, hi) = window_bounds(i, radius, c);
                        let share = g.data()[row * c + i] / (hi - lo) as f64;
                        for j in lo..hi {
                            d.data_mut()[row * c + j] += share;
                        }
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                self.accumulate(grads, a, g.clone().reshaped(shape)?);
            }
            Op::Standardize { input, ref inv_std } => {
                let (b, n) = (out.shape()[0], out.shape()[1]);
                let (gd, yd) = (g.data(), out.data());
                let mut sum_g = vec![0.0; n];
                let mut sum_gy = vec![0.0; n];
                for r in 0..b {
                    for j in 0..n {
                        sum_g[j] += gd[r * n + j];
                        sum_gy[j] += gd[r * n + j] * yd[r * n + j];
                    }
                }
                let bf = b as f64;
                let mut dx = vec![0.0; b * n];
                for r in 0..b {
                    for j in 0..n {
                        let k = r * n + j;
                        dx[k] = inv_std[j] / bf * (bf * gd[k] - sum_g[j] - yd[k] * sum_gy[j]);
                    }
                }
                self.accumulate(grads, input, Tensor::new(vec![b, n], dx)?);
            }
            Op::WeightedSum { ref terms, weights } => {
                let w = self.value(weights).data();
                for (k, &t) in terms.iter().enumerate() {
                    if self.needs(t) {
                        self.accumulate(grads, t, g.map(|v| w[k] * v));
                    }
                }
                if self.needs(weights) {
                    let dw: Vec<f64> = terms.iter().map(|&t| g.dot(self.value(t))).collect();
                    self.accumulate(grads, weights, Tensor::vector(dw));
                }
            }
            Op::SelectRow(m, r) => {
                if self.needs(m) {
                    let vm = self.value(m);
                    let c = vm.shape()[1];
                    let mut d = Tensor::zeros(vm.shape());
                    d.data_mut()[r * c..(r + 1) * c].copy_from_slice(g.data());
                    self.accumulate(grads, m, d);
                }
            }
            Op::CrossEntropy {
                logits,
                ref residual,
            } => {
                let s = g.item();
                self.accumulate(grads, logits, residual.map(|v| s * v));
            }
            Op::Sum(a) => {
                let s = g.item();
                let shape = self.value(a).shape().to_vec();
                self.accumulate(grads, a, Tensor::filled(&shape, s));
            }
            Op::Mean(a) => {
                let va = self.value(a);
                let s = g.item() / va.len() as f64;
                let shape = va.shape().to_vec();
                self.accumulate(grads, a, Tensor::filled(&shape, s));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Plain softmax of a slice, outside any graph.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, bv) in dst.iter_mut().zip(row) {
                *d += a_ip * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::vector(vec![3.0])).unwrap();
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2]") && msg.contains("[1]"), "{msg}");
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i3 = g.constant(Tensor::identity(3)).unwrap();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let x = g.constant(Tensor::matrix(3, 4, data.clone()).unwrap()).unwrap();
        let y = g.matmul(i3, x).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
        assert_eq!(g.value(y).shape(), &[3, 4]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_weight_gradient_is_outer_product() {
        // y = W x with x a column; dL/dW = outer(dL/dy, x).
        let mut g = Graph::new();
        let w = g
            .param(Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap())
            .unwrap();
        let x = g
            .constant(Tensor::matrix(3, 1, vec![1.0, 2.0, -1.0]).unwrap())
            .unwrap();
        let y = g.matmul(w, x).unwrap();
        let c = g.constant(Tensor::matrix(2, 1, vec![2.0, -3.0]).unwrap()).unwrap();
        // L = Σ c ⊙ y so dL/dy = c
        let (ct, yt) = (g_t(&mut g, c), g_t(&mut g, y));
        let prod = g.linear(ct, yt).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        let dw = grads.get(w).unwrap();
        let expect = [2.0, 4.0, -2.0, -3.0, -6.0, 3.0];
        assert!(approx(dw.data(), &expect, 1e-12), "{:?}", dw.data());
    }

    // [n,1] -> [1,n] so that linear(a, b) computes a·bᵀ as a dot product.
    fn g_t(g: &mut Graph, v: Var) -> Var {
        let n = g.value(v).len();
        g.reshape(v, vec![1, n]).unwrap()
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0; 3])).unwrap();
        let p = g.softmax(z).unwrap();
        assert!(approx(g.value(p).data(), &[1.0 / 3.0; 3], 1e-15));
        let z = g.constant(Tensor::vector(vec![2f64.ln(), 0.0])).unwrap();
        let p = g.softmax(z).unwrap();
        assert!(approx(g.value(p).data(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    }

    #[test]
    fn softmax_empty_fails() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![])).unwrap();
        assert!(g.softmax(z).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_n() {
        for n in [2usize, 4, 7] {
            let mut g = Graph::new();
            let z = g.constant(Tensor::vector(vec![0.3; n])).unwrap();
            let mut y = vec![0.0; n];
            y[n - 1] = 1.0;
            let l = g.cross_entropy(z, &Tensor::vector(y)).unwrap();
            assert!((g.value(l).item() - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_confident_correct_is_zero() {
        let mut g = Graph::new();
        let y = Tensor::vector(vec![0.0, 1.0, 0.0]);
        let z = g.constant(y.map(|v| v * 1e6)).unwrap();
        let l = g.cross_entropy(z, &y).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_non_one_hot() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert!(g.cross_entropy(z, &Tensor::vector(vec![0.5, 0.5])).is_err());
        assert!(g.cross_entropy(z, &Tensor::vector(vec![1.0, 1.0])).is_err());
        assert!(g.cross_entropy(z, &Tensor::vector(vec![0.0])).is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_target() {
        let mut g = Graph::new();
        let zv = vec![0.2, -1.0, 0.7, 0.1];
        let z = g.param(Tensor::vector(zv.clone())).unwrap();
        let y = Tensor::vector(vec![0.0, 0.0, 1.0, 0.0]);
        let l = g.cross_entropy(z, &y).unwrap();
        let grads = g.backward(l).unwrap();
        let p = softmax(&zv);
        let expect: Vec<f64> = p.iter().zip(y.data()).map(|(a, b)| a - b).collect();
        assert!(approx(grads.get(z).unwrap().data(), &expect, 1e-14));
    }

    #[test]
    fn window_mean_covering_all_is_mean() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![2.0, 4.0, 6.0])).unwrap();
        let y = g.window_mean(x, 3).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // L = sum(x + x) => dL/dx = 2
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -1.0])).unwrap();
        let y = g.add(x, x).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_adjoint() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, -1.0])).unwrap();
        let w = g.param(Tensor::scalar(3.0)).unwrap();
        let y = g.mul_scalar(x, w).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().item(), 0.0);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut g = Graph::new();
        assert!(matches!(
            g.param(Tensor::vector(vec![f64::NAN])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(g.backward(x).is_err());
    }
}
