//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records operations eagerly: each call computes the forward
//! value immediately and appends a node, so recording order is a valid
//! topological order. [`Graph::grad`] walks the tape backwards once.
//!
//! The op set is deliberately closed: add, sub, mul, matmul, 2-D convolution
//! (stride 1, zero "same" padding), relu, sigmoid, softmax over the channel
//! axis, log, sum, mean, weighting by constants, and a fused weighted
//! cross-entropy that stays finite for saturated logits.

use super::tensor::{check_finite, matmul_raw};
use super::{NumError, Tensor};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Weight(Var, Tensor),
    Scale(Var, f64),
    WeightedCe { logits: Var, targets: Vec<usize>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Param, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn record(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, parents: &[Var]) -> Result<Var, NumError> {
        check_finite(&data)?;
        let needs_grad = parents.iter().any(|&p| self.needs(p));
        Ok(self.push(op, Tensor::from_parts(shape, data), needs_grad))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>), NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_shape(tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (s, d) = self.binary(a, b, |x, y| x + y)?;
        self.record(Op::Add(a, b), s, d, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (s, d) = self.binary(a, b, |x, y| x - y)?;
        self.record(Op::Sub(a, b), s, d, &[a, b])
    }

    /// Elementwise product of two recorded values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (s, d) = self.binary(a, b, |x, y| x * y)?;
        self.record(Op::Mul(a, b), s, d, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(NumError::ShapeMismatch(format!("matmul {:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let d = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.record(Op::MatMul(a, b), vec![m, n], d, &[a, b])
    }

    /// `input (N,Cin,H,W) ⊛ weight (Cout,Cin,k,k) + bias (Cout)` with odd `k`,
    /// stride 1 and zero padding `k/2`, so spatial size is preserved.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, NumError> {
        let x = self.value(input);
        let w = self.value(weight);
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(NumError::ShapeMismatch(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        let geom = ConvGeom::new(xs, ws);
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [geom.cout] {
                return Err(NumError::ShapeMismatch(format!("conv2d bias {bs:?} for {} outputs", geom.cout)));
            }
        }
        let mut out = vec![0.0; geom.n * geom.cout * geom.h * geom.w];
        conv_forward(&geom, x.data(), w.data(), &mut out);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            let plane = geom.h * geom.w;
            for (chunk_idx, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bd[chunk_idx % geom.cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let shape = vec![geom.n, geom.cout, geom.h, geom.w];
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.record(Op::Conv2d { input, weight, bias }, shape, out, &parents)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a);
        let d = t.data().iter().map(|&v| v.max(0.0)).collect();
        self.record(Op::Relu(a), t.shape().to_vec(), d, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a);
        let d = t.data().iter().map(|&v| sigmoid(v)).collect();
        self.record(Op::Sigmoid(a), t.shape().to_vec(), d, &[a])
    }

    /// Softmax over axis 1 of a tensor shaped `(N, C, ...)`.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a);
        let (n, c, inner) = channel_layout(t.shape())?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            let base = b * c * inner;
            for s in 0..inner {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(src[base + ch * inner + s]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (src[base + ch * inner + s] - mx).exp();
                    out[base + ch * inner + s] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[base + ch * inner + s] /= z;
                }
            }
        }
        self.record(Op::Softmax(a), t.shape().to_vec(), out, &[a])
    }

    /// Natural log; non-positive inputs surface as [`NumError::NonFinite`].
    pub fn log(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a);
        let d = t.data().iter().map(|&v| v.ln()).collect();
        self.record(Op::Log(a), t.shape().to_vec(), d, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.value(a).sum();
        self.record(Op::Sum(a), vec![1], vec![s], &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(NumError::ShapeMismatch("mean of empty tensor".into()));
        }
        let m = t.sum() / t.numel() as f64;
        self.record(Op::Mean(a), vec![1], vec![m], &[a])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn weight(&mut self, a: Var, w: Tensor) -> Result<Var, NumError> {
        let t = self.value(a);
        t.expect_same_shape(&w)?;
        let d = t.data().iter().zip(w.data()).map(|(x, y)| x * y).collect();
        let shape = t.shape().to_vec();
        self.record(Op::Weight(a, w), shape, d, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let t = self.value(a);
        let d = t.data().iter().map(|x| x * c).collect();
        self.record(Op::Scale(a, c), t.shape().to_vec(), d, &[a])
    }

    /// `Σ_k w_k · (logsumexp(z_k) - z_k[t_k])` over positions `k` of logits
    /// shaped `(N, C, ...)`; `targets` and `weights` are indexed by
    /// `(n, spatial)` in row-major order.
    pub fn weighted_ce(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var, NumError> {
        let t = self.value(logits);
        let (n, c, inner) = channel_layout(t.shape())?;
        if targets.len() != n * inner || weights.len() != n * inner {
            return Err(NumError::ShapeMismatch(format!(
                "cross-entropy over {} positions with {} targets and {} weights",
                n * inner,
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(NumError::ShapeMismatch(format!("target class {bad} with {c} channels")));
        }
        check_finite(weights)?;
        let z = t.data();
        let mut total = 0.0;
        for b in 0..n {
            let base = b * c * inner;
            for s in 0..inner {
                let w = weights[b * inner + s];
                if w == 0.0 {
                    continue;
                }
                let lse = log_sum_exp((0..c).map(|ch| z[base + ch * inner + s]));
                total += w * (lse - z[base + targets[b * inner + s] * inner + s]);
            }
        }
        let op = Op::WeightedCe {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        self.record(op, vec![1], vec![total], &[logits])
    }

    /// Gradients of the scalar `loss` with respect to each `wrt` parameter.
    ///
    /// Parameters the loss does not depend on get zero gradients.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>, NumError> {
        if loss.0 >= self.nodes.len() {
            return Err(NumError::DetachedNode(loss.0));
        }
        for &v in wrt {
            if v.0 >= self.nodes.len() || !matches!(self.nodes[v.0].op, Op::Param) {
                return Err(NumError::DetachedNode(v.0));
            }
        }
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.numel() != 1 {
            return Err(NumError::NotScalarLoss(loss_val.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &g, &mut grads);
            // keep leaf gradients for the caller
            if matches!(node.op, Op::Param) {
                grads[id] = Some(g);
            }
        }

        Ok(wrt
            .iter()
            .map(|&v| {
                let shape = self.nodes[v.0].value.shape().to_vec();
                match grads.get(v.0).and_then(|g| g.clone()) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &dyn Fn(usize) -> f64| {
            if !self.needs(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            for (i, s) in slot.iter_mut().enumerate() {
                *s += f(i);
            }
        };
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, &|i| g[i]);
                acc(*b, &|i| g[i]);
            }
            Op::Sub(a, b) => {
                acc(*a, &|i| g[i]);
                acc(*b, &|i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &|i| g[i] * bv[i]);
                acc(*b, &|i| g[i] * av[i]);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let bt = tb.transpose().expect("matrix");
                    let da = matmul_raw(g, bt.data(), m, n, k);
                    acc(*a, &|i| da[i]);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let at = ta.transpose().expect("matrix");
                    let db = matmul_raw(at.data(), g, k, m, n);
                    acc(*b, &|i| db[i]);
                }
            }
            Op::Conv2d { input, weight, bias } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let geom = ConvGeom::new(x.shape(), w.shape());
                if self.needs(*input) {
                    let mut dx = vec![0.0; x.numel()];
                    conv_backward_input(&geom, g, w.data(), &mut dx);
                    acc(*input, &|i| dx[i]);
                }
                if self.needs(*weight) {
                    let mut dw = vec![0.0; w.numel()];
                    conv_backward_weight(&geom, g, x.data(), &mut dw);
                    acc(*weight, &|i| dw[i]);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let plane = geom.h * geom.w;
                        let mut db = vec![0.0; geom.cout];
                        for (chunk_idx, chunk) in g.chunks(plane).enumerate() {
                            db[chunk_idx % geom.cout] += chunk.iter().sum::<f64>();
                        }
                        acc(*b, &|i| db[i]);
                    }
                }
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &|i| if av[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &|i| g[i] * y[i] * (1.0 - y[i]));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (n, c, inner) = channel_layout(node.value.shape()).expect("recorded shape");
                let mut dx = vec![0.0; y.len()];
                for b in 0..n {
                    let base = b * c * inner;
                    for s in 0..inner {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            let k = base + ch * inner + s;
                            dot += g[k] * y[k];
                        }
                        for ch in 0..c {
                            let k = base + ch * inner + s;
                            dx[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                acc(*a, &|i| dx[i]);
            }
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &|i| g[i] / av[i]);
            }
            Op::Sum(a) => acc(*a, &|_| g[0]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                acc(*a, &|_| g[0] / n);
            }
            Op::Weight(a, w) => {
                let wd = w.data();
                acc(*a, &|i| g[i] * wd[i]);
            }
            Op::Scale(a, c) => acc(*a, &|i| g[i] * c),
            Op::WeightedCe { logits, targets, weights } => {
                let t = &self.nodes[logits.0].value;
                let (n, c, inner) = channel_layout(t.shape()).expect("recorded shape");
                let z = t.data();
                let mut dz = vec![0.0; z.len()];
                for b in 0..n {
                    let base = b * c * inner;
                    for s in 0..inner {
                        let w = weights[b * inner + s];
                        if w == 0.0 {
                            continue;
                        }
                        let mx = (0..c).map(|ch| z[base + ch * inner + s]).fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = (0..c).map(|ch| (z[base + ch * inner + s] - mx).exp()).sum();
                        for ch in 0..c {
                            let k = base + ch * inner + s;
                            let p = (z[k] - mx).exp() / denom;
                            let onehot = (ch == targets[b * inner + s]) as u8 as f64;
                            dz[k] = g[0] * w * (p - onehot);
                        }
                    }
                }
                acc(*logits, &|i| dz[i]);
            }
        }
    }
}

/// Free-function form of [`Graph::grad`].
pub fn grad(graph: &Graph, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>, NumError> {
    graph.grad(loss, wrt)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = values.clone().fold(f64::NEG_INFINITY, f64::max);
    mx + values.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize), NumError> {
    if shape.len() < 2 {
        return Err(NumError::ShapeMismatch(format!("softmax needs (N, C, ...), got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

struct ConvGeom {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        Self {
            n: xs[0],
            cin: xs[1],
            cout: ws[0],
            h: xs[2],
            w: xs[3],
            k: ws[2],
            pad: ws[2] / 2,
        }
    }

    /// Output index range along one axis for kernel tap `tap`: output `o`
    /// reads input `o + tap - pad`, which must lie in `0..len`.
    fn range(&self, tap: usize, len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(tap);
        let hi = (len + self.pad).saturating_sub(tap).min(len);
        (lo, hi.max(lo))
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let plane = g.h * g.w;
    for b in 0..g.n {
        for co in 0..g.cout {
            let o = &mut out[(b * g.cout + co) * plane..][..plane];
            for ci in 0..g.cin {
                let xin = &x[(b * g.cin + ci) * plane..][..plane];
                for ky in 0..g.k {
                    let (y0, y1) = g.range(ky, g.h);
                    for kx in 0..g.k {
                        let wv = w[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.range(kx, g.w);
                        for y in y0..y1 {
                            let iy = y + ky - g.pad;
                            let orow = &mut o[y * g.w + x0..y * g.w + x1];
                            let irow = &xin[iy * g.w + x0 + kx - g.pad..][..x1 - x0];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input(g: &ConvGeom, gout: &[f64], w: &[f64], dx: &mut [f64]) {
    let plane = g.h * g.w;
    for b in 0..g.n {
        for co in 0..g.cout {
            let go = &gout[(b * g.cout + co) * plane..][..plane];
            for ci in 0..g.cin {
                let dxi = &mut dx[(b * g.cin + ci) * plane..][..plane];
                for ky in 0..g.k {
                    let (y0, y1) = g.range(ky, g.h);
                    for kx in 0..g.k {
                        let wv = w[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.range(kx, g.w);
                        for y in y0..y1 {
                            let iy = y + ky - g.pad;
                            let grow = &go[y * g.w + x0..y * g.w + x1];
                            let drow = &mut dxi[iy * g.w + x0 + kx - g.pad..][..x1 - x0];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight(g: &ConvGeom, gout: &[f64], x: &[f64], dw: &mut [f64]) {
    let plane = g.h * g.w;
    for b in 0..g.n {
        for co in 0..g.cout {
            let go = &gout[(b * g.cout + co) * plane..][..plane];
            for ci in 0..g.cin {
                let xin = &x[(b * g.cin + ci) * plane..][..plane];
                for ky in 0..g.k {
                    let (y0, y1) = g.range(ky, g.h);
                    for kx in 0..g.k {
                        let (x0, x1) = g.range(kx, g.w);
                        let mut s = 0.0;
                        for y in y0..y1 {
                            let iy = y + ky - g.pad;
                            let grow = &go[y * g.w + x0..y * g.w + x1];
                            let irow = &xin[iy * g.w + x0 + kx - g.pad..][..x1 - x0];
                            s += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        dw[((co * g.cin + ci) * g.k + ky) * g.k + kx] += s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi).unwrap()).collect()).unwrap()
    }

    /// Central finite differences of `f` at `x` with step `1e-5`.
    fn fd_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    /// Checks `d/dx sum(R ⊙ op(x, others))` against finite differences for
    /// every input position of a unary-in-x op builder.
    fn check_op(
        inputs: Vec<Tensor>,
        build: &dyn Fn(&mut Graph, &[Var]) -> Var,
        rng: &mut Rng,
    ) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let r = rand_tensor(g.value(out).shape(), rng, -1.0, 1.0);
        let weighted = g.weight(out, r.clone()).unwrap();
        let loss = g.sum(weighted).unwrap();
        let grads = g.grad(loss, &vars).unwrap();

        let eval = |ins: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).dot(&r).unwrap()
        };
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let fd = fd_grad(input, &|x| {
                let mut ins = inputs.clone();
                ins[k] = x.clone();
                eval(&ins)
            });
            worst = worst.max(rel_err(grads[k].data(), &fd));
        }
        worst
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let th = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(th, th).unwrap();
        let loss = g.sum(sq).unwrap();
        let gr = grad(&g, loss, &[th]).unwrap();
        assert_eq!(gr[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn independent_parameter_gets_zero() {
        let mut g = Graph::new();
        let th = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = g.sum(c).unwrap();
        let gr = g.grad(loss, &[th]).unwrap();
        assert_eq!(gr[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_errors() {
        let mut g = Graph::new();
        let th = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.grad(th, &[th]), Err(NumError::NotScalarLoss(_))));
        let loss = g.sum(th).unwrap();
        assert!(matches!(g.grad(loss, &[c]), Err(NumError::DetachedNode(_))));
        assert!(matches!(g.grad(loss, &[Var(99)]), Err(NumError::DetachedNode(99))));
    }

    #[test]
    fn log_of_zero_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        assert!(matches!(g.log(x), Err(NumError::NonFinite(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(2);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[3, 4, 5, 5], &mut rng, -20.0, 20.0));
        let s = g.softmax_channels(x).unwrap();
        let v = g.value(s).data();
        for b in 0..3 {
            for p in 0..25 {
                let total: f64 = (0..4).map(|c| v[(b * 4 + c) * 25 + p]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = Rng::new(0xD1FF);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
            let b = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
            let m = rand_tensor(&[4, 2], &mut rng, -1.0, 1.0);
            let pos = rand_tensor(&[3, 4], &mut rng, 0.5, 2.0);
            let wc = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
            // keep relu inputs away from the kink
            let kinkless = a.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v }).unwrap();

            worst = worst.max(check_op(vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]).unwrap(), &mut rng));
            worst = worst.max(check_op(vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]).unwrap(), &mut rng));
            worst = worst.max(check_op(vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]).unwrap(), &mut rng));
            worst = worst.max(check_op(vec![a.clone(), m], &|g, v| g.matmul(v[0], v[1]).unwrap(), &mut rng));
            worst = worst.max(check_op(vec![kinkless], &|g, v| g.relu(v[0]).unwrap(), &mut rng));
            worst = worst.max(check_op(vec![a.clone()], &|g, v| g.sigmoid(v[0]).unwrap(), &mut rng));
            worst = worst.max(check_op(vec![a.clone()], &|g, v| g.softmax_channels(v[0]).unwrap(), &mut rng));
            worst = worst.max(check_op(vec![pos], &|g, v| g.log(v[0]).unwrap(), &mut rng));
            worst = worst.max(check_op(vec![a.clone()], &|g, v| g.sum(v[0]).unwrap(), &mut rng));
            worst = worst.max(check_op(vec![a.clone()], &|g, v| g.mean(v[0]).unwrap(), &mut rng));
            worst = worst.max(check_op(vec![a.clone()], &|g, v| g.weight(v[0], wc.clone()).unwrap(), &mut rng));
            worst = worst.max(check_op(vec![a], &|g, v| g.scale(v[0], -1.7).unwrap(), &mut rng));

            let x = rand_tensor(&[2, 2, 5, 4], &mut rng, -1.0, 1.0);
            let w = rand_tensor(&[3, 2, 3, 3], &mut rng, -1.0, 1.0);
            let bias = rand_tensor(&[3], &mut rng, -1.0, 1.0);
            worst = worst.max(check_op(
                vec![x.clone(), w, bias],
                &|g, v| g.conv2d(v[0], v[1], Some(v[2])).unwrap(),
                &mut rng,
            ));
            let w1 = rand_tensor(&[2, 2, 1, 1], &mut rng, -1.0, 1.0);
            worst = worst.max(check_op(vec![x, w1], &|g, v| g.conv2d(v[0], v[1], None).unwrap(), &mut rng));
        }
        assert!(worst <= 1e-5, "worst relative error {worst:e}");
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = Rng::new(77);
        let x = rand_tensor(&[1, 1, 4, 4], &mut rng, 0.0, 1.0);
        let w1 = rand_tensor(&[3, 1, 3, 3], &mut rng, -1.0, 1.0);
        let b1 = rand_tensor(&[3], &mut rng, -0.1, 0.1);
        let w2 = rand_tensor(&[2, 3, 3, 3], &mut rng, -1.0, 1.0);
        let target = rand_tensor(&[1, 2, 4, 4], &mut rng, 0.0, 1.0);
        let build = |g: &mut Graph, v: &[Var]| {
            let xin = g.constant(x.clone());
            let h = g.conv2d(xin, v[0], Some(v[1])).unwrap();
            let h = g.relu(h).unwrap();
            let o = g.conv2d(h, v[2], None).unwrap();
            let p = g.softmax_channels(o).unwrap();
            let lp = g.log(p).unwrap();
            let wl = g.weight(lp, target.clone()).unwrap();
            g.sum(wl).unwrap()
        };
        let err = check_op(vec![w1, b1, w2], &build, &mut rng);
        assert!(err <= 1e-5, "{err:e}");
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = Rng::new(8);
        let x = rand_tensor(&[1, 2, 4, 5], &mut rng, -1.0, 1.0);
        let w = rand_tensor(&[2, 2, 3, 3], &mut rng, -1.0, 1.0);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let out = g.conv2d(xv, wv, None).unwrap();
        let o = g.value(out);
        for co in 0..2 {
            for y in 0..4i64 {
                for xx in 0..5i64 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (iy, ix) = (y + ky - 1, xx + kx - 1);
                                if (0..4).contains(&iy) && (0..5).contains(&ix) {
                                    s += w.data()[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.data()[(ci * 4 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = o.data()[(co * 4 + y as usize) * 5 + xx as usize];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weighted_ce_matches_composition_and_differences() {
        let mut rng = Rng::new(17);
        for _ in 0..100 {
            let (n, c, h, w) = (2, 3, 2, 3);
            let z = rand_tensor(&[n, c, h, w], &mut rng, -3.0, 3.0);
            let targets: Vec<usize> = (0..n * h * w).map(|_| rng.below(c)).collect();
            let weights: Vec<f64> = (0..n * h * w).map(|_| rng.uniform(0.0, 2.0).unwrap()).collect();

            // composed reference: -Σ w · onehot · log softmax
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let p = g.softmax_channels(zv).unwrap();
            let lp = g.log(p).unwrap();
            let mut mask = vec![0.0; z.numel()];
            for b in 0..n {
                for s in 0..h * w {
                    mask[(b * c + targets[b * h * w + s]) * h * w + s] = -weights[b * h * w + s];
                }
            }
            let picked = g.weight(lp, Tensor::new(z.shape().to_vec(), mask).unwrap()).unwrap();
            let reference = g.sum(picked).unwrap();
            let fused = g.weighted_ce(zv, &targets, &weights).unwrap();
            let (a, b) = (g.value(fused).data()[0], g.value(reference).data()[0]);
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));

            let err = check_op(
                vec![z],
                &|g, v| g.weighted_ce(v[0], &targets, &weights).unwrap(),
                &mut rng,
            );
            assert!(err <= 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn weighted_ce_is_finite_for_saturated_logits() {
        let mut g = Graph::new();
        let z = g.param(Tensor::new(vec![1, 2, 1, 2], vec![800.0, -800.0, -800.0, 800.0]).unwrap());
        let right = g.weighted_ce(z, &[0, 1], &[1.0, 1.0]).unwrap();
        assert_eq!(g.value(right).data()[0], 0.0);
        let wrong = g.weighted_ce(z, &[1, 0], &[1.0, 1.0]).unwrap();
        assert_eq!(g.value(wrong).data()[0], 3200.0);
        let gr = g.grad(wrong, &[z]).unwrap();
        assert_eq!(gr[0].data(), &[1.0, -1.0, -1.0, 1.0]);
        assert!(g.weighted_ce(z, &[2, 0], &[1.0, 1.0]).is_err());
    }
}
