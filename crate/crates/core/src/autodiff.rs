//! Arena-backed reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse creation order and
//! accumulates adjoints. Nodes are only ever appended, so creation order is a
//! valid topological order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{axis_split, Tensor};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Double,
    /// Every node value is rounded through `f32` after it is computed.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-feature statistics of one training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the estimator folded into running statistics.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Mul(Var, Var),
    ScaleShift(Var, f64),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Tanh(Var),
    Log(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    MulChannel {
        x: Var,
        m: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Sign of every relu input, in node order. Two evaluations with equal
    /// patterns lie on the same smooth piece of the function.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(x) = n.op {
                out.extend(self.data(x).iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, name: &'static str, mut value: Tensor, op: Op) -> Result<Var> {
        if self.precision == Precision::Single {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => op_inputs(&op).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf (parameter or input).
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push("leaf", t, Op::Leaf)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Constant)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", t, Op::Add(a, b))
    }

    /// Sum of one or more same-shaped nodes.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::invalid("add_all of an empty list"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| scale * v + shift).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("scale_shift", t, Op::ScaleShift(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.scale_shift(x, scale, 0.0)
    }

    /// `y[..., o] = Σ_i w[o, i] · x[..., i] + b[o]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(Error::shape("affine", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("affine", ws, bs));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        let rows = self.value(x).len() / n_in;
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = n_out;
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut y = vec![0.0; rows * n_out];
        for r in 0..rows {
            let xr = &xd[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let wr = &wd[o * n_in..(o + 1) * n_in];
                y[r * n_out + o] = dot(wr, xr) + bd[o];
            }
        }
        let t = Tensor::new(out_shape, y)?;
        self.push("affine", t, Op::Affine { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("relu", t, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("tanh", t, Op::Tanh(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.ln()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("log", t, Op::Log(x))
    }

    /// Mean over one axis, which is removed from the shape (a rank-1 input
    /// yields shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean_axis", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &xd[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, v) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        y.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let t = Tensor::new(out_shape, y)?;
        self.push("mean_axis", t, Op::MeanAxis { x, axis })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::shape("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let map = permute_map(&shape, perm);
        let xd = self.data(x);
        let data = map.iter().map(|&src| xd[src]).collect();
        let t = Tensor::new(out_shape, data)?;
        self.push("permute", t, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Contiguous range `[start, start + len)` of `axis`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice_axis", &shape, &[axis, start, len]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        self.push("slice_axis", t, Op::Slice { x, axis, start })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat of an empty list"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                data.extend_from_slice(&self.data(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let t = Tensor::new(out_shape, data)?;
        self.push("concat", t, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// Stacks same-shaped nodes along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(x));
            lifted.push(self.reshape(x, &s)?);
        }
        self.concat(&lifted, 0)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let mut y = self.data(x).to_vec();
        for_each_lane(&shape, axis, |idx| {
            let m = idx.clone().map(|i| y[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in idx.clone() {
                y[i] = (y[i] - m).exp();
                z += y[i];
            }
            for i in idx {
                y[i] /= z;
            }
        });
        let t = Tensor::new(shape, y)?;
        self.push("softmax", t, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("log_softmax", &shape, &[axis]));
        }
        let mut y = self.data(x).to_vec();
        for_each_lane(&shape, axis, |idx| {
            let m = idx.clone().map(|i| y[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + idx.clone().map(|i| (y[i] - m).exp()).sum::<f64>().ln();
            for i in idx {
                y[i] -= lse;
            }
        });
        let t = Tensor::new(shape, y)?;
        self.push("log_softmax", t, Op::LogSoftmax { x, axis })
    }

    /// Scales `x[b, c, ...]` by `m[b, c]`, broadcasting over trailing axes.
    pub fn mul_channel(&mut self, x: Var, m: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(m);
        if xs.len() < 2 || ms != &xs[..2] {
            return Err(Error::shape("mul_channel", &xs, ms));
        }
        let inner: usize = xs[2..].iter().product();
        let md = self.data(m);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * md[i / inner])
            .collect();
        let t = Tensor::new(xs, data)?;
        self.push("mul_channel", t, Op::MulChannel { x, m })
    }

    /// Batch normalization over the rows of `x: [batch, features]`.
    ///
    /// Training mode normalizes with the batch statistics and returns them;
    /// evaluation mode uses the supplied running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("batch_norm", &shape, &[2]));
        }
        let (n, f) = (shape[0], shape[1]);
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let xd = self.data(x);
        let (mean, var, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != f || rv.len() != f {
                    return Err(Error::shape("batch_norm", &shape, &[rm.len(), rv.len()]));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                if n < 2 {
                    return Err(Error::invalid(
                        "batch_norm in training mode needs a batch of at least 2",
                    ));
                }
                let mut mean = vec![0.0; f];
                for r in 0..n {
                    for c in 0..f {
                        mean[c] += xd[r * f + c];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; f];
                for r in 0..n {
                    for c in 0..f {
                        let d = xd[r * f + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                let unbiased = var.iter().map(|v| v / (n - 1) as f64).collect();
                var.iter_mut().for_each(|v| *v /= n as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let xhat: Vec<f64> = (0..n * f).map(|i| (xd[i] - mean[i % f]) * inv_std[i % f]).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let y = (0..n * f).map(|i| gd[i % f] * xhat[i] + bd[i % f]).collect();
        let t = Tensor::new(shape, y)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: running.is_none(),
        };
        Ok((self.push("batch_norm", t, op)?, stats))
    }

    /// Valid, stride-1 cross-correlation.
    /// `x: [batch, in, h, w]`, `w: [out, in, kh, kw]`, `b: [out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] > xs[2] || ws[3] > xs[3] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::shape("conv2d", &ws, self.shape(b)));
        }
        let g = ConvGeom::new(&xs, &ws);
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut y = vec![0.0; g.batch * g.cout * g.oh * g.ow];
        for n in 0..g.batch {
            for co in 0..g.cout {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = bd[co];
                        for ci in 0..g.cin {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    acc += wd[g.w_at(co, ci, ky, kx)] * xd[g.x_at(n, ci, oy + ky, ox + kx)];
                                }
                            }
                        }
                        y[g.y_at(n, co, oy, ox)] = acc;
                    }
                }
            }
        }
        let t = Tensor::new(vec![g.batch, g.cout, g.oh, g.ow], y)?;
        self.push("conv2d", t, Op::Conv2d { x, w, b })
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; ld.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &ld[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for c in 0..k {
                probs[r * k + c] = (row[c] - m).exp() / z;
            }
            loss -= row[label] - m - z.ln();
        }
        loss /= labels.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op)
    }

    /// Mean squared error against constant targets (same element count).
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pd = self.data(pred);
        if pd.len() != target.len() {
            return Err(Error::shape("mse", self.shape(pred), &[target.len()]));
        }
        let loss = zip_map(pd, target, |p, t| (p - t) * (p - t)).iter().sum::<f64>() / target.len() as f64;
        let op = Op::Mse {
            pred,
            target: target.to_vec(),
        };
        self.push("mse", Tensor::scalar(loss), op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Propagates `d root / d node` to every node that depends on a leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| axpy(g, dy, 1.0));
                self.accumulate(grads, *b, |g| axpy(g, dy, 1.0));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bd[i];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * ad[i];
                    }
                });
            }
            Op::ScaleShift(x, s) => self.accumulate(grads, *x, |g| axpy(g, dy, *s)),
            Op::Affine { x, w, b } => {
                let (xd, wd) = (self.data(*x), self.data(*w));
                let ws = self.shape(*w);
                let (n_out, n_in) = (ws[0], ws[1]);
                let rows = xd.len() / n_in;
                self.accumulate(grads, *x, |g| {
                    for r in 0..rows {
                        for o in 0..n_out {
                            let d = dy[r * n_out + o];
                            let wr = &wd[o * n_in..(o + 1) * n_in];
                            axpy(&mut g[r * n_in..(r + 1) * n_in], wr, d);
                        }
                    }
                });
                self.accumulate(grads, *w, |g| {
                    for r in 0..rows {
                        let xr = &xd[r * n_in..(r + 1) * n_in];
                        for o in 0..n_out {
                            axpy(&mut g[o * n_in..(o + 1) * n_in], xr, dy[r * n_out + o]);
                        }
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for r in 0..rows {
                        axpy(g, &dy[r * n_out..(r + 1) * n_out], 1.0);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, |g| {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::Tanh(x) => self.accumulate(grads, *x, |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Log(x) => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / xd[i];
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let inv = 1.0 / n as f64;
                self.accumulate(grads, *x, |g| {
                    for o in 0..outer {
                        for i in 0..n {
                            let dst = &mut g[(o * n + i) * inner..(o * n + i + 1) * inner];
                            axpy(dst, &dy[o * inner..(o + 1) * inner], inv);
                        }
                    }
                });
            }
            Op::SumAll(x) => self.accumulate(grads, *x, |g| g.iter_mut().for_each(|v| *v += dy[0])),
            Op::Reshape(x) => self.accumulate(grads, *x, |g| axpy(g, dy, 1.0)),
            Op::Permute { x, perm } => {
                let map = permute_map(self.shape(*x), perm);
                self.accumulate(grads, *x, |g| {
                    for (o, &src) in map.iter().enumerate() {
                        g[src] += dy[o];
                    }
                });
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                self.accumulate(grads, *x, |g| {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        let src = &dy[o * len * inner..(o + 1) * len * inner];
                        axpy(&mut g[base..base + len * inner], src, 1.0);
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    self.accumulate(grads, v, |g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            axpy(
                                &mut g[o * n * inner..(o + 1) * n * inner],
                                &dy[src..src + n * inner],
                                1.0,
                            );
                        }
                    });
                    offset += n;
                }
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                self.accumulate(grads, *x, |g| {
                    for_each_lane(shape, *axis, |idx| {
                        let dot: f64 = idx.clone().map(|i| dy[i] * y[i]).sum();
                        for i in idx {
                            g[i] += y[i] * (dy[i] - dot);
                        }
                    });
                });
            }
            Op::LogSoftmax { x, axis } => {
                let shape = node.value.shape();
                self.accumulate(grads, *x, |g| {
                    for_each_lane(shape, *axis, |idx| {
                        let total: f64 = idx.clone().map(|i| dy[i]).sum();
                        for i in idx {
                            g[i] += dy[i] - y[i].exp() * total;
                        }
                    });
                });
            }
            Op::MulChannel { x, m } => {
                let (xd, md) = (self.data(*x), self.data(*m));
                let inner = xd.len() / md.len();
                self.accumulate(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * md[i / inner];
                    }
                });
                self.accumulate(grads, *m, |g| {
                    for i in 0..xd.len() {
                        g[i / inner] += dy[i] * xd[i];
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let f = inv_std.len();
                let n = xhat.len() / f;
                let gd = self.data(*gamma);
                self.accumulate(grads, *gamma, |g| {
                    for i in 0..xhat.len() {
                        g[i % f] += dy[i] * xhat[i];
                    }
                });
                self.accumulate(grads, *beta, |g| {
                    for i in 0..dy.len() {
                        g[i % f] += dy[i];
                    }
                });
                self.accumulate(grads, *x, |g| {
                    if !*train {
                        for i in 0..g.len() {
                            g[i] += dy[i] * gd[i % f] * inv_std[i % f];
                        }
                        return;
                    }
                    for c in 0..f {
                        let (mut sum, mut sum_xhat) = (0.0, 0.0);
                        for r in 0..n {
                            let d = dy[r * f + c] * gd[c];
                            sum += d;
                            sum_xhat += d * xhat[r * f + c];
                        }
                        for r in 0..n {
                            let i = r * f + c;
                            let d = dy[i] * gd[c];
                            g[i] += inv_std[c] / n as f64 * (n as f64 * d - sum - xhat[i] * sum_xhat);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b } => {
                let g = ConvGeom::new(self.shape(*x), self.shape(*w));
                let (xd, wd) = (self.data(*x), self.data(*w));
                self.accumulate(grads, *x, |gx| {
                    g.for_each_tap(|n, co, ci, oy, ox, ky, kx| {
                        gx[g.x_at(n, ci, oy + ky, ox + kx)] += dy[g.y_at(n, co, oy, ox)] * wd[g.w_at(co, ci, ky, kx)];
                    })
                });
                self.accumulate(grads, *w, |gw| {
                    g.for_each_tap(|n, co, ci, oy, ox, ky, kx| {
                        gw[g.w_at(co, ci, ky, kx)] += dy[g.y_at(n, co, oy, ox)] * xd[g.x_at(n, ci, oy + ky, ox + kx)];
                    })
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, d) in dy.iter().enumerate() {
                        gb[(i / (g.oh * g.ow)) % g.cout] += d;
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = dy[0] / labels.len() as f64;
                self.accumulate(grads, *logits, |g| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            g[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let pd = self.data(*pred);
                let scale = 2.0 * dy[0] / target.len() as f64;
                self.accumulate(grads, *pred, |g| {
                    for i in 0..g.len() {
                        g[i] += scale * (pd[i] - target[i]);
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled if nothing flowed into it.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; graph.value(v).len()])
    }

    /// Copies the gradient of `v` into `t.grad`.
    pub fn attach(&self, graph: &Graph, v: Var, t: &mut Tensor) {
        t.grad = Some(self.wrt(graph, v));
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::ScaleShift(x, _)
        | Op::Relu(x)
        | Op::Tanh(x)
        | Op::Log(x)
        | Op::SumAll(x)
        | Op::Reshape(x)
        | Op::MeanAxis { x, .. }
        | Op::Permute { x, .. }
        | Op::Slice { x, .. }
        | Op::Softmax { x, .. }
        | Op::LogSoftmax { x, .. } => vec![*x],
        Op::Affine { x, w, b } | Op::Conv2d { x, w, b } => vec![*x, *w, *b],
        Op::Concat { xs, .. } => xs.clone(),
        Op::MulChannel { x, m } => vec![*x, *m],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Mse { pred, .. } => vec![*pred],
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Calls `f` with the flat indices of every 1-D lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    let (outer, n, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for j in 0..inner {
            let start = o * n * inner + j;
            f((start..start + n * inner).step_by(inner));
        }
    }
}

/// For each output position of `permute(shape, perm)`, the source offset.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0; rank];
    let mut src = 0;
    for _ in 0..n {
        map.push(src);
        for a in (0..rank).rev() {
            idx[a] += 1;
            src += out_strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            src -= out_strides[a] * idx[a];
            idx[a] = 0;
        }
    }
    map
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        Self {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            oh: xs[2] - ws[2] + 1,
            ow: xs[3] - ws[3] + 1,
        }
    }

    fn x_at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.cin + c) * self.h + y) * self.w + x
    }

    fn w_at(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.cin + ci) * self.kh + ky) * self.kw + kx
    }

    fn y_at(&self, n: usize, co: usize, y: usize, x: usize) -> usize {
        ((n * self.cout + co) * self.oh + y) * self.ow + x
    }

    #[allow(clippy::too_many_arguments)]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
        for n in 0..self.batch {
            for co in 0..self.cout {
                for ci in 0..self.cin {
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            for ky in 0..self.kh {
                                for kx in 0..self.kw {
                                    f(n, co, ci, oy, ox, ky, kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
