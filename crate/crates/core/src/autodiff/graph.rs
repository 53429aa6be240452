use super::kernels::{self, ConvGeom, PoolGeom};
use crate::error::{Error, Result};
use crate::neuron::Surrogate;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics of one batch-norm application, used to update running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar {
        x: Var,
        k: Var,
    },
    SigmoidNeg(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    Spike {
        h: Var,
        threshold: f64,
        surrogate: Surrogate,
    },
    Reset {
        h: Var,
        s: Var,
        v_reset: f64,
        detach: bool,
    },
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    MeanAxis0 {
        x: Var,
        n: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain: bool,
}

/// Single-use reverse-mode tape.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep. A node records its inputs only
/// when at least one of them requires a gradient.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    smooth_spikes: bool,
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose spike op emits the smooth surrogate σ(h − θ) instead of the
    /// Heaviside step. Backward is unchanged, which makes the surrogate gradient
    /// the exact derivative of the forward function; used for finite-difference checks.
    pub fn with_smoothed_spikes() -> Self {
        Self {
            smooth_spikes: true,
            ..Self::default()
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Available for leaves that require gradients and for nodes marked with [`Graph::retain_grad`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    /// Keep the gradient of an intermediate node after backward.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            retain: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| f(x)).collect(),
        )
        .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| x + c);
        self.push(v, Op::AddScalar(a), &[a], "add_scalar")
    }

    /// `x * k` where `k` is a single-element node.
    pub fn mul_scalar_var(&mut self, x: Var, k: Var) -> Result<Var> {
        let kv = self.value(k).item().ok_or_else(|| {
            shape_err(
                "mul_scalar_var",
                format!("factor has shape {:?}", self.value(k).shape()),
            )
        })?;
        let v = self.map(x, |a| a * kv);
        self.push(v, Op::MulScalarVar { x, k }, &[x, k], "mul_scalar_var")
    }

    /// `1 / (1 + exp(x))`, elementwise.
    pub fn sigmoid_neg(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, |a| 1.0 / (1.0 + a.exp()));
        self.push(v, Op::SigmoidNeg(x), &[x], "sigmoid_neg")
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &db[p * n..][..n];
                for (o, &bv) in out[i * n..][..n].iter_mut().zip(row) {
                    *o += av * bv;
                }
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        self.push(v, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `x W^T + b` with `x` viewed as `[rows, in]` (trailing dims flattened) and `W` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.is_empty() || ws.len() != 2 {
            return Err(shape_err("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let rows = xs[0];
        let fan_in = self.value(x).numel() / rows.max(1);
        let (out_f, in_f) = (ws[0], ws[1]);
        if fan_in != in_f {
            return Err(shape_err(
                "linear",
                format!("input features {fan_in} vs weight {ws:?}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [out_f] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} vs {out_f} outputs", self.value(b).shape()),
                ));
            }
        }
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; rows * out_f];
        for r in 0..rows {
            let xr = &dx[r * in_f..][..in_f];
            for o in 0..out_f {
                let wr = &dw[o * in_f..][..in_f];
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for (a, c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                out[r * out_f + o] = acc;
            }
        }
        let v = Tensor::new(vec![rows, out_f], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(v, Op::Linear { x, w, b }, &inputs, "linear")
    }

    /// 2-D convolution without bias. `x`: `[N, C, H, W]`, `w`: `[O, C, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, stride {stride}"),
            ));
        }
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            return Err(shape_err(
                "conv2d",
                format!("kernel {} larger than padded input {xs:?}", ws[2]),
            ));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let v = Tensor::new(
            vec![
                geom.batch,
                geom.out_channels,
                geom.out_height(),
                geom.out_width(),
            ],
            out,
        )?;
        self.push(v, Op::Conv2d { x, w, geom }, &[x, w], "conv2d")
    }

    /// Batch normalization over every axis except axis 1.
    ///
    /// With `running = None` the statistics of this batch are used and returned;
    /// otherwise the given `(mean, var)` are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(shape_err(
                "batch_norm",
                format!("input {xs:?} has no channel axis"),
            ));
        }
        let c = xs[1];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(
                "batch_norm",
                format!("affine parameters do not match {c} channels"),
            ));
        }
        let n = xs[0];
        let inner: usize = xs[2..].iter().product();
        let m = n * inner;
        let data = self.value(x).data();
        let idx = |ni: usize, ci: usize, k: usize| (ni * c + ci) * inner + k;

        let (mean, var_biased, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err("batch_norm", "running statistics length"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                if m == 0 {
                    return Err(shape_err("batch_norm", "empty batch"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for ni in 0..n {
                        for k in 0..inner {
                            s += data[idx(ni, ci, k)];
                        }
                    }
                    let mu = s / m as f64;
                    let mut ss = 0.0;
                    for ni in 0..n {
                        for k in 0..inner {
                            let d = data[idx(ni, ci, k)] - mu;
                            ss += d * d;
                        }
                    }
                    mean[ci] = mu;
                    var[ci] = ss / m as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| {
                        if m > 1 {
                            v * m as f64 / (m - 1) as f64
                        } else {
                            *v
                        }
                    })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for ni in 0..n {
            for ci in 0..c {
                for k in 0..inner {
                    let i = idx(ni, ci, k);
                    let xh = (data[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = g[ci] * xh + b[ci];
                }
            }
        }
        let v = Tensor::new(xs, out)?;
        let batch_stats = stats.is_some();
        let var = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
            "batch_norm",
        )?;
        Ok((var, stats))
    }

    fn pool_geom(
        &self,
        op: &'static str,
        x: Var,
        kernel: usize,
        stride: usize,
    ) -> Result<PoolGeom> {
        let xs = self.value(x).shape();
        if xs.len() != 4 || kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(shape_err(
                op,
                format!("input {xs:?}, kernel {kernel}, stride {stride}"),
            ));
        }
        Ok(PoolGeom {
            planes: xs[0] * xs[1],
            height: xs[2],
            width: xs[3],
            kernel,
            stride,
        })
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let geom = self.pool_geom("max_pool", x, kernel, stride)?;
        let xs = self.value(x).shape();
        let shape = vec![xs[0], xs[1], geom.out_height(), geom.out_width()];
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), &geom);
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::MaxPool { x, argmax }, &[x], "max_pool")
    }

    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let geom = self.pool_geom("avg_pool", x, kernel, stride)?;
        let xs = self.value(x).shape();
        let shape = vec![xs[0], xs[1], geom.out_height(), geom.out_width()];
        let out = kernels::avg_pool_forward(self.value(x).data(), &geom);
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::AvgPool { x, geom }, &[x], "avg_pool")
    }

    /// Heaviside spike `Θ(h − threshold)` with `Θ(0) = 1`; backward uses the surrogate derivative.
    pub fn spike(&mut self, h: Var, threshold: f64, surrogate: Surrogate) -> Result<Var> {
        let v = if self.smooth_spikes {
            self.map(h, |x| surrogate.primitive(x - threshold))
        } else {
            self.map(h, |x| if x - threshold >= 0.0 { 1.0 } else { 0.0 })
        };
        self.push(
            v,
            Op::Spike {
                h,
                threshold,
                surrogate,
            },
            &[h],
            "spike",
        )
    }

    /// Hard reset `V = H·(1 − S) + v_reset·S`. With `detach`, no gradient flows into `S`.
    pub fn reset(&mut self, h: Var, s: Var, v_reset: f64, detach: bool) -> Result<Var> {
        self.same_shape("reset", h, s)?;
        let v = self.zip_map(h, s, |hv, sv| hv * (1.0 - sv) + v_reset * sv);
        let inputs: &[Var] = if detach { &[h] } else { &[h, s] };
        self.push(
            v,
            Op::Reset {
                h,
                s,
                v_reset,
                detach,
            },
            inputs,
            "reset",
        )
    }

    /// Same values, no gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push(v, Op::Reshape(x), &[x], "reshape")
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, len)?;
        self.push(v, Op::SliceRows { x, start }, &[x], "slice_rows")
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(shape_err(
                    "concat_rows",
                    format!("{:?} vs trailing {tail:?}", t.shape()),
                ));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::Concat(parts.to_vec()), parts, "concat_rows")
    }

    /// Mean over `n` equal blocks of the leading axis: `[n·r, ...] -> [r, ...]`.
    pub fn mean_blocks(&mut self, x: Var, n: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() || n == 0 || !xs[0].is_multiple_of(n) {
            return Err(shape_err(
                "mean_blocks",
                format!("{xs:?} not divisible into {n} blocks"),
            ));
        }
        let data = self.value(x).data();
        let chunk = data.len() / n;
        let mut out = vec![0.0; chunk];
        for block in data.chunks(chunk) {
            for (o, v) in out.iter_mut().zip(block) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let mut shape = xs;
        shape[0] /= n;
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::MeanAxis0 { x, n }, &[x], "mean_blocks")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x], "sum")
    }

    /// Mean softmax cross-entropy of `[B, classes]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {ls:?} vs {} labels", labels.len()),
            ));
        }
        let classes = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; data.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &data[r * classes..][..classes];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for (p, v) in probs[r * classes..][..classes].iter_mut().zip(row) {
                *p = (v - mx).exp() / z;
            }
            loss += z.ln() + mx - row[label];
        }
        let v = Tensor::scalar(loss / labels.len() as f64);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Reverse sweep from a scalar `loss`. The tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        let ls = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(ls.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            if node.retain || (node.requires_grad && matches!(node.op, Op::Leaf)) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(va).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::MulScalarVar { x, k } => {
                let kv = val(*k)[0];
                let dk: f64 = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
                acc(*x, g.iter().map(|v| v * kv).collect());
                acc(*k, vec![dk]);
            }
            Op::SigmoidNeg(x) => {
                // d/dx 1/(1+e^x) = -s(1-s)
                let out = node.value.data();
                acc(
                    *x,
                    g.iter()
                        .zip(out)
                        .map(|(gv, s)| -gv * s * (1.0 - s))
                        .collect(),
                );
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * vb[p * n + j];
                            db[p * n + j] += va[i * k + p] * g[i * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Linear { x, w, b } => {
                let ws = self.nodes[w.0].value.shape();
                let (out_f, in_f) = (ws[0], ws[1]);
                let rows = g.len() / out_f;
                let (vx, vw) = (val(*x), val(*w));
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; rows * in_f];
                    for r in 0..rows {
                        let dxr = &mut dx[r * in_f..][..in_f];
                        for o in 0..out_f {
                            let gv = g[r * out_f + o];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, wv) in dxr.iter_mut().zip(&vw[o * in_f..][..in_f]) {
                                *d += gv * wv;
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; out_f * in_f];
                    for r in 0..rows {
                        let xr = &vx[r * in_f..][..in_f];
                        for o in 0..out_f {
                            let gv = g[r * out_f + o];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, xv) in dw[o * in_f..][..in_f].iter_mut().zip(xr) {
                                *d += gv * xv;
                            }
                        }
                    }
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; out_f];
                    for r in 0..rows {
                        for o in 0..out_f {
                            db[o] += g[r * out_f + o];
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(val(*x), val(*w), g, geom);
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let m = (n * inner) as f64;
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        for k in 0..inner {
                            let i = (ni * c + ci) * inner + k;
                            dgamma[ci] += g[i] * xhat[i];
                            dbeta[ci] += g[i];
                            let dxh = g[i] * gam[ci];
                            sum_dxhat[ci] += dxh;
                            sum_dxhat_xhat[ci] += dxh * xhat[i];
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            for k in 0..inner {
                                let i = (ni * c + ci) * inner + k;
                                let dxh = g[i] * gam[ci];
                                dx[i] = if *batch_stats {
                                    inv_std[ci] / m
                                        * (m * dxh - sum_dxhat[ci] - xhat[i] * sum_dxhat_xhat[ci])
                                } else {
                                    dxh * inv_std[ci]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (gv, &i) in g.iter().zip(argmax) {
                    dx[i] += gv;
                }
                acc(*x, dx);
            }
            Op::AvgPool { x, geom } => acc(*x, kernels::avg_pool_backward(g, geom)),
            Op::Spike {
                h,
                threshold,
                surrogate,
            } => {
                let dh = g
                    .iter()
                    .zip(val(*h))
                    .map(|(gv, hv)| gv * surrogate.derivative(hv - threshold))
                    .collect();
                acc(*h, dh);
            }
            Op::Reset {
                h,
                s,
                v_reset,
                detach,
            } => {
                let (vh, vs) = (val(*h), val(*s));
                acc(
                    *h,
                    g.iter().zip(vs).map(|(gv, sv)| gv * (1.0 - sv)).collect(),
                );
                if !detach {
                    acc(
                        *s,
                        g.iter()
                            .zip(vh)
                            .map(|(gv, hv)| gv * (v_reset - hv))
                            .collect(),
                    );
                }
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::SliceRows { x, start } => {
                let total = self.nodes[x.0].value.numel();
                let mut dx = vec![0.0; total];
                let rows = self.nodes[x.0].value.shape()[0];
                let stride = total / rows.max(1);
                dx[start * stride..start * stride + g.len()].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    acc(*p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::MeanAxis0 { x, n } => {
                let inv = 1.0 / *n as f64;
                let dx = (0..*n)
                    .flat_map(|_| g.iter().map(move |v| v * inv))
                    .collect();
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.numel()]),
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let b = labels.len();
                let classes = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * classes + l] -= scale;
                }
                acc(*logits, d);
            }
        }
    }
}
