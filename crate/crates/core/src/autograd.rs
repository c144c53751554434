//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`] holding its output value and
//! the inputs it was computed from. [`Tape::backward`] walks the nodes in reverse
//! recording order and accumulates vector-Jacobian products into each input that
//! participates in differentiation. A node participates when it is a leaf created
//! with [`Tape::param`] or when any of its inputs participates.
//!
//! ```
//! use dsamgn_core::{autograd::Tape, tensor::Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowVector(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SoftmaxRows(Var),
    Relu(Var),
    Mask { x: Var, keep: Vec<bool> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    PairwiseDistance(Var),
    Gather { x: Var, index: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Batch statistics produced by a training-mode [`Tape::batch_norm_1d`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide by `B`) variance, the one used to normalise.
    pub var: Vec<f64>,
}

/// Which statistics batch norm normalises with.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

pub const BN_EPS: f64 = 1e-5;

/// Distance added under the square root so the gradient exists at zero distance.
pub const DIST_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, present for differentiable nodes reached by
    /// the last [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient shaped like the node's value; zeros when the node was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value"),
            None => Tensor::zeros(&shape),
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, rg, op)
    }

    fn mat(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.derived(out, &[x], op)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.derived(out, &[a, b], op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        Ok(self.derived(out, &[x], Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |a| a * s)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |a| a + c)
    }

    /// `x[i, j] + bias[j]` for `x: m×n`, `bias: n`.
    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        let b = self.value(bias);
        if b.numel() != n {
            return Err(Error::shape(format!(
                "row bias of shape {:?} for matrix {:?}",
                b.shape(),
                self.value(x).shape()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, &bv) in data[i * n..(i + 1) * n].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.derived(out, &[x, bias], Op::AddRowVector(x, bias)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.derived(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        self.derived(Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Mean of a matrix over `axis` (0 averages rows into one length-`n` vector).
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        let v = self.value(x);
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; n];
                for i in 0..m {
                    for (a, &e) in acc.iter_mut().zip(v.row(i)) {
                        *a += e;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= m as f64);
                Tensor::new(vec![n], acc)?
            }
            1 => Tensor::new(
                vec![m],
                (0..m)
                    .map(|i| v.row(i).iter().sum::<f64>() / n as f64)
                    .collect(),
            )?,
            _ => return Err(Error::shape(format!("axis {axis} on a matrix"))),
        };
        Ok(self.derived(out, &[x], Op::MeanAxis { x, axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.derived(out, &[x], Op::Reshape(x)))
    }

    /// Channel-wise (column) concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.mat(p)?.0,
            None => return Err(Error::shape("concat of zero tensors")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.mat(p)?;
            if pm != m {
                return Err(Error::shape(format!(
                    "concat_cols of {:?} and {:?}",
                    self.value(parts[0]).shape(),
                    self.value(p).shape()
                )));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.derived(out, parts, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        if start + len > n {
            return Err(Error::shape(format!(
                "columns {start}..{} of a {m}×{n} matrix",
                start + len
            )));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.derived(out, &[x], Op::SliceCols { x, start }))
    }

    /// Splits the channel (column) axis into `parts` equal-width pieces.
    pub fn split_channels(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let (_, c) = self.mat(x)?;
        if parts == 0 || c % parts != 0 {
            return Err(Error::shape(format!(
                "cannot split {c} channels into {parts} equal parts"
            )));
        }
        let w = c / parts;
        (0..parts).map(|p| self.slice_cols(x, p * w, w)).collect()
    }

    /// Row-wise concatenation (along the leading axis) of matrices or vectors.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.value(p).shape().to_vec(),
            None => return Err(Error::shape("concat of zero tensors")),
        };
        let width = match first.as_slice() {
            [n] => *n,
            [_, n] => *n,
            s => return Err(Error::shape(format!("concat_rows of shape {s:?}"))),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            let (pm, pn) = match v.shape() {
                [n] => (1, *n),
                [m, n] => (*m, *n),
                s => return Err(Error::shape(format!("concat_rows of shape {s:?}"))),
            };
            if pn != width {
                return Err(Error::shape(format!(
                    "concat_rows of {first:?} and {:?}",
                    v.shape()
                )));
            }
            rows += pm;
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, width], data)?;
        Ok(self.derived(out, parts, Op::ConcatRows(parts.to_vec())))
    }

    /// Sub-tensor `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (&outer, inner) = v
            .shape()
            .split_first()
            .ok_or_else(|| Error::shape("slice of a scalar"))?;
        if start + len > outer {
            return Err(Error::shape(format!(
                "rows {start}..{} of leading extent {outer}",
                start + len
            )));
        }
        let step: usize = inner.iter().product();
        let mut shape = vec![len];
        shape.extend_from_slice(inner);
        let data = v.data()[start * step..(start + len) * step].to_vec();
        let out = Tensor::new(shape, data)?;
        Ok(self.derived(out, &[x], Op::SliceRows { x, start }))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        let v = self.value(x);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(softmax(v.row(i)));
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.derived(out, &[x], Op::SoftmaxRows(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |a| if a > 0.0 || a.is_nan() { a } else { 0.0 })
    }

    /// Zeroes every entry whose `keep` flag is false. The mask is a constant
    /// with respect to differentiation.
    pub fn mask(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let v = self.value(x);
        if keep.len() != v.numel() {
            return Err(Error::shape(format!(
                "mask of length {} for shape {:?}",
                keep.len(),
                v.shape()
            )));
        }
        let data = v
            .data()
            .iter()
            .zip(&keep)
            .map(|(&a, &k)| if k { a } else { 0.0 })
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.derived(out, &[x], Op::Mask { x, keep }))
    }

    /// Batch normalisation of `x: B×C` with learnable per-channel scale and shift.
    ///
    /// With [`NormStats::Batch`] the batch statistics are used and returned so the
    /// caller can update its running estimates.
    pub fn batch_norm_1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (b, c) = self.mat(x)?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).numel() != c {
                return Err(Error::shape(format!(
                    "batch norm {name} of shape {:?} for {b}×{c} input",
                    self.value(p).shape()
                )));
            }
        }
        let v = self.value(x);
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                if b < 2 {
                    return Err(Error::Domain(format!(
                        "batch norm in training mode needs at least 2 rows, got {b}"
                    )));
                }
                let mut mean = vec![0.0; c];
                for i in 0..b {
                    for (m, &e) in mean.iter_mut().zip(v.row(i)) {
                        *m += e;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; c];
                for i in 0..b {
                    for j in 0..c {
                        let d = v.at(i, j) - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s /= b as f64);
                (mean.clone(), var.clone(), Some(BatchStats { mean, var }))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("running statistics width differs from input"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + BN_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; b * c];
        let mut data = vec![0.0; b * c];
        for i in 0..b {
            for j in 0..c {
                let h = (v.at(i, j) - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                data[i * c + j] = h * g[j] + bt[j];
            }
        }
        let out = Tensor::new(vec![b, c], data)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training: batch.is_some(),
        };
        Ok((self.derived(out, &[x, gamma, beta], op), batch))
    }

    /// `D[i][j] = sqrt(|x_i - x_j|² + DIST_EPS)` over the rows of `x`.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let (b, c) = self.mat(x)?;
        let v = self.value(x);
        let mut data = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                let d2: f64 = (0..c).map(|k| (v.at(i, k) - v.at(j, k)).powi(2)).sum();
                data[i * b + j] = (d2 + DIST_EPS).sqrt();
            }
        }
        let out = Tensor::new(vec![b, b], data)?;
        Ok(self.derived(out, &[x], Op::PairwiseDistance(x)))
    }

    /// Picks entries of the flattened tensor into a vector.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::shape(format!(
                "gather index {bad} out of range for {} entries",
                v.numel()
            )));
        }
        let data = index.iter().map(|&i| v.data()[i]).collect();
        let out = Tensor::new(vec![index.len()], data)?;
        Ok(self.derived(out, &[x], Op::Gather { x, index }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.mat(logits)?;
        if labels.len() != b {
            return Err(Error::shape(format!(
                "{} labels for {b} rows of logits",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Domain(format!(
                "label {bad} outside [0, {k}) classes"
            )));
        }
        let v = self.value(logits);
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = v.row(i);
            let lse = log_sum_exp(row);
            loss += lse - row[label];
            probs.extend(row.iter().map(|&z| (z - lse).exp()));
        }
        let out = Tensor::scalar(loss / b as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.derived(out, &[logits], op))
    }

    /// Single-image 2-D convolution. `x: Cin×H×W`, `w: Cout×Cin×k×k`, `b: Cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let (cin, h, wd) = match xs {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape(format!("conv2d input of shape {s:?}"))),
        };
        let (cout, k) = match ws {
            [o, i, k1, k2] if *i == cin && k1 == k2 => (*o, *k1),
            s => {
                return Err(Error::shape(format!(
                    "conv2d weight {s:?} for input {xs:?}"
                )))
            }
        };
        if self.value(b).numel() != cout || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d bias {:?} / geometry for input {xs:?}",
                self.value(b).shape()
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bv[o];
                    for ci in 0..cin {
                        for ky in 0..k {
                            let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&y| y < h)
                            else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ix) =
                                    (ox * stride + kx).checked_sub(pad).filter(|&x| x < wd)
                                else {
                                    continue;
                                };
                                acc += wv[((o * cin + ci) * k + ky) * k + kx]
                                    * xv[(ci * h + iy) * wd + ix];
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        let out = Tensor::new(vec![cout, ho, wo], out)?;
        Ok(self.derived(
            out,
            &[x, w, b],
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// Populates gradients of every differentiable node reachable from `loss`.
    ///
    /// A tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Autograd(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        // Adds into the gradient buffer of `v` when it participates.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2()?;
                let n = nodes[b.0].value.dims2()?.1;
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |da| {
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * bv[p * n + j];
                            }
                            da[r * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..m {
                        for p in 0..k {
                            let a_rp = av[r * k + p];
                            for j in 0..n {
                                db[p * n + j] += a_rp * g[r * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = nodes[x.0].value.dims2()?;
                acc(*x, &mut |dx| {
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(o, &e)| *o -= e));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| {
                    for ((o, &e), &y) in d.iter_mut().zip(g).zip(bv) {
                        *o += e * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((o, &e), &x) in d.iter_mut().zip(g).zip(av) {
                        *o += e * x;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(o, &e)| *o += s * e)
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::AddRowVector(x, bias) => {
                let (m, n) = nodes[x.0].value.dims2()?;
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    for r in 0..m {
                        add_into(d, &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let scale = g[0] / nodes[x.0].value.numel().max(1) as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|o| *o += scale));
            }
            Op::MeanAxis { x, axis } => {
                let (m, n) = nodes[x.0].value.dims2()?;
                let axis = *axis;
                acc(*x, &mut |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += if axis == 0 {
                                g[c] / m as f64
                            } else {
                                g[r] / n as f64
                            };
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.dims2()?.1;
                let mut offset = 0;
                for p in parts {
                    let (m, w) = nodes[p.0].value.dims2()?;
                    acc(*p, &mut |d| {
                        for r in 0..m {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = nodes[x.0].value.dims2()?;
                let w = out.dims2()?.1;
                let start = *start;
                acc(*x, &mut |d| {
                    for r in 0..m {
                        add_into(&mut d[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(*p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let step = out.numel() / out.shape()[0].max(1);
                let off = start * step;
                acc(*x, &mut |d| add_into(&mut d[off..off + out.numel()], g));
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = out.dims2()?;
                let y = out.data();
                acc(*x, &mut |d| {
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                        for c in row {
                            d[c] += y[c] * (g[c] - dot);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    for ((o, &e), &a) in d.iter_mut().zip(g).zip(xv) {
                        if a > 0.0 {
                            *o += e;
                        }
                    }
                });
            }
            Op::Mask { x, keep } => acc(*x, &mut |d| {
                for ((o, &e), &k) in d.iter_mut().zip(g).zip(keep) {
                    if k {
                        *o += e;
                    }
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (b, c) = out.dims2()?;
                let gv = nodes[gamma.0].value.data();
                acc(*gamma, &mut |d| {
                    for r in 0..b {
                        for j in 0..c {
                            d[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for r in 0..b {
                        add_into(d, &g[r * c..(r + 1) * c]);
                    }
                });
                acc(*x, &mut |d| {
                    for j in 0..c {
                        if !*training {
                            for r in 0..b {
                                d[r * c + j] += g[r * c + j] * gv[j] * inv_std[j];
                            }
                            continue;
                        }
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for r in 0..b {
                            let dh = g[r * c + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * c + j];
                        }
                        let bf = b as f64;
                        for r in 0..b {
                            let dh = g[r * c + j] * gv[j];
                            d[r * c + j] +=
                                inv_std[j] / bf * (bf * dh - sum_dh - xhat[r * c + j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::PairwiseDistance(x) => {
                let (b, c) = nodes[x.0].value.dims2()?;
                let xv = &nodes[x.0].value;
                let dist = out.data();
                acc(*x, &mut |d| {
                    for r in 0..b {
                        for s in 0..b {
                            if r == s {
                                continue;
                            }
                            let coef = g[r * b + s] / dist[r * b + s];
                            for k in 0..c {
                                let diff = coef * (xv.at(r, k) - xv.at(s, k));
                                d[r * c + k] += diff;
                                d[s * c + k] -= diff;
                            }
                        }
                    }
                });
            }
            Op::Gather { x, index } => acc(*x, &mut |d| {
                for (&ix, &e) in index.iter().zip(g) {
                    d[ix] += e;
                }
            }),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (b, k) = nodes[logits.0].value.dims2()?;
                let scale = g[0] / b as f64;
                acc(*logits, &mut |d| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            d[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (cin, h, wd) = match nodes[x.0].value.shape() {
                    [c, h, w] => (*c, *h, *w),
                    _ => unreachable!("validated in forward"),
                };
                let ws = nodes[w.0].value.shape();
                let (cout, k) = (ws[0], ws[2]);
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                let (stride, pad) = (*stride, *pad);
                let (xv, wv) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                // Visits every (output, weight, input) triple that the forward pass summed.
                let for_each_tap = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for o in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let oi = (o * ho + oy) * wo + ox;
                                for ci in 0..cin {
                                    for ky in 0..k {
                                        let Some(iy) =
                                            (oy * stride + ky).checked_sub(pad).filter(|&y| y < h)
                                        else {
                                            continue;
                                        };
                                        for kx in 0..k {
                                            let Some(ix) = (ox * stride + kx)
                                                .checked_sub(pad)
                                                .filter(|&v| v < wd)
                                            else {
                                                continue;
                                            };
                                            f(
                                                oi,
                                                ((o * cin + ci) * k + ky) * k + kx,
                                                (ci * h + iy) * wd + ix,
                                            );
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                acc(*b, &mut |d| {
                    for o in 0..cout {
                        d[o] += g[o * ho * wo..(o + 1) * ho * wo].iter().sum::<f64>();
                    }
                });
                acc(*w, &mut |d| for_each_tap(&mut |oi, wi, xi| d[wi] += g[oi] * xv[xi]));
                acc(*x, &mut |d| for_each_tap(&mut |oi, wi, xi| d[xi] += g[oi] * wv[wi]));
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|&z| (z - max).exp()).sum();
    row.iter().map(move |&z| (z - max).exp() / denom)
}
