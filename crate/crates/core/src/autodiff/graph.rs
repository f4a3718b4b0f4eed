//! Tape-based reverse-mode differentiation at layer granularity.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep simply walks it in reverse.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Caller-chosen identifier for a trainable tensor bound into a graph.
pub type ParamId = usize;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BnMode,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Add(Var, Var),
    Flatten(Var),
    Scale(Var, f64),
    Sum(Var),
    Mse {
        pred: Var,
        label: Var,
    },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics recorded by a train-mode batchnorm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var: Vec<f64>,
}

/// Gradients of a scalar with respect to every bound parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn take(&mut self, id: ParamId) -> Option<Tensor> {
        self.by_param.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.get().all_finite(), "non-finite forward value");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, false)
    }

    /// Borrowed constant, e.g. a frozen parameter or a running statistic.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, false)
    }

    /// Trainable parameter; its gradient is reported under `id`.
    pub fn param(&mut self, t: &'a Tensor, id: ParamId) -> Var {
        self.push(Value::Borrowed(t), Op::Param(id), true)
    }

    /// Either a parameter or a constant depending on `id`.
    pub fn bind(&mut self, t: &'a Tensor, id: Option<ParamId>) -> Var {
        match id {
            Some(id) => self.param(t, id),
            None => self.constant(t),
        }
    }

    /// 2-D cross-correlation with "same" zero padding.
    ///
    /// `input` is `[B, H, W, Cin]`, `kernel` is `[Kh, Kw, Cin, Cout]`, `bias`
    /// is `[Cout]`; the output is `[B, ceil(H/sh), ceil(W/sw), Cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: (usize, usize)) -> Result<Var> {
        let (xs, ks, bs) = (
            self.value(input).shape().to_vec(),
            self.value(kernel).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        if xs.len() != 4 || ks.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "conv2d expects 4-d input/kernel and 1-d bias, got {xs:?}, {ks:?}, {bs:?}"
            )));
        }
        if xs[3] != ks[2] || ks[3] != bs[0] {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {xs:?}, kernel {ks:?}, bias {bs:?}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 || ks[0] == 0 || ks[1] == 0 {
            return Err(Error::shape("conv2d stride and kernel must be at least 1"));
        }
        let geom = ConvGeom::same(xs[0], xs[1], xs[2], xs[3], ks[0], ks[1], ks[3], stride);
        let mut cols = Vec::new();
        kernels::im2col(self.value(input).data(), &geom, &mut cols);
        let mut out = vec![0.0; geom.out_rows() * geom.cout];
        kernels::add_row_bias(&mut out, self.value(bias).data());
        kernels::gemm(
            geom.out_rows(),
            geom.patch_len(),
            geom.cout,
            &cols,
            false,
            self.value(kernel).data(),
            false,
            &mut out,
            1.0,
        );
        let needs_grad = self.needs(input) || self.needs(kernel) || self.needs(bias);
        if !self.needs(kernel) {
            cols = Vec::new();
        }
        let shape = vec![geom.batch, geom.ho, geom.wo, geom.cout];
        Ok(self.push(
            Value::Owned(Tensor::new(shape, out)?),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            needs_grad,
        ))
    }

    /// Batch normalization over every axis but the last (channel) one.
    ///
    /// In [`BnMode::Train`] the batch statistics are used and recorded (see
    /// [`Graph::batch_stats`]); in [`BnMode::Eval`] `running` supplies the
    /// mean and variance.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: Option<(&Tensor, &Tensor)>,
    ) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let c = *xs.last().ok_or_else(|| Error::shape("batch_norm on a 0-d tensor"))?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "batch_norm affine parameters must be [{c}]"
            )));
        }
        let x = self.value(input).data();
        let rows = x.len() / c.max(1);
        let (mean, var, batch_mean, batch_var) = match mode {
            BnMode::Train => {
                if xs[0] < 2 {
                    return Err(Error::contract(
                        "batch_norm in train mode needs a batch of at least 2",
                    ));
                }
                let (mean, var) = kernels::channel_moments(x, c);
                let unbiased = var
                    .iter()
                    .map(|v| v * rows as f64 / (rows as f64 - 1.0))
                    .collect();
                (mean.clone(), var, mean, unbiased)
            }
            BnMode::Eval => {
                let (rm, rv) = running
                    .ok_or_else(|| Error::contract("eval-mode batch_norm needs running stats"))?;
                if rm.shape() != [c] || rv.shape() != [c] {
                    return Err(Error::shape("running statistics shape mismatch"));
                }
                (rm.data().to_vec(), rv.data().to_vec(), Vec::new(), Vec::new())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let base = r * c;
            for ch in 0..c {
                let h = (x[base + ch] - mean[ch]) * inv_std[ch];
                xhat[base + ch] = h;
                out[base + ch] = g[ch] * h + b[ch];
            }
        }
        let needs_grad = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Value::Owned(Tensor::new(xs, out)?),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
                batch_mean,
                batch_var,
            },
            needs_grad,
        ))
    }

    /// Statistics of a train-mode batchnorm node, `None` for any other node.
    pub fn batch_stats(&self, v: Var) -> Option<BatchStats> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                mode: BnMode::Train,
                batch_mean,
                batch_var,
                ..
            } => Some(BatchStats {
                mean: batch_mean.clone(),
                var: batch_var.clone(),
            }),
            _ => None,
        }
    }

    /// `input [B, in] . weight [in, out] + bias [out]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape().to_vec(),
            self.value(weight).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[1] || bs != [ws[1]] {
            return Err(Error::shape(format!(
                "dense shape mismatch: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (batch, n_in, n_out) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; batch * n_out];
        kernels::add_row_bias(&mut out, self.value(bias).data());
        kernels::gemm(
            batch,
            n_in,
            n_out,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            1.0,
        );
        let needs_grad = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Value::Owned(Tensor::new(vec![batch, n_out], out)?),
            Op::Dense {
                input,
                weight,
                bias,
            },
            needs_grad,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs_grad = self.needs(x);
        self.push(Value::Owned(out), Op::Relu(x), needs_grad)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs_grad = self.needs(a) || self.needs(b);
        Ok(self.push(Value::Owned(out), Op::Add(a, b), needs_grad))
    }

    /// Row-major reshape `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let batch = *t
            .shape()
            .first()
            .ok_or_else(|| Error::shape("flatten of a 0-d tensor"))?;
        let per = t.len() / batch.max(1);
        let out = t.clone().reshape(vec![batch, per])?;
        let needs_grad = self.needs(x);
        Ok(self.push(Value::Owned(out), Op::Flatten(x), needs_grad))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs_grad = self.needs(x);
        self.push(Value::Owned(out), Op::Scale(x, factor), needs_grad)
    }

    /// Sum of all entries as a 0-d tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs_grad = self.needs(x);
        self.push(Value::Owned(Tensor::scalar(s)), Op::Sum(x), needs_grad)
    }

    /// Mean squared error over every entry of `pred` and `label`.
    pub fn mse(&mut self, pred: Var, label: Var) -> Result<Var> {
        let (p, l) = (self.value(pred), self.value(label));
        if p.shape() != l.shape() {
            return Err(Error::shape(format!(
                "mse shape mismatch: {:?} vs {:?}",
                p.shape(),
                l.shape()
            )));
        }
        if p.is_empty() {
            return Err(Error::contract("mse of an empty batch"));
        }
        let n = p.len() as f64;
        let s: f64 = p
            .data()
            .iter()
            .zip(l.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let needs_grad = self.needs(pred) || self.needs(label);
        Ok(self.push(
            Value::Owned(Tensor::scalar(s / n)),
            Op::Mse { pred, label },
            needs_grad,
        ))
    }

    /// Reverse sweep from the scalar `loss`. Gradient accumulators are fresh
    /// for every call, so repeated calls return identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("backward called on a node that was never evaluated"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| {
                if !self.needs(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match out.by_param.get_mut(id) {
                    Some(acc) => acc.add_assign(&grad),
                    None => {
                        out.by_param.insert(*id, grad);
                    }
                },
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                    cols,
                } => {
                    let dy = grad.data();
                    if self.needs(*kernel) {
                        let mut dk = vec![0.0; geom.patch_len() * geom.cout];
                        kernels::gemm(
                            geom.patch_len(),
                            geom.out_rows(),
                            geom.cout,
                            cols,
                            true,
                            dy,
                            false,
                            &mut dk,
                            0.0,
                        );
                        let shape = self.value(*kernel).shape().to_vec();
                        send(&mut grads, *kernel, Tensor::new(shape, dk)?);
                    }
                    if self.needs(*bias) {
                        let db = kernels::column_sums(dy, geom.cout);
                        send(&mut grads, *bias, Tensor::from_vec(db));
                    }
                    if self.needs(*input) {
                        let mut dcols = vec![0.0; geom.out_rows() * geom.patch_len()];
                        kernels::gemm(
                            geom.out_rows(),
                            geom.cout,
                            geom.patch_len(),
                            dy,
                            false,
                            self.value(*kernel).data(),
                            true,
                            &mut dcols,
                            0.0,
                        );
                        let mut dx = vec![0.0; geom.batch * geom.h * geom.w * geom.cin];
                        kernels::col2im(&dcols, geom, &mut dx);
                        let shape = self.value(*input).shape().to_vec();
                        send(&mut grads, *input, Tensor::new(shape, dx)?);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    mode,
                    ..
                } => {
                    let c = inv_std.len();
                    let dy = grad.data();
                    let rows = dy.len() / c;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for r in 0..rows {
                        for ch in 0..c {
                            let k = r * c + ch;
                            dgamma[ch] += dy[k] * xhat[k];
                            dbeta[ch] += dy[k];
                        }
                    }
                    if self.needs(*input) {
                        let g = self.value(*gamma).data();
                        let mut dx = vec![0.0; dy.len()];
                        match mode {
                            BnMode::Train => {
                                let m = rows as f64;
                                // dgamma/dbeta are exactly the sums of dxhat*xhat and dxhat over gamma.
                                for r in 0..rows {
                                    for ch in 0..c {
                                        let k = r * c + ch;
                                        dx[k] = g[ch] * inv_std[ch] / m
                                            * (m * dy[k] - dbeta[ch] - xhat[k] * dgamma[ch]);
                                    }
                                }
                            }
                            BnMode::Eval => {
                                for r in 0..rows {
                                    for ch in 0..c {
                                        let k = r * c + ch;
                                        dx[k] = dy[k] * g[ch] * inv_std[ch];
                                    }
                                }
                            }
                        }
                        let shape = grad.shape().to_vec();
                        send(&mut grads, *input, Tensor::new(shape, dx)?);
                    }
                    send(&mut grads, *gamma, Tensor::from_vec(dgamma));
                    send(&mut grads, *beta, Tensor::from_vec(dbeta));
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let xs = self.value(*input).shape();
                    let (batch, n_in) = (xs[0], xs[1]);
                    let n_out = self.value(*weight).shape()[1];
                    let dy = grad.data();
                    if self.needs(*weight) {
                        let mut dw = vec![0.0; n_in * n_out];
                        kernels::gemm(
                            n_in,
                            batch,
                            n_out,
                            self.value(*input).data(),
                            true,
                            dy,
                            false,
                            &mut dw,
                            0.0,
                        );
                        send(&mut grads, *weight, Tensor::new(vec![n_in, n_out], dw)?);
                    }
                    if self.needs(*bias) {
                        send(&mut grads, *bias, Tensor::from_vec(kernels::column_sums(dy, n_out)));
                    }
                    if self.needs(*input) {
                        let mut dx = vec![0.0; batch * n_in];
                        kernels::gemm(
                            batch,
                            n_out,
                            n_in,
                            dy,
                            false,
                            self.value(*weight).data(),
                            true,
                            &mut dx,
                            0.0,
                        );
                        send(&mut grads, *input, Tensor::new(vec![batch, n_in], dx)?);
                    }
                }
                Op::Relu(x) => {
                    let mut g = grad;
                    for (d, y) in g.data_mut().iter_mut().zip(node.value.get().data()) {
                        if *y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    send(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) && self.needs(*b) {
                        send(&mut grads, *a, grad.clone());
                    } else if self.needs(*a) {
                        send(&mut grads, *a, grad);
                        continue;
                    }
                    send(&mut grads, *b, grad);
                }
                Op::Flatten(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    send(&mut grads, *x, grad.reshape(shape)?);
                }
                Op::Scale(x, f) => {
                    let mut g = grad;
                    g.data_mut().iter_mut().for_each(|v| *v *= f);
                    send(&mut grads, *x, g);
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    send(&mut grads, *x, Tensor::full(&shape, grad.item()));
                }
                Op::Mse { pred, label } => {
                    let (p, l) = (self.value(*pred), self.value(*label));
                    let k = 2.0 * grad.item() / p.len() as f64;
                    let dp: Vec<f64> = p
                        .data()
                        .iter()
                        .zip(l.data())
                        .map(|(a, b)| k * (a - b))
                        .collect();
                    if self.needs(*label) {
                        let dl = dp.iter().map(|v| -v).collect();
                        send(&mut grads, *label, Tensor::new(l.shape().to_vec(), dl)?);
                    }
                    send(&mut grads, *pred, Tensor::new(p.shape().to_vec(), dp)?);
                }
            }
        }
        Ok(out)
    }
}
