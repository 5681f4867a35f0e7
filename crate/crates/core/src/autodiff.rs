//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its output value. Nodes are appended in execution order, so inputs
//! always precede their consumers and a single reverse sweep visits every
//! node after all of its consumers.
//!
//! Leaves come in three kinds: constants (never differentiated), inputs
//! (differentiated on request, read back from [`Gradients`]) and parameters
//! (bound to a slot in a [`ParameterStore`]; [`Tape::backward`] adds their
//! gradients into the store's accumulators).
//!
//! Conventions:
//! - `relu'(0) = 0`.
//! - `conv2d` is cross-correlation (no kernel flip).
//! - The only broadcast is `add_bias`, which adds a row vector to every row
//!   of a batch (or a per-channel bias inside `conv2d`).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, Layout, Tensor};

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameters with paired gradient accumulators of identical shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Value and gradient of one parameter, the value mutably.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        (&mut self.values[id.0], &self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        for (a, g) in self.grads[id.0].data_mut().iter_mut().zip(grad.data()) {
            *a += g;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding of `(k - 1) / 2` on each side; output keeps the input
    /// size at stride 1 for odd kernels.
    Same,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    LogSumExpRows(Var),
    PickRows(Var, Vec<usize>),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool2(Var),
    /// Sum over rows of a per-row scalar function whose gradient with
    /// respect to the row was computed during the forward pass.
    RowLoss {
        input: Var,
        local_grad: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`, zeros when `v` did not influence the
    /// output.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// An input leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// A leaf bound to a stored parameter.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// A parameter leaf that is read but never differentiated.
    pub fn frozen_param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of a `[batch×n]` matrix.
    pub fn add_bias(&mut self, t: Var, bias: Var) -> Result<Var> {
        let (tv, bv) = (self.value(t), self.value(bias));
        let (_, n) = tv.dims2("add_bias")?;
        if bv.len() != n || bv.shape().len() != 1 {
            return Err(Error::Dimension {
                op: "add_bias",
                left: tv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = tv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(t) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(t, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn relu(&mut self, t: Var) -> Var {
        let value = self.value(t).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(t);
        self.push(value, Op::Relu(t), rg)
    }

    pub fn scale(&mut self, t: Var, s: f64) -> Var {
        let value = self.value(t).scale(s);
        let rg = self.rg(t);
        self.push(value, Op::Scale(t, s), rg)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, t: Var, c: Tensor) -> Result<Var> {
        let value = self.value(t).zip_map(&c, "mul_const", |x, y| x * y)?;
        let rg = self.rg(t);
        Ok(self.push(value, Op::MulConst(t, c), rg))
    }

    pub fn reshape(&mut self, t: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(t).reshape(shape)?;
        let rg = self.rg(t);
        Ok(self.push(value, Op::Reshape(t), rg))
    }

    /// Collapses `[batch, ...]` to `[batch, rest]`.
    pub fn flatten(&mut self, t: Var) -> Result<Var> {
        let v = self.value(t);
        let shape = [v.rows(), v.row_len()];
        self.reshape(t, &shape)
    }

    pub fn sum(&mut self, t: Var) -> Var {
        let value = Tensor::scalar(self.value(t).sum());
        let rg = self.rg(t);
        self.push(value, Op::Sum(t), rg)
    }

    pub fn mean(&mut self, t: Var) -> Var {
        let value = Tensor::scalar(self.value(t).mean());
        let rg = self.rg(t);
        self.push(value, Op::Mean(t), rg)
    }

    /// Row-wise `log Σ_j exp(t[i, j])`, computed with a max shift.
    pub fn logsumexp_rows(&mut self, t: Var) -> Result<Var> {
        let tv = self.value(t);
        let (rows, _) = tv.dims2("logsumexp_rows")?;
        let out: Vec<f64> = (0..rows).map(|i| logsumexp(tv.row(i))).collect();
        let rg = self.rg(t);
        Ok(self.push(Tensor::vector(out), Op::LogSumExpRows(t), rg))
    }

    /// Selects `t[i, idx[i]]` for every row.
    pub fn pick_rows(&mut self, t: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(t);
        let (rows, cols) = tv.dims2("pick_rows")?;
        if idx.len() != rows {
            return Err(Error::Dimension {
                op: "pick_rows",
                left: tv.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= cols) {
            return Err(Error::Index { index: bad, len: cols });
        }
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| tv.row(i)[j]).collect();
        let rg = self.rg(t);
        Ok(self.push(Tensor::vector(out), Op::PickRows(t, idx.to_vec()), rg))
    }

    /// Sum of a per-row scalar function of a `[batch×m]` matrix.
    ///
    /// `f` returns the row's value and its gradient with respect to the row.
    pub fn row_loss<F>(&mut self, t: Var, mut f: F) -> Result<Var>
    where
        F: FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let tv = self.value(t);
        let (rows, cols) = tv.dims2("row_loss")?;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let (v, g) = f(i, tv.row(i))?;
            debug_assert_eq!(g.len(), cols);
            total += v;
            grad.extend(g);
        }
        let local_grad = Tensor::new(vec![rows, cols], grad)?;
        let rg = self.rg(t);
        Ok(self.push(Tensor::scalar(total), Op::RowLoss { input: t, local_grad }, rg))
    }

    /// 2-D cross-correlation of `[B, C, H, W]` with `[O, C, kh, kw]`,
    /// plus an optional per-output-channel bias of length `O`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (xv, kv) = (self.value(input), self.value(kernel));
        let (&[b, c, h, w], &[o, kc, kh, kw]) = (xv.shape(), kv.shape()) else {
            return Err(Error::Dimension {
                op: "conv2d",
                left: xv.shape().to_vec(),
                right: kv.shape().to_vec(),
            });
        };
        if kc != c || stride == 0 {
            return Err(Error::Dimension {
                op: "conv2d",
                left: xv.shape().to_vec(),
                right: kv.shape().to_vec(),
            });
        }
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => (kh.max(kw) - 1) / 2,
        };
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Dimension {
                op: "conv2d",
                left: xv.shape().to_vec(),
                right: kv.shape().to_vec(),
            });
        }
        if let Some(bv) = bias.map(|v| self.value(v)) {
            if bv.shape() != [o] {
                return Err(Error::Dimension {
                    op: "conv2d bias",
                    left: kv.shape().to_vec(),
                    right: bv.shape().to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            batch: b,
            channels: c,
            height: h,
            width: w,
            out_channels: o,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = im2col(xv.data(), &geom);
        let patches = geom.batch * geom.out_h * geom.out_w;
        let patch_len = c * kh * kw;
        // [patches × O] = cols · Kᵀ
        let mut prod = vec![0.0; patches * o];
        gemm_acc(
            patches,
            patch_len,
            o,
            &cols,
            Layout::Plain,
            kv.data(),
            Layout::Trans,
            &mut prod,
        );
        let spatial = geom.out_h * geom.out_w;
        let mut out = vec![0.0; b * o * spatial];
        let bias_vals = bias.map(|v| self.value(v).data().to_vec());
        for bi in 0..b {
            for s in 0..spatial {
                let src = &prod[(bi * spatial + s) * o..(bi * spatial + s + 1) * o];
                for (oc, &v) in src.iter().enumerate() {
                    let bb = bias_vals.as_ref().map_or(0.0, |bv| bv[oc]);
                    out[(bi * o + oc) * spatial + s] = v + bb;
                }
            }
        }
        let value = Tensor::new(vec![b, o, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|v| self.rg(v));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// 2×2 average pooling with stride 2 over `[B, C, H, W]`; odd trailing
    /// rows/columns are dropped.
    pub fn avg_pool2(&mut self, t: Var) -> Result<Var> {
        let tv = self.value(t);
        let &[b, c, h, w] = tv.shape() else {
            return Err(Error::Dimension {
                op: "avg_pool2",
                left: tv.shape().to_vec(),
                right: vec![0, 0, 0, 0],
            });
        };
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Dimension {
                op: "avg_pool2",
                left: tv.shape().to_vec(),
                right: vec![2, 2],
            });
        }
        let x = tv.data();
        let mut out = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &x[bc * h * w..(bc + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    out[bc * oh * ow + i * ow + j] = 0.25 * s;
                }
            }
        }
        let rg = self.rg(t);
        Ok(self.push(Tensor::new(vec![b, c, oh, ow], out)?, Op::AvgPool2(t), rg))
    }

    /// Mean temperature-scaled cross-entropy of `[batch×M]` logits:
    /// `mean_i [logsumexp(z_i / τ) − z_i[y_i] / τ]`, built from tape
    /// primitives.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], tau: f64) -> Result<Var> {
        let scaled = self.scale(logits, 1.0 / tau);
        let lse = self.logsumexp_rows(scaled)?;
        let picked = self.pick_rows(scaled, labels)?;
        let per_row = self.sub(lse, picked)?;
        Ok(self.mean(per_row))
    }

    /// Reverse sweep from a scalar output. Parameter gradients are added to
    /// `store`'s accumulators; all node gradients are returned.
    pub fn backward(&self, output: Var, store: &mut ParameterStore) -> Result<Gradients> {
        if !self.value(output).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let grads = self.vjp(output, Tensor::filled(self.value(output).shape(), 1.0))?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate(*id, g);
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian product: propagates `upstream` (shaped like
    /// `output`) back through the tape without touching any store.
    pub fn vjp(&self, output: Var, upstream: Tensor) -> Result<Gradients> {
        if upstream.shape() != self.value(output).shape() {
            return Err(Error::Dimension {
                op: "vjp",
                left: self.value(output).shape().to_vec(),
                right: upstream.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(upstream);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |v: Var, delta: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2("matmul")?;
                let (_, n) = bv.dims2("matmul")?;
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(m, n, k, g.data(), Layout::Plain, bv.data(), Layout::Trans, &mut ga);
                    send(*a, Tensor::new(vec![m, k], ga)?)?;
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_acc(k, m, n, av.data(), Layout::Trans, g.data(), Layout::Plain, &mut gb);
                    send(*b, Tensor::new(vec![k, n], gb)?)?;
                }
            }
            Op::AddBias(t, b) => {
                if self.rg(*b) {
                    let n = self.value(*b).len();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(*b, Tensor::vector(gb))?;
                }
                send(*t, g.clone())?;
            }
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.scale(-1.0))?;
            }
            Op::Relu(t) => {
                let gt = self
                    .value(*t)
                    .zip_map(g, "relu", |x, gv| if x > 0.0 { gv } else { 0.0 })?;
                send(*t, gt)?;
            }
            Op::Scale(t, s) => send(*t, g.scale(*s))?,
            Op::MulConst(t, c) => send(*t, g.zip_map(c, "mul_const", |a, b| a * b)?)?,
            Op::Reshape(t) => send(*t, g.reshape(self.value(*t).shape())?)?,
            Op::Sum(t) => send(*t, Tensor::filled(self.value(*t).shape(), g.item()))?,
            Op::Mean(t) => {
                let tv = self.value(*t);
                send(*t, Tensor::filled(tv.shape(), g.item() / tv.len() as f64))?;
            }
            Op::LogSumExpRows(t) => {
                let tv = self.value(*t);
                let lse = node.value.data();
                let cols = tv.row_len();
                let mut out = Vec::with_capacity(tv.len());
                for (i, row) in tv.data().chunks(cols).enumerate() {
                    out.extend(row.iter().map(|&z| (z - lse[i]).exp() * g.data()[i]));
                }
                send(*t, Tensor::new(tv.shape().to_vec(), out)?)?;
            }
            Op::PickRows(t, idx) => {
                let tv = self.value(*t);
                let cols = tv.row_len();
                let mut out = Tensor::zeros(tv.shape());
                for (i, &j) in idx.iter().enumerate() {
                    out.data_mut()[i * cols + j] = g.data()[i];
                }
                send(*t, out)?;
            }
            Op::RowLoss { input, local_grad } => send(*input, local_grad.scale(g.item()))?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let o = geom.out_channels;
                let spatial = geom.out_h * geom.out_w;
                let patches = geom.batch * spatial;
                let patch_len = geom.channels * geom.kh * geom.kw;
                // Upstream in [patches × O] layout.
                let mut gp = vec![0.0; patches * o];
                for bi in 0..geom.batch {
                    for oc in 0..o {
                        let src = &g.data()[(bi * o + oc) * spatial..(bi * o + oc + 1) * spatial];
                        for (s, &v) in src.iter().enumerate() {
                            gp[(bi * spatial + s) * o + oc] = v;
                        }
                    }
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let mut gb = vec![0.0; o];
                        for row in gp.chunks(o) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        send(*b, Tensor::vector(gb))?;
                    }
                }
                if self.rg(*kernel) {
                    let mut gk = vec![0.0; o * patch_len];
                    gemm_acc(o, patches, patch_len, &gp, Layout::Trans, cols, Layout::Plain, &mut gk);
                    send(*kernel, Tensor::new(self.value(*kernel).shape().to_vec(), gk)?)?;
                }
                if self.rg(*input) {
                    let mut gcols = vec![0.0; patches * patch_len];
                    let kv = self.value(*kernel).data();
                    gemm_acc(patches, o, patch_len, &gp, Layout::Plain, kv, Layout::Plain, &mut gcols);
                    let gx = col2im(&gcols, geom);
                    send(*input, Tensor::new(self.value(*input).shape().to_vec(), gx)?)?;
                }
            }
            Op::AvgPool2(t) => {
                let tv = self.value(*t);
                let &[b, c, h, w] = tv.shape() else { unreachable!() };
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; tv.len()];
                for bc in 0..b * c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let q = 0.25 * g.data()[bc * oh * ow + i * ow + j];
                            let base = bc * h * w;
                            out[base + 2 * i * w + 2 * j] += q;
                            out[base + 2 * i * w + 2 * j + 1] += q;
                            out[base + (2 * i + 1) * w + 2 * j] += q;
                            out[base + (2 * i + 1) * w + 2 * j + 1] += q;
                        }
                    }
                }
                send(*t, Tensor::new(tv.shape().to_vec(), out)?)?;
            }
        }
        Ok(())
    }
}

/// `log Σ exp(v)` with a max shift.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch_len = g.channels * g.kh * g.kw;
    let mut cols = vec![0.0; g.batch * g.out_h * g.out_w * patch_len];
    let mut p = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[p * patch_len..(p + 1) * patch_len];
                let mut q = 0;
                for c in 0..g.channels {
                    let plane = &x[(b * g.channels + c) * g.height * g.width..];
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                                dst[q] = plane[iy as usize * g.width + ix as usize];
                            }
                            q += 1;
                        }
                    }
                }
                p += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch_len = g.channels * g.kh * g.kw;
    let mut x = vec![0.0; g.batch * g.channels * g.height * g.width];
    let mut p = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[p * patch_len..(p + 1) * patch_len];
                let mut q = 0;
                for c in 0..g.channels {
                    let base = (b * g.channels + c) * g.height * g.width;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                                x[base + iy as usize * g.width + ix as usize] += src[q];
                            }
                            q += 1;
                        }
                    }
                }
                p += 1;
            }
        }
    }
    x
}

/// Central-difference gradient `(f(p + h·e_i) − f(p − h·e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, point: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = point.clone();
    let mut out = vec![0.0; point.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    Tensor::new(point.shape().to_vec(), out)
}

/// `|a − b| / max(1, |a|, |b|)`, the comparison used by every gradient check.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Largest [`rel_err`] over paired elements.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}
