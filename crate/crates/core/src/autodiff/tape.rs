use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use super::params::ParamStore;
use super::sparse::{CsrMatrix, ModularityOperand};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ReduceSum(Var),
    ColumnSum(Var),
    Norm(Var),
    Reshape(Var),
    SpMM {
        matrix: Arc<CsrMatrix>,
        x: Var,
    },
    TraceQuadform {
        s: Var,
        operand: Arc<ModularityOperand>,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Operators validate shapes eagerly and return [`Error::Shape`] on
/// mismatch. Gradients are only propagated into values that depend on a
/// leaf created with [`Tape::leaf`] or [`Tape::param`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients of a scalar with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Tensor::new(self.shapes[var.0].clone(), g.clone()).ok()
    }

    /// Gradient of `var`, zeros when `var` does not influence the output.
    pub fn get_or_zero(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Named parameters registered through [`Tape::param`].
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter from `store` as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .value(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))?
            .clone();
        let var = self.leaf(value);
        self.params.push((name.to_string(), var));
        Ok(var)
    }

    /// Loads a parameter as a constant, for inference-only passes.
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .value(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))?
            .clone();
        Ok(self.constant(value))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| shape_err(format!("{what} expects a matrix, got {:?}", self.value(v).shape())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`c` bias to every row of an `r×c` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_row_bias")?;
        if self.value(bias).len() != c {
            return Err(shape_err(format!(
                "bias of {} values for {c} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|v| v * factor).collect(),
        )?;
        Ok(self.push(value, Op::Scale(x, factor), &[x]))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|v| v + offset).collect(),
        )?;
        Ok(self.push(value, Op::AddScalar(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        )?;
        Ok(self.push(value, Op::Relu(x), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "softmax_rows")?;
        if c == 0 {
            return Err(shape_err("softmax over empty rows"));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    /// Normalizes every slice along the leading axis to zero mean and unit
    /// variance (biased estimator, `eps` added to the variance).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || shape[0] == 0 {
            return Err(shape_err(format!("layer_norm needs rank >= 2, got {shape:?}")));
        }
        let width: usize = shape[1..].iter().product();
        if width == 0 {
            return Err(shape_err("layer_norm over empty slices"));
        }
        let mut out = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(shape[0]);
        for slice in out.chunks_mut(width) {
            let mean = slice.iter().sum::<f64>() / width as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in slice.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LayerNorm { x, inv_std }, &[x]))
    }

    /// 1-D convolution of `x (batch, in_channels, length)` with
    /// `weight (out_channels, in_channels, kernel)` and optional bias.
    pub fn conv1d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (batch, in_channels, length) = match self.value(x).shape() {
            &[b, c, l] => (b, c, l),
            s => return Err(shape_err(format!("conv1d input must be (batch, channels, length), got {s:?}"))),
        };
        let (out_channels, kernel) = match self.value(weight).shape() {
            &[o, c, k] if c == in_channels => (o, k),
            s => {
                return Err(shape_err(format!(
                    "conv1d weight {s:?} incompatible with {in_channels} input channels"
                )))
            }
        };
        if stride == 0 || kernel == 0 {
            return Err(shape_err("conv1d stride and kernel must be positive"));
        }
        if length + 2 * padding < kernel {
            return Err(shape_err(format!(
                "conv1d kernel {kernel} longer than padded input {}",
                length + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if self.value(b).len() != out_channels {
                return Err(shape_err("conv1d bias length must equal out_channels"));
            }
        }
        let geometry = ConvGeometry {
            in_channels,
            length,
            kernel,
            stride,
            padding,
            out_length: (length + 2 * padding - kernel) / stride + 1,
        };
        let lout = geometry.out_length;
        let rows = geometry.patch_rows();
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let mut out = vec![0.0; batch * out_channels * lout];
        let mut cols = vec![0.0; rows * lout];
        for b in 0..batch {
            kernels::im2col(&xd[b * in_channels * length..(b + 1) * in_channels * length], &geometry, &mut cols);
            let dst = &mut out[b * out_channels * lout..(b + 1) * out_channels * lout];
            if let Some(bv) = bias {
                for (row, &bias_v) in dst.chunks_mut(lout).zip(self.value(bv).data()) {
                    row.fill(bias_v);
                }
            }
            kernels::gemm_nn(wd, &cols, out_channels, rows, lout, dst);
        }
        let value = Tensor::new(vec![batch, out_channels, lout], out)?;
        let inputs: Vec<Var> = [Some(x), Some(weight), bias].into_iter().flatten().collect();
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                weight,
                bias,
                geometry,
            },
            &inputs,
        ))
    }

    /// Max pooling over the last axis of `(batch, channels, length)`.
    /// Ties resolve to the lowest index in the window.
    pub fn maxpool1d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (batch, channels, length) = match self.value(x).shape() {
            &[b, c, l] => (b, c, l),
            s => return Err(shape_err(format!("maxpool1d input must be (batch, channels, length), got {s:?}"))),
        };
        if size == 0 || stride == 0 || length < size {
            return Err(shape_err(format!(
                "maxpool1d window {size} stride {stride} on length {length}"
            )));
        }
        let lout = (length - size) / stride + 1;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(batch * channels * lout);
        let mut argmax = Vec::with_capacity(batch * channels * lout);
        for lane in 0..batch * channels {
            let base = lane * length;
            for t in 0..lout {
                let start = base + t * stride;
                let mut best = start;
                for i in start + 1..start + size {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(vec![batch, channels, lout], out)?;
        Ok(self.push(value, Op::MaxPool1d { x, argmax }, &[x]))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "l2_normalize_rows")?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in out.chunks_mut(c.max(1)) {
            let norm = kernels::dot(row, row).sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::ReduceSum(x), &[x]))
    }

    /// Sums the rows of an `r×c` matrix into a length-`c` vector.
    pub fn column_sum(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.dims2(x, "column_sum")?;
        let mut out = vec![0.0; c];
        for row in self.value(x).rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let value = Tensor::new(vec![c], out)?;
        Ok(self.push(value, Op::ColumnSum(x), &[x]))
    }

    /// Euclidean (Frobenius) norm of all elements.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        let n = kernels::dot(d, d).sqrt();
        Ok(self.push(Tensor::scalar(n), Op::Norm(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Sparse-dense product `matrix · x`.
    pub fn spmm(&mut self, matrix: Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let (r, w) = self.dims2(x, "spmm")?;
        if r != matrix.cols() {
            return Err(shape_err(format!(
                "spmm {}x{} by {r}x{w}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        let out = matrix.matmul_dense(self.value(x).data(), w);
        let value = Tensor::new(vec![matrix.rows(), w], out)?;
        Ok(self.push(value, Op::SpMM { matrix, x }, &[x]))
    }

    /// `Tr(Sᵀ A S) − Tr(Sᵀ d dᵀ S) / 2m`, i.e. `Tr(Sᵀ B S)` with the
    /// modularity matrix `B` kept in sparse-plus-rank-one form.
    pub fn trace_quadform(&mut self, s: Var, operand: Arc<ModularityOperand>) -> Result<Var> {
        let (n, k) = self.dims2(s, "trace_quadform")?;
        if n != operand.nodes() {
            return Err(shape_err(format!(
                "assignment has {n} rows, graph has {} nodes",
                operand.nodes()
            )));
        }
        let sd = self.value(s).data();
        let a_s = operand.adjacency().matmul_dense(sd, k);
        let quad = kernels::dot(sd, &a_s);
        let dt_s = degree_projection(operand.degrees(), sd, k);
        let rank_one = kernels::dot(&dt_s, &dt_s) / (2.0 * operand.edge_count());
        Ok(self.push(
            Tensor::scalar(quad - rank_one),
            Op::TraceQuadform { s, operand },
            &[s],
        ))
    }

    /// Mean softmax cross-entropy of each row of `logits` against the
    /// column `targets[i]`. With `exclude_diagonal`, column `i` is removed
    /// from the softmax of row `i`.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        exclude_diagonal: bool,
    ) -> Result<Var> {
        let (r, c) = self.dims2(logits, "cross_entropy_rows")?;
        if r == 0 || targets.len() != r {
            return Err(shape_err(format!("{} targets for {r} rows", targets.len())));
        }
        let available = if exclude_diagonal { c.saturating_sub(1) } else { c };
        if available == 0 {
            return Err(shape_err("cross entropy needs at least one candidate column"));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c || (exclude_diagonal && t == i) {
                return Err(Error::Argument(format!("invalid target {t} for row {i}")));
            }
            let row = &src[i * c..(i + 1) * c];
            let keep = |j: usize| !(exclude_diagonal && j == i);
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in (0..c).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for j in (0..c).filter(|&j| keep(j)) {
                probs[i * c + j] /= denom;
            }
            total += max + denom.ln() - row[t];
        }
        Ok(self.push(
            Tensor::scalar(total / r as f64),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a single-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(g, self.value(*b).data(), m, n, k, &mut da);
                    accumulate(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(self.value(*a).data(), g, m, k, n, &mut db);
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().expect("matrix");
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c.max(1)) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[bias.0], db);
                }
            }
            Op::Scale(x, f) => {
                accumulate(&mut grads[x.0], g.iter().map(|v| v * f).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                accumulate(&mut grads[x.0], g.to_vec());
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let inner = kernels::dot(yr, gr);
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - inner);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let width = y.len() / inv_std.len();
                let mut dx = vec![0.0; y.len()];
                for (s, &inv) in inv_std.iter().enumerate() {
                    let span = s * width..(s + 1) * width;
                    let (ys, gs) = (&y[span.clone()], &g[span.clone()]);
                    let g_mean = gs.iter().sum::<f64>() / width as f64;
                    let gy_mean = kernels::dot(gs, ys) / width as f64;
                    for ((d, yv), gv) in dx[span].iter_mut().zip(ys).zip(gs) {
                        *d = inv * (gv - g_mean - yv * gy_mean);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Conv1d {
                x,
                weight,
                bias,
                geometry,
            } => self.conv1d_backward(*x, *weight, *bias, geometry, g, grads),
            Op::MaxPool1d { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&src, gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let c = node.value.shape()[1].max(1);
                let mut dx = vec![0.0; y.len()];
                for (((dr, yr), gr), &norm) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)).zip(norms) {
                    let inner = kernels::dot(yr, gr);
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * inner) / norm;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::ReduceSum(x) => {
                accumulate(&mut grads[x.0], vec![g[0]; self.value(*x).len()]);
            }
            Op::ColumnSum(x) => {
                let len = self.value(*x).len();
                let c = g.len().max(1);
                accumulate(&mut grads[x.0], (0..len).map(|i| g[i % c]).collect());
            }
            Op::Norm(x) => {
                let n = node.value.item();
                let scale = if n > 0.0 { g[0] / n } else { 0.0 };
                accumulate(&mut grads[x.0], self.value(*x).data().iter().map(|v| v * scale).collect());
            }
            Op::SpMM { matrix, x } => {
                let w = node.value.shape()[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                matrix.transpose_matmul_dense_into(g, w, &mut dx);
                accumulate(&mut grads[x.0], dx);
            }
            Op::TraceQuadform { s, operand } => {
                let (_, k) = self.value(*s).dims2().expect("matrix");
                let sd = self.value(*s).data();
                let a = operand.adjacency();
                let mut ds = vec![0.0; sd.len()];
                a.matmul_dense_into(sd, k, &mut ds);
                a.transpose_matmul_dense_into(sd, k, &mut ds);
                let dt_s = degree_projection(operand.degrees(), sd, k);
                let inv_m = 1.0 / operand.edge_count();
                for (row, &d) in ds.chunks_mut(k).zip(operand.degrees()) {
                    for (v, p) in row.iter_mut().zip(&dt_s) {
                        *v -= inv_m * d * p;
                    }
                }
                for v in &mut ds {
                    *v *= g[0];
                }
                accumulate(&mut grads[s.0], ds);
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                let r = targets.len();
                let c = probs.len() / r;
                let scale = g[0] / r as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * c + t] -= scale;
                }
                accumulate(&mut grads[logits.0], dx);
            }
        }
    }

    fn conv1d_backward(
        &self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: &ConvGeometry,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let w = self.value(weight);
        let out_channels = w.shape()[0];
        let lout = geometry.out_length;
        let rows = geometry.patch_rows();
        let item_in = geometry.in_channels * geometry.length;
        let item_out = out_channels * lout;
        let xd = self.value(x).data();
        let batch = xd.len() / item_in;

        if let Some(b) = bias.filter(|b| self.wants(*b)) {
            let mut db = vec![0.0; out_channels];
            for item in g.chunks(item_out) {
                for (d, row) in db.iter_mut().zip(item.chunks(lout)) {
                    *d += row.iter().sum::<f64>();
                }
            }
            accumulate(&mut grads[b.0], db);
        }
        let want_w = self.wants(weight);
        let want_x = self.wants(x);
        if !want_w && !want_x {
            return;
        }
        let mut dw = vec![0.0; w.len()];
        let mut dx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
        let mut cols = vec![0.0; rows * lout];
        let mut dcols = vec![0.0; rows * lout];
        for b in 0..batch {
            let gy = &g[b * item_out..(b + 1) * item_out];
            if want_w {
                kernels::im2col(&xd[b * item_in..(b + 1) * item_in], geometry, &mut cols);
                kernels::gemm_nt(gy, &cols, out_channels, lout, rows, &mut dw);
            }
            if want_x {
                dcols.fill(0.0);
                kernels::gemm_tn(w.data(), gy, out_channels, rows, lout, &mut dcols);
                kernels::col2im(&dcols, geometry, &mut dx[b * item_in..(b + 1) * item_in]);
            }
        }
        if want_w {
            accumulate(&mut grads[weight.0], dw);
        }
        if want_x {
            accumulate(&mut grads[x.0], dx);
        }
    }
}

/// `dᵀ S` for a row-major `n×k` matrix `S`.
fn degree_projection(degrees: &[f64], s: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    for (row, &d) in s.chunks(k).zip(degrees) {
        kernels::axpy(d, row, &mut out);
    }
    out
}
