//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes one node and
//! returns a [`TensorId`] handle; [`Graph::backward`] walks the tape in
//! reverse insertion order and accumulates gradients into every node that
//! requires them. Precision is generic over [`Real`]: `f32` for training
//! speed, `f64` for finite-difference gradient checks.
//!
//! A graph built with `Graph::new(false)` evaluates forward values only and
//! records no edges; use it for cheap inference passes.

mod adam;
mod kernels;

pub use adam::{adam_step, AdamState};

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar element type for all tensor math.
pub trait Real:
    Float + FromPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Casts an `f64` constant into the active precision.
pub(crate) fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("constant representable in target precision")
}

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Borrowed view of one graph node: shape, values, and gradient if present.
#[derive(Clone, Copy, Debug)]
pub struct Tensor<'g, T: Real> {
    pub shape: &'g [usize],
    pub values: &'g [T],
    pub grad: Option<&'g [T]>,
    pub requires_grad: bool,
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    Add { a: TensorId, b: TensorId },
    AddBias { x: TensorId, bias: TensorId },
    MulElem { a: TensorId, b: TensorId },
    Scale { x: TensorId, factor: T },
    Matmul { a: TensorId, b: TensorId },
    MatmulNT { a: TensorId, b: TensorId },
    Bmm { a: TensorId, b: TensorId },
    BmmNT { a: TensorId, b: TensorId },
    Relu { x: TensorId },
    Softmax { x: TensorId, axis: usize },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, mean: Vec<T>, inv_std: Vec<T> },
    GatherRows { table: TensorId, ids: Vec<usize> },
    Reshape { x: TensorId },
    SwapAxes12 { x: TensorId },
    Dropout { x: TensorId, mask: Vec<T> },
    CrossEntropy { logits: TensorId, targets: Vec<usize>, weights: Vec<T> },
    Sum { x: TensorId },
}

/// Append-only autodiff tape.
pub struct Graph<T: Real> {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires_grad: Vec<bool>,
    ops: Vec<Op<T>>,
    recording: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Graph<T> {
    /// `recording = false` builds an inference-only graph: forward values are
    /// computed but no edges are kept and `backward` is rejected.
    pub fn new(recording: bool) -> Self {
        Graph {
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            requires_grad: Vec::new(),
            ops: Vec::new(),
            recording,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.ops.len()
    }

    /// Shape of a node. Panics if `id` is not from this graph.
    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.shapes[id.0]
    }

    /// Forward values of a node. Panics if `id` is not from this graph.
    pub fn values(&self, id: TensorId) -> &[T] {
        &self.values[id.0]
    }

    /// Accumulated gradient, if any backward pass reached this node.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// Checked view of one node.
    pub fn tensor(&self, id: TensorId) -> Result<Tensor<'_, T>> {
        if id.0 >= self.ops.len() {
            return Err(Error::contract("Graph::tensor", "tensor id out of range"));
        }
        Ok(Tensor {
            shape: &self.shapes[id.0],
            values: &self.values[id.0],
            grad: self.grads[id.0].as_deref(),
            requires_grad: self.requires_grad[id.0],
        })
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> Result<T> {
        let t = self.tensor(id)?;
        if t.values.len() != 1 {
            return Err(Error::contract(
                "Graph::scalar_value",
                format!("tensor has {} elements, expected 1", t.values.len()),
            ));
        }
        Ok(t.values[0])
    }

    /// Clears all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool, op: Op<T>) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        let rg = requires_grad && self.recording;
        let op = if self.recording { op } else { Op::Leaf };
        self.shapes.push(shape);
        self.values.push(values);
        self.grads.push(None);
        self.requires_grad.push(rg);
        self.ops.push(op);
        TensorId(self.ops.len() - 1)
    }

    fn check(&self, id: TensorId, op: &'static str) -> Result<()> {
        if id.0 >= self.ops.len() {
            return Err(Error::contract(op, "tensor id out of range"));
        }
        Ok(())
    }

    fn rg(&self, id: TensorId) -> bool {
        self.requires_grad[id.0]
    }

    /// New input node. `requires_grad` only takes effect on a recording graph.
    pub fn leaf(&mut self, values: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if numel(shape) != values.len() {
            return Err(Error::contract(
                "Graph::leaf",
                format!("shape {:?} needs {} values, got {}", shape, numel(shape), values.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// New constant node that never receives gradient.
    pub fn constant(&mut self, values: Vec<T>, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != values.len() {
            return Err(Error::contract(
                "Graph::constant",
                format!("shape {:?} needs {} values, got {}", shape, numel(shape), values.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), values, false, Op::Leaf))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shapes[a.0].clone(),
                right: self.shapes[b.0].clone(),
            });
        }
        let out: Vec<T> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shapes[a.0].clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::Add { a, b }))
    }

    /// Adds a length-`n` bias vector to every row of an `[..., n]` tensor.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        self.check(x, "add_bias")?;
        self.check(bias, "add_bias")?;
        let xs = &self.shapes[x.0];
        let bs = &self.shapes[bias.0];
        let width = *xs.last().unwrap_or(&0);
        if bs.len() != 1 || bs[0] != width || width == 0 {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: xs.clone(),
                right: bs.clone(),
            });
        }
        let bvals = &self.values[bias.0];
        let out: Vec<T> = self.values[x.0]
            .chunks_exact(width)
            .flat_map(|row| row.iter().zip(bvals).map(|(&v, &b)| v + b))
            .collect();
        let shape = xs.clone();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, out, rg, Op::AddBias { x, bias }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a, "mul_elem")?;
        self.check(b, "mul_elem")?;
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(Error::ShapeMismatch {
                op: "mul_elem",
                left: self.shapes[a.0].clone(),
                right: self.shapes[b.0].clone(),
            });
        }
        let out: Vec<T> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shapes[a.0].clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::MulElem { a, b }))
    }

    /// Multiplies every element by a fixed scalar.
    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        self.check(x, "scale")?;
        let factor: T = real(factor);
        let out: Vec<T> = self.values[x.0].iter().map(|&v| v * factor).collect();
        let shape = self.shapes[x.0].clone();
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Scale { x, factor }))
    }

    /// Matrix product `[m,k] . [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (asym, bsym) = (&self.shapes[a.0], &self.shapes[b.0]);
        if asym.len() != 2 || bsym.len() != 2 || asym[1] != bsym[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: asym.clone(),
                right: bsym.clone(),
            });
        }
        let (m, k, n) = (asym[0], asym[1], bsym[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::mm_nn(&self.values[a.0], &self.values[b.0], m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b }))
    }

    /// Matrix product against a transposed right operand:
    /// `[m,k] . [n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a, "matmul_nt")?;
        self.check(b, "matmul_nt")?;
        let (asym, bsym) = (&self.shapes[a.0], &self.shapes[b.0]);
        if asym.len() != 2 || bsym.len() != 2 || asym[1] != bsym[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: asym.clone(),
                right: bsym.clone(),
            });
        }
        let (m, k, n) = (asym[0], asym[1], bsym[0]);
        let mut out = vec![T::zero(); m * n];
        kernels::mm_nt(&self.values[a.0], &self.values[b.0], m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatmulNT { a, b }))
    }

    /// Batched matrix product `[g,m,k] . [g,k,n] -> [g,m,n]`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a, "bmm")?;
        self.check(b, "bmm")?;
        let (asym, bsym) = (&self.shapes[a.0], &self.shapes[b.0]);
        if asym.len() != 3 || bsym.len() != 3 || asym[0] != bsym[0] || asym[2] != bsym[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                left: asym.clone(),
                right: bsym.clone(),
            });
        }
        let (g, m, k, n) = (asym[0], asym[1], asym[2], bsym[2]);
        let mut out = vec![T::zero(); g * m * n];
        for s in 0..g {
            kernels::mm_nn(
                &self.values[a.0][s * m * k..(s + 1) * m * k],
                &self.values[b.0][s * k * n..(s + 1) * k * n],
                m,
                k,
                n,
                &mut out[s * m * n..(s + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![g, m, n], out, rg, Op::Bmm { a, b }))
    }

    /// Batched product against transposed right operands:
    /// `[g,m,k] . [g,n,k]^T -> [g,m,n]`.
    pub fn bmm_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a, "bmm_nt")?;
        self.check(b, "bmm_nt")?;
        let (asym, bsym) = (&self.shapes[a.0], &self.shapes[b.0]);
        if asym.len() != 3 || bsym.len() != 3 || asym[0] != bsym[0] || asym[2] != bsym[2] {
            return Err(Error::ShapeMismatch {
                op: "bmm_nt",
                left: asym.clone(),
                right: bsym.clone(),
            });
        }
        let (g, m, k, n) = (asym[0], asym[1], asym[2], bsym[1]);
        let mut out = vec![T::zero(); g * m * n];
        for s in 0..g {
            kernels::mm_nt(
                &self.values[a.0][s * m * k..(s + 1) * m * k],
                &self.values[b.0][s * n * k..(s + 1) * n * k],
                m,
                k,
                n,
                &mut out[s * m * n..(s + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![g, m, n], out, rg, Op::BmmNT { a, b }))
    }

    /// Rectified linear unit.
    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x, "relu")?;
        let out: Vec<T> = self.values[x.0]
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shapes[x.0].clone();
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Relu { x }))
    }

    /// Softmax along `axis`, computed with max-subtraction so finite inputs
    /// never overflow.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.check(x, "softmax")?;
        let shape = self.shapes[x.0].clone();
        if axis >= shape.len() {
            return Err(Error::contract(
                "softmax",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let mut out = self.values[x.0].clone();
        softmax_lanes(&mut out, &shape, axis);
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        self.check(x, "layer_norm")?;
        self.check(gain, "layer_norm")?;
        self.check(bias, "layer_norm")?;
        let xs = self.shapes[x.0].clone();
        let width = *xs.last().unwrap_or(&0);
        for affine in [gain, bias] {
            let s = &self.shapes[affine.0];
            if s.len() != 1 || s[0] != width || width == 0 {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: xs.clone(),
                    right: s.clone(),
                });
            }
        }
        let eps: T = real(eps);
        let rows = numel(&xs) / width;
        let mut out = vec![T::zero(); rows * width];
        let mut mean = vec![T::zero(); rows];
        let mut inv_std = vec![T::zero(); rows];
        let gvals = &self.values[gain.0];
        let bvals = &self.values[bias.0];
        let xvals = &self.values[x.0];
        let denom: T = real(width as f64);
        for r in 0..rows {
            let row = &xvals[r * width..(r + 1) * width];
            let mu: T = row.iter().copied().sum::<T>() / denom;
            let var: T = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / denom;
            let istd = T::one() / (var + eps).sqrt();
            mean[r] = mu;
            inv_std[r] = istd;
            let orow = &mut out[r * width..(r + 1) * width];
            for j in 0..width {
                orow[j] = (row[j] - mu) * istd * gvals[j] + bvals[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(xs, out, rg, Op::LayerNorm { x, gain, bias, mean, inv_std }))
    }

    /// Selects rows of a `[rows, width]` table: output row `r` is
    /// `table[ids[r]]`. Gradients scatter-add back into the table.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        self.check(table, "gather_rows")?;
        let ts = &self.shapes[table.0];
        if ts.len() != 2 {
            return Err(Error::contract(
                "gather_rows",
                format!("table must be 2-d, got {:?}", ts),
            ));
        }
        let (rows, width) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(
                "gather_rows",
                format!("row id {} out of range for table with {} rows", bad, rows),
            ));
        }
        let tvals = &self.values[table.0];
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&tvals[i * width..(i + 1) * width]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), width], out, rg, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    /// Reinterprets the value buffer under a new shape of equal size.
    pub fn reshape(&mut self, x: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        self.check(x, "reshape")?;
        if numel(new_shape) != self.values[x.0].len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shapes[x.0].clone(),
                right: new_shape.to_vec(),
            });
        }
        let out = self.values[x.0].clone();
        let rg = self.rg(x);
        Ok(self.push(new_shape.to_vec(), out, rg, Op::Reshape { x }))
    }

    /// Transposes axes 1 and 2 of a 4-d tensor: `[a,b,c,d] -> [a,c,b,d]`.
    pub fn swap_axes_1_2(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x, "swap_axes_1_2")?;
        let xs = self.shapes[x.0].clone();
        if xs.len() != 4 {
            return Err(Error::contract(
                "swap_axes_1_2",
                format!("expected a 4-d tensor, got {:?}", xs),
            ));
        }
        let out = swap12(&self.values[x.0], &xs);
        let rg = self.rg(x);
        Ok(self.push(vec![xs[0], xs[2], xs[1], xs[3]], out, rg, Op::SwapAxes12 { x }))
    }

    /// Inverted dropout: each element is zeroed with probability `rate`,
    /// survivors are scaled by `1/(1-rate)` so expectation is preserved.
    pub fn dropout<R: Rng>(&mut self, x: TensorId, rate: f64, rng: &mut R) -> Result<TensorId> {
        self.check(x, "dropout")?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(
                "dropout",
                format!("rate must be in [0,1), got {}", rate),
            ));
        }
        let keep_scale: T = real(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.values[x.0].len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep_scale })
            .collect();
        let out: Vec<T> = self.values[x.0]
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shapes[x.0].clone();
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Dropout { x, mask }))
    }

    /// Total negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`: `sum_r -log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let weights = vec![T::one(); targets.len()];
        self.cross_entropy_weighted(logits, targets, &weights)
    }

    /// Cross entropy with a per-row weight, used to mask padded positions
    /// (weight 0) without changing batch geometry.
    pub fn cross_entropy_weighted(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        weights: &[T],
    ) -> Result<TensorId> {
        self.check(logits, "cross_entropy")?;
        let ls = &self.shapes[logits.0];
        if ls.len() != 2 {
            return Err(Error::contract(
                "cross_entropy",
                format!("logits must be 2-d, got {:?}", ls),
            ));
        }
        let (rows, vocab) = (ls[0], ls[1]);
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::contract(
                "cross_entropy",
                format!(
                    "{} logit rows vs {} targets and {} weights",
                    rows,
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::contract(
                "cross_entropy",
                format!("target id {} out of range for vocab {}", bad, vocab),
            ));
        }
        let lvals = &self.values[logits.0];
        let mut total = T::zero();
        for r in 0..rows {
            if weights[r] == T::zero() {
                continue;
            }
            let row = &lvals[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total = total + weights[r] * (lse - row[targets[r]]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![total],
            rg,
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec() },
        ))
    }

    /// Sum of all elements, returned as a scalar tensor.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x, "sum")?;
        let total: T = self.values[x.0].iter().copied().sum();
        let rg = self.rg(x);
        Ok(self.push(Vec::new(), vec![total], rg, Op::Sum { x }))
    }

    /// Reverse-mode sweep from a scalar loss. Each call seeds the loss with
    /// gradient 1 and adds this pass's contributions onto any gradients
    /// already stored, so repeated calls without [`Graph::zero_grads`]
    /// accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.check(loss, "backward")?;
        if !self.recording {
            return Err(Error::contract(
                "backward",
                "graph was built in inference mode; no edges were recorded",
            ));
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shapes[loss.0]),
            ));
        }
        if !self.requires_grad[loss.0] {
            return Err(Error::contract(
                "backward",
                "loss does not depend on any gradient-requiring tensor",
            ));
        }

        // Per-pass gradients live in scratch storage and are folded into the
        // persistent accumulators at the end; propagating through persistent
        // state directly would double-count earlier passes.
        let mut scratch: Vec<Option<Vec<T>>> = vec![None; self.ops.len()];
        scratch[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] || scratch[i].is_none() {
                continue;
            }
            let dy = scratch[i].take().unwrap();
            self.backprop_node(i, &dy, &mut scratch);
            scratch[i] = Some(dy);
        }

        for i in 0..self.ops.len() {
            if let Some(pass) = &scratch[i] {
                if !self.requires_grad[i] {
                    continue;
                }
                match &mut self.grads[i] {
                    Some(acc) => {
                        for (a, &p) in acc.iter_mut().zip(pass) {
                            *a = *a + p;
                        }
                    }
                    None => self.grads[i] = Some(pass.clone()),
                }
            }
        }
        Ok(())
    }

    fn scratch_grad<'s>(
        &self,
        scratch: &'s mut [Option<Vec<T>>],
        id: TensorId,
    ) -> Option<&'s mut Vec<T>> {
        if !self.requires_grad[id.0] {
            return None;
        }
        if scratch[id.0].is_none() {
            scratch[id.0] = Some(vec![T::zero(); self.values[id.0].len()]);
        }
        scratch[id.0].as_mut()
    }

    fn backprop_node(&self, i: usize, dy: &[T], scratch: &mut [Option<Vec<T>>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &p in [a, b] {
                    if let Some(dp) = self.scratch_grad(scratch, p) {
                        for (g, &d) in dp.iter_mut().zip(dy) {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let width = self.shapes[bias.0][0];
                if let Some(dx) = self.scratch_grad(scratch, *x) {
                    for (g, &d) in dx.iter_mut().zip(dy) {
                        *g = *g + d;
                    }
                }
                if let Some(db) = self.scratch_grad(scratch, *bias) {
                    for row in dy.chunks_exact(width) {
                        for (g, &d) in db.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::MulElem { a, b } => {
                let (a, b) = (*a, *b);
                if let Some(da) = self.scratch_grad(scratch, a) {
                    let bv = &self.values[b.0];
                    for ((g, &d), &bx) in da.iter_mut().zip(dy).zip(bv) {
                        *g = *g + d * bx;
                    }
                }
                if let Some(db) = self.scratch_grad(scratch, b) {
                    let av = &self.values[a.0];
                    for ((g, &d), &ax) in db.iter_mut().zip(dy).zip(av) {
                        *g = *g + d * ax;
                    }
                }
            }
            Op::Scale { x, factor } => {
                let factor = *factor;
                if let Some(dx) = self.scratch_grad(scratch, *x) {
                    for (g, &d) in dx.iter_mut().zip(dy) {
                        *g = *g + d * factor;
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shapes[a.0][0], self.shapes[a.0][1]);
                let n = self.shapes[b.0][1];
                if self.requires_grad[a.0] {
                    let bv = &self.values[b.0];
                    let da = self.scratch_grad(scratch, a).unwrap();
                    kernels::mm_nt(dy, bv, m, n, k, da);
                }
                if self.requires_grad[b.0] {
                    let av = &self.values[a.0];
                    let db = self.scratch_grad(scratch, b).unwrap();
                    kernels::mm_tn(av, dy, m, k, n, db);
                }
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shapes[a.0][0], self.shapes[a.0][1]);
                let n = self.shapes[b.0][0];
                if self.requires_grad[a.0] {
                    let bv = &self.values[b.0];
                    let da = self.scratch_grad(scratch, a).unwrap();
                    kernels::mm_nn(dy, bv, m, n, k, da);
                }
                if self.requires_grad[b.0] {
                    let av = &self.values[a.0];
                    let db = self.scratch_grad(scratch, b).unwrap();
                    kernels::mm_tn(dy, av, m, n, k, db);
                }
            }
            Op::Bmm { a, b } => {
                let (a, b) = (*a, *b);
                let (g_, m, k) = (self.shapes[a.0][0], self.shapes[a.0][1], self.shapes[a.0][2]);
                let n = self.shapes[b.0][2];
                if self.requires_grad[a.0] {
                    let bv = &self.values[b.0];
                    let da = self.scratch_grad(scratch, a).unwrap();
                    for s in 0..g_ {
                        kernels::mm_nt(
                            &dy[s * m * n..(s + 1) * m * n],
                            &bv[s * k * n..(s + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[s * m * k..(s + 1) * m * k],
                        );
                    }
                }
                if self.requires_grad[b.0] {
                    let av = &self.values[a.0];
                    let db = self.scratch_grad(scratch, b).unwrap();
                    for s in 0..g_ {
                        kernels::mm_tn(
                            &av[s * m * k..(s + 1) * m * k],
                            &dy[s * m * n..(s + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[s * k * n..(s + 1) * k * n],
                        );
                    }
                }
            }
            Op::BmmNT { a, b } => {
                let (a, b) = (*a, *b);
                let (g_, m, k) = (self.shapes[a.0][0], self.shapes[a.0][1], self.shapes[a.0][2]);
                let n = self.shapes[b.0][1];
                if self.requires_grad[a.0] {
                    let bv = &self.values[b.0];
                    let da = self.scratch_grad(scratch, a).unwrap();
                    for s in 0..g_ {
                        kernels::mm_nn(
                            &dy[s * m * n..(s + 1) * m * n],
                            &bv[s * n * k..(s + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut da[s * m * k..(s + 1) * m * k],
                        );
                    }
                }
                if self.requires_grad[b.0] {
                    let av = &self.values[a.0];
                    let db = self.scratch_grad(scratch, b).unwrap();
                    for s in 0..g_ {
                        kernels::mm_tn(
                            &dy[s * m * n..(s + 1) * m * n],
                            &av[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                            &mut db[s * n * k..(s + 1) * n * k],
                        );
                    }
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if self.requires_grad[x.0] {
                    let xv = &self.values[x.0];
                    let dx = self.scratch_grad(scratch, x).unwrap();
                    for ((g, &d), &v) in dx.iter_mut().zip(dy).zip(xv) {
                        if v > T::zero() {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                if self.requires_grad[x.0] {
                    let y = &self.values[i];
                    let shape = &self.shapes[i];
                    let lane = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let dx = self.scratch_grad(scratch, x).unwrap();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * lane * inner + ii;
                            let mut dot = T::zero();
                            for l in 0..lane {
                                let idx = base + l * inner;
                                dot = dot + dy[idx] * y[idx];
                            }
                            for l in 0..lane {
                                let idx = base + l * inner;
                                dx[idx] = dx[idx] + y[idx] * (dy[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, mean, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let width = self.shapes[gain.0][0];
                let rows = self.values[x.0].len() / width;
                let denom: T = real(width as f64);
                let xv = &self.values[x.0];
                let gv = &self.values[gain.0];
                if self.requires_grad[bias.0] {
                    let db = self.scratch_grad(scratch, bias).unwrap();
                    for row in dy.chunks_exact(width) {
                        for (g, &d) in db.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                }
                if self.requires_grad[gain.0] {
                    let dg = self.scratch_grad(scratch, gain).unwrap();
                    for r in 0..rows {
                        let xrow = &xv[r * width..(r + 1) * width];
                        let drow = &dy[r * width..(r + 1) * width];
                        for j in 0..width {
                            let xhat = (xrow[j] - mean[r]) * inv_std[r];
                            dg[j] = dg[j] + drow[j] * xhat;
                        }
                    }
                }
                if self.requires_grad[x.0] {
                    let dx = self.scratch_grad(scratch, x).unwrap();
                    for r in 0..rows {
                        let xrow = &xv[r * width..(r + 1) * width];
                        let drow = &dy[r * width..(r + 1) * width];
                        let dxrow = &mut dx[r * width..(r + 1) * width];
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..width {
                            let xhat = (xrow[j] - mean[r]) * inv_std[r];
                            let dxhat = drow[j] * gv[j];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                        let mean_dxhat = sum_dxhat / denom;
                        let mean_dxhat_xhat = sum_dxhat_xhat / denom;
                        for j in 0..width {
                            let xhat = (xrow[j] - mean[r]) * inv_std[r];
                            let dxhat = drow[j] * gv[j];
                            dxrow[j] = dxrow[j]
                                + inv_std[r] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let table = *table;
                let width = self.shapes[table.0][1];
                if self.requires_grad[table.0] {
                    let dt = self.scratch_grad(scratch, table).unwrap();
                    for (r, &id) in ids.iter().enumerate() {
                        let drow = &dy[r * width..(r + 1) * width];
                        let trow = &mut dt[id * width..(id + 1) * width];
                        for (g, &d) in trow.iter_mut().zip(drow) {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.scratch_grad(scratch, *x) {
                    for (g, &d) in dx.iter_mut().zip(dy) {
                        *g = *g + d;
                    }
                }
            }
            Op::SwapAxes12 { x } => {
                let x = *x;
                if self.requires_grad[x.0] {
                    let back = swap12(dy, &self.shapes[i]);
                    let dx = self.scratch_grad(scratch, x).unwrap();
                    for (g, &d) in dx.iter_mut().zip(&back) {
                        *g = *g + d;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                if self.requires_grad[x.0] {
                    let dx = self.scratch_grad(scratch, x).unwrap();
                    for ((g, &d), &m) in dx.iter_mut().zip(dy).zip(mask) {
                        *g = *g + d * m;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights } => {
                let logits = *logits;
                if self.requires_grad[logits.0] {
                    let vocab = self.shapes[logits.0][1];
                    let rows = targets.len();
                    let d = dy[0];
                    let lvals = &self.values[logits.0];
                    let dl = self.scratch_grad(scratch, logits).unwrap();
                    for r in 0..rows {
                        if weights[r] == T::zero() {
                            continue;
                        }
                        let row = &lvals[r * vocab..(r + 1) * vocab];
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
                        let drow = &mut dl[r * vocab..(r + 1) * vocab];
                        let w = weights[r] * d;
                        for j in 0..vocab {
                            let p = (row[j] - max).exp() / sum_exp;
                            drow[j] = drow[j] + w * p;
                        }
                        drow[targets[r]] = drow[targets[r]] - w;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.scratch_grad(scratch, *x) {
                    let d = dy[0];
                    for g in dx.iter_mut() {
                        *g = *g + d;
                    }
                }
            }
        }
    }
}

/// In-place softmax over `axis` of a tensor with `shape`.
fn softmax_lanes<T: Real>(data: &mut [T], shape: &[usize], axis: usize) {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    if inner == 1 {
        for row in data.chunks_exact_mut(lane) {
            softmax_row(row);
        }
        return;
    }
    let mut buf = vec![T::zero(); lane];
    for o in 0..outer {
        for ii in 0..inner {
            let base = o * lane * inner + ii;
            for l in 0..lane {
                buf[l] = data[base + l * inner];
            }
            softmax_row(&mut buf);
            for l in 0..lane {
                data[base + l * inner] = buf[l];
            }
        }
    }
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn swap12<T: Real>(data: &[T], shape: &[usize]) -> Vec<T> {
    let (a, b, c, d) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![T::zero(); data.len()];
    for ia in 0..a {
        for ib in 0..b {
            for ic in 0..c {
                let src = ((ia * b + ib) * c + ic) * d;
                let dst = ((ia * c + ic) * b + ib) * d;
                out[dst..dst + d].copy_from_slice(&data[src..src + d]);
            }
        }
    }
    out
}
