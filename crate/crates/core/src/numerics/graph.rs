//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Nodes are appended in evaluation order, so the tape order is already a
//! topological order; `backward` walks it once in reverse.

use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    RepeatRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Norm {
        x: Var,
        gain: Var,
        normalized: Vec<T>,
        inv_scale: Vec<T>,
    },
    Softmax {
        x: Var,
        temperature: T,
    },
    Gelu(Var),
    Sum(Var),
    Max {
        inputs: Vec<Var>,
        winner: Vec<usize>,
    },
    Fused {
        input: Var,
        local_grad: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-threaded differentiation tape, rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

/// Numerically stable temperature softmax of one row into `out`.
pub(crate) fn softmax_into<T: Scalar>(row: &[T], temperature: T, out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = ((v - max) / temperature).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    /// Adds a leaf; gradients are tracked when the tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Adds a leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims(a);
        let (q2, r) = self.dims(b);
        if q != q2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), p, q, r);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::raw(vec![p, r], out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims(a);
        let (r, q2) = self.dims(b);
        if q != q2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by transpose of {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = matmul_nt_kernel(self.value(a).data(), self.value(b).data(), p, q, r);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::raw(vec![p, r], out), Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Dimension(format!(
                "{what} of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::raw(vec![r, c], data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_op(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let (r, col) = self.dims(a);
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(Tensor::raw(vec![r, col], data), Op::Scale(a, c), rg)
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table);
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocab { id, size: rows });
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::raw(vec![ids.len(), d], data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks `n` copies of a single-row tensor.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, d) = self.dims(a);
        if r != 1 {
            return Err(Error::Dimension(format!("repeat_rows expects one row, got {r}")));
        }
        let row = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::raw(vec![n, d], data), Op::RepeatRows(a), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > r {
            return Err(Error::Dimension(format!(
                "row slice {start}..{} of a {r}-row tensor",
                start + len
            )));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::raw(vec![len, c], data), Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} of a {c}-column tensor",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::raw(vec![r, len], data), Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::Dimension(format!("concat_rows width {pc} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::raw(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::Dimension(format!("concat_cols height {pr} vs {r}")));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::raw(vec![r, total], data), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Per-row normalization: subtract the row mean, divide by the root mean
    /// square of the centered row, multiply by `gain` (no bias).
    pub fn norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (r, d) = self.dims(x);
        if d == 0 {
            return Err(Error::Dimension("normalization over zero-width rows".into()));
        }
        if self.value(gain).len() != d {
            return Err(Error::Dimension(format!(
                "gain of length {} for rows of width {d}",
                self.value(gain).len()
            )));
        }
        let inv_d = T::one() / T::of_usize(d);
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let mut normalized = Vec::with_capacity(r * d);
        let mut inv_scale = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * d);
        for i in 0..r {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let inv = T::one() / (var + eps).sqrt();
            inv_scale.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                normalized.push(xh);
                out.push(xh * g[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(
            Tensor::raw(vec![r, d], out),
            Op::Norm {
                x,
                gain,
                normalized,
                inv_scale,
            },
            rg,
        ))
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax_rows(&mut self, x: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let (r, c) = self.dims(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_into(self.value(x).row(i), temperature, &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::raw(vec![r, c], out), Op::Softmax { x, temperature }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|&v| gelu_parts(v).0).collect();
        let rg = self.rg(x);
        self.push(Tensor::raw(vec![r, c], data), Op::Gelu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::of_usize(n))
    }

    /// Elementwise maximum over equally shaped inputs; ties go to the earliest input.
    pub fn max_elementwise(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Dimension("max over zero tensors".into()))?;
        for &v in &inputs[1..] {
            self.same_shape(first, v, "max")?;
        }
        let (r, c) = self.dims(first);
        let mut out = self.value(first).data().to_vec();
        let mut winner = vec![0usize; r * c];
        for (k, &v) in inputs.iter().enumerate().skip(1) {
            for (j, &val) in self.value(v).data().iter().enumerate() {
                if val > out[j] {
                    out[j] = val;
                    winner[j] = k;
                }
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::raw(vec![r, c], out),
            Op::Max {
                inputs: inputs.to_vec(),
                winner,
            },
            rg,
        ))
    }

    /// Scalar node whose value and local gradient were computed outside the tape.
    pub fn fused_scalar(&mut self, input: Var, value: T, local_grad: Tensor<T>) -> Result<Var> {
        if local_grad.len() != self.value(input).len() {
            return Err(Error::Dimension(format!(
                "local gradient of {} entries for an input of {}",
                local_grad.len(),
                self.value(input).len()
            )));
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::Fused { input, local_grad }, rg))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward from non-scalar of shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape().to_vec(), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                    *e = *e + d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::raw(self.value(v).shape().to_vec(), delta));
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = self.dims(*a);
                let r = self.dims(*b).1;
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let da = matmul_nt_kernel(gd, self.value(*b).data(), p, r, q);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let db = matmul_tn_kernel(self.value(*a).data(), gd, p, q, r);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (p, q) = self.dims(*a);
                let r = self.dims(*b).0;
                if self.rg(*a) {
                    // C = A Bᵀ  =>  dA = G · B
                    let da = matmul_kernel(gd, self.value(*b).data(), p, r, q);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    // dB = Gᵀ · A
                    let db = matmul_tn_kernel(gd, self.value(*a).data(), p, r, q);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                self.accumulate(grads, *b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|&v| v * *c).collect());
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let (rows, d) = self.dims(*table);
                    let mut delta = vec![T::zero(); rows * d];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            delta[id * d + j] = delta[id * d + j] + gd[i * d + j];
                        }
                    }
                    self.accumulate(grads, *table, delta);
                }
            }
            Op::RepeatRows(a) => {
                let d = self.dims(*a).1;
                let mut delta = vec![T::zero(); d];
                for row in gd.chunks(d) {
                    for (o, &v) in delta.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                self.accumulate(grads, *a, delta);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.dims(*a);
                let mut delta = vec![T::zero(); r * c];
                delta[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *a, delta);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.dims(*a);
                let len = g.cols();
                let mut delta = vec![T::zero(); r * c];
                for i in 0..r {
                    delta[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *a, delta);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    let mut delta = Vec::with_capacity(r * c);
                    for i in 0..r {
                        delta.extend_from_slice(&gd[i * total + offset..i * total + offset + c]);
                    }
                    self.accumulate(grads, p, delta);
                    offset += c;
                }
            }
            Op::Norm {
                x,
                gain,
                normalized,
                inv_scale,
            } => {
                let (r, d) = self.dims(*x);
                let gv = self.value(*gain).data();
                if self.rg(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for i in 0..r {
                        for j in 0..d {
                            dg[j] = dg[j] + gd[i * d + j] * normalized[i * d + j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.rg(*x) {
                    let inv_d = T::one() / T::of_usize(d);
                    let mut dx = vec![T::zero(); r * d];
                    for i in 0..r {
                        let xh = &normalized[i * d..(i + 1) * d];
                        let gy: Vec<T> = (0..d).map(|j| gd[i * d + j] * gv[j]).collect();
                        let mean_gy = gy.iter().copied().sum::<T>() * inv_d;
                        let mean_gy_xh = dot(&gy, xh) * inv_d;
                        for j in 0..d {
                            dx[i * d + j] = inv_scale[i] * (gy[j] - mean_gy - xh[j] * mean_gy_xh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Softmax { x, temperature } => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![T::zero(); y.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let inner = dot(gr, yr);
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - inner) / *temperature;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = gd.iter().zip(xv).map(|(&g, &v)| g * gelu_parts(v).1).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::Max { inputs, winner } => {
                for (k, &v) in inputs.iter().enumerate() {
                    if !self.rg(v) {
                        continue;
                    }
                    let delta = gd
                        .iter()
                        .zip(winner)
                        .map(|(&g, &w)| if w == k { g } else { T::zero() })
                        .collect();
                    self.accumulate(grads, v, delta);
                }
            }
            Op::Fused { input, local_grad } => {
                let up = gd[0];
                self.accumulate(grads, *input, local_grad.data().iter().map(|&v| v * up).collect());
            }
        }
    }
}
