//! Operation recording and reverse-mode gradient propagation.
//!
//! Nodes live in an arena in creation order, which is a topological order:
//! every op's inputs precede it. `backward` walks the arena once in reverse.

use crate::kernels::{self, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::{Result, Scalar, Tensor, TensorError, COSINE_EPS, RMS_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    /// Values are computed but no operation is recorded.
    Inference,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows { x: Var, s: Var },
    Silu(Var),
    Softplus(Var),
    Softmax { x: Var, axis: usize },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T> },
    GatherRows { x: Var, index: Vec<usize>, pad: Option<usize> },
    ScatterAddRows { x: Var, index: Vec<usize> },
    Concat(Vec<Var>),
    Reshape(Var),
    SwapAxes12(Var),
    Sum(Var),
    Mean(Var),
    MaskFill { x: Var, keep: Vec<bool> },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        reduction: Reduction,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    binding: Option<usize>,
}

/// Arena of recorded operations for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    parallel: bool,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Splits a shape into (rows, row width) along the first axis.
fn rows_of(shape: &[usize]) -> (usize, usize) {
    match shape.split_first() {
        Some((&rows, rest)) => (rows, rest.iter().product()),
        None => (1, 1),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            parallel: false,
        }
    }

    pub fn training() -> Self {
        Self::new(Mode::Training)
    }

    pub fn inference() -> Self {
        Self::new(Mode::Inference)
    }

    /// Allows large products to split rows across threads. Results do not
    /// change; only wall-clock time does.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying a recorded operation (not leaves).
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let training = self.mode == Mode::Training;
        let requires_grad = training && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            binding: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf taking ownership of `t`; differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = self.mode == Mode::Training && t.requires_grad();
        let value = Tensor::plain(t.shape().to_vec(), t.into_data());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            binding: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Leaf copied from a parameter; its gradient is reported under `key`
    /// by [`Gradients::bound`].
    pub fn param(&mut self, key: usize, t: &Tensor<T>) -> Var {
        let v = self.leaf(Tensor::plain(t.shape().to_vec(), t.data().to_vec()));
        let node = &mut self.nodes[v.0];
        node.requires_grad = self.mode == Mode::Training && t.requires_grad();
        node.binding = Some(key);
        v
    }

    // ---- linear algebra ----

    /// `[m×p] · [p×q]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * q];
        matmul_acc(&mut out, self.data(a), self.data(b), m, p, q, self.parallel);
        Ok(self.push(Tensor::plain(vec![m, q], out), Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `[B×m×p] · [B×p×q]`, or `[B×m×p] · [B×q×p]ᵀ` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(mismatch("bmm", sa, sb));
        }
        let (batch, m, p) = (sa[0], sa[1], sa[2]);
        let q = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * q];
        let (da, db) = (self.data(a), self.data(b));
        for bi in 0..batch {
            let o = &mut out[bi * m * q..(bi + 1) * m * q];
            let ab = &da[bi * m * p..(bi + 1) * m * p];
            let bb = &db[bi * p * q..(bi + 1) * p * q];
            if trans_b {
                matmul_nt_acc(o, ab, bb, m, p, q, self.parallel);
            } else {
                matmul_acc(o, ab, bb, m, p, q, self.parallel);
            }
        }
        let value = Tensor::plain(vec![batch, m, q], out);
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    // ---- elementwise ----

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(name, sa, sb));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::plain(sa.to_vec(), data))
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        Tensor::plain(self.shape(x).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let value = self.map(x, |v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// Multiplies row `r` of `x` (first axis) by `s[r]`; `s` holds one value per row.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (rows, width) = rows_of(self.shape(x));
        if self.value(s).numel() != rows {
            return Err(mismatch("scale_rows", self.shape(x), self.shape(s)));
        }
        let sd = self.data(s);
        let data = self
            .data(x)
            .chunks(width.max(1))
            .zip(sd)
            .flat_map(|(row, &k)| row.iter().map(move |&v| v * k))
            .collect();
        let value = Tensor::plain(self.shape(x).to_vec(), data);
        Ok(self.push(value, Op::ScaleRows { x, s }, &[x, s]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.map(x, kernels::silu);
        self.push(value, Op::Silu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.map(x, kernels::softplus);
        self.push(value, Op::Softplus(x), &[x])
    }

    /// Keeps entries where `keep` is set and writes `-inf` elsewhere.
    pub fn mask_neg_inf(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(mismatch("mask_neg_inf", self.shape(x), &[keep.len()]));
        }
        let data = self
            .data(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { T::neg_infinity() })
            .collect();
        let value = Tensor::plain(self.shape(x).to_vec(), data);
        Ok(self.push(value, Op::MaskFill { x, keep }, &[x]))
    }

    // ---- normalisation ----

    /// Softmax along `axis`. Entries equal to `-inf` map to exactly zero.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| src[idx(j)])
                    .fold(T::neg_infinity(), T::max);
                if max == T::neg_infinity() {
                    return Err(TensorError::DegenerateSoftmax);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::plain(shape, out);
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// `x / sqrt(mean(x²) + ε) · gain` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        if self.shape(gain) != [d] {
            return Err(mismatch("rms_norm", &shape, self.shape(gain)));
        }
        let eps = T::lit(RMS_NORM_EPS);
        let dn = T::lit(d as f64);
        let g = self.data(gain);
        let mut inv_rms = Vec::with_capacity(self.value(x).numel() / d.max(1));
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(d.max(1)) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(&v, &gj)| v * r * gj));
        }
        let value = Tensor::plain(shape, out);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Divides each last-axis vector by `max(‖v‖, ε)`.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let eps = T::lit(COSINE_EPS);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(d.max(1)) {
            let n = kernels::clamped_norm(row, eps);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::plain(shape, out);
        self.push(value, Op::L2Normalize { x, norms }, &[x])
    }

    /// `a·b / (max(‖a‖,ε)·max(‖b‖,ε))` for two vectors of equal length.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) || self.shape(a).len() != 1 {
            return Err(mismatch("cosine_similarity", self.shape(a), self.shape(b)));
        }
        let na = self.l2_normalize(a);
        let nb = self.l2_normalize(b);
        let prod = self.mul(na, nb)?;
        Ok(self.sum(prod))
    }

    // ---- indexing and layout ----

    fn check_rows(index: &[usize], rows: usize) -> Result<()> {
        match index.iter().position(|&i| i >= rows) {
            Some(position) => Err(TensorError::Index {
                index: index[position],
                rows,
                position,
            }),
            None => Ok(()),
        }
    }

    /// Selects rows (first-axis slices) of `x`. Output shape is
    /// `[index.len(), rest of x's shape]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        self.gather_impl(x, index.to_vec(), None)
    }

    /// Like [`gather_rows`](Self::gather_rows), but the row `pad` reads as
    /// zeros and receives no gradient.
    pub fn gather_rows_padded(&mut self, x: Var, index: &[usize], pad: usize) -> Result<Var> {
        self.gather_impl(x, index.to_vec(), Some(pad))
    }

    fn gather_impl(&mut self, x: Var, index: Vec<usize>, pad: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, width) = rows_of(&shape);
        Self::check_rows(&index, rows)?;
        let src = self.data(x);
        let mut out = Vec::with_capacity(index.len() * width);
        for &r in &index {
            if pad == Some(r) {
                out.extend(std::iter::repeat_n(T::zero(), width));
            } else {
                out.extend_from_slice(&src[r * width..(r + 1) * width]);
            }
        }
        let mut out_shape = shape;
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        out_shape[0] = index.len();
        let value = Tensor::plain(out_shape, out);
        Ok(self.push(value, Op::GatherRows { x, index, pad }, &[x]))
    }

    /// Adds row `i` of `x` into row `index[i]` of a zero tensor with `rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, width) = rows_of(&shape);
        if n != index.len() {
            return Err(mismatch("scatter_add_rows", &shape, &[index.len()]));
        }
        Self::check_rows(index, rows)?;
        let src = self.data(x);
        let mut out = vec![T::zero(); rows * width];
        for (i, &r) in index.iter().enumerate() {
            for (o, &v) in out[r * width..(r + 1) * width]
                .iter_mut()
                .zip(&src[i * width..(i + 1) * width])
            {
                *o += v;
            }
        }
        let mut out_shape = shape;
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        out_shape[0] = rows;
        let value = Tensor::plain(out_shape, out);
        let index = index.to_vec();
        Ok(self.push(value, Op::ScatterAddRows { x, index }, &[x]))
    }

    /// Concatenates along the last axis; all other extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if base.is_empty() {
            return Err(mismatch("concat_last", &base, &[]));
        }
        let lead = &base[..base.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || &s[..s.len() - 1] != lead {
                return Err(mismatch("concat_last", &base, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = base.clone();
        *shape.last_mut().unwrap() = total;
        let value = Tensor::plain(shape, out);
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let value = Tensor::plain(shape.to_vec(), self.data(x).to_vec());
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[a×b×c×d] → [a×c×b×d]`
    pub fn swap_axes_12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch("swap_axes_12", &s, &[0, 0, 0, 0]));
        }
        let out = swap12(self.data(x), s[0], s[1], s[2], s[3]);
        let value = Tensor::plain(vec![s[0], s[2], s[1], s[3]], out);
        Ok(self.push(value, Op::SwapAxes12(x), &[x]))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Softmax cross-entropy of `logits [R×C]` against one target column per row.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(mismatch("cross_entropy", &shape, &[targets.len()]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(position) = targets.iter().position(|&t| t >= cols) {
            return Err(TensorError::Index {
                index: targets[position],
                rows: cols,
                position,
            });
        }
        let src = self.data(logits);
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(TensorError::DegenerateSoftmax);
            }
            let mut z = T::zero();
            for (p, &v) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[r * cols..(r + 1) * cols] {
                *p /= z;
            }
            total += max + z.ln() - row[targets[r]];
        }
        if reduction == Reduction::Mean && rows > 0 {
            total /= T::lit(rows as f64);
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            reduction,
        };
        Ok(self.push(Tensor::scalar(total), op, &[logits]))
    }

    // ---- backward ----

    /// Propagates `∂loss/∂node` to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.mode == Mode::Inference {
            return Err(TensorError::InferenceMode);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let bound = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.binding.map(|k| (k, Var(i))))
            .collect();
        Ok(Gradients { grads, bound })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, p, q) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let ga = self.slot(grads, *a);
                    matmul_nt_acc(ga, g, self.data(*b), m, q, p, self.parallel);
                }
                if self.requires_grad(*b) {
                    let gb = self.slot(grads, *b);
                    matmul_tn_acc(gb, self.data(*a), g, p, m, q);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, p) = (sa[0], sa[1], sa[2]);
                let q = out_shape[2];
                let (da, db) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    let ga = self.slot(grads, *a);
                    for bi in 0..batch {
                        let gab = &mut ga[bi * m * p..(bi + 1) * m * p];
                        let gb_ = &g[bi * m * q..(bi + 1) * m * q];
                        let bb = &db[bi * p * q..(bi + 1) * p * q];
                        if *trans_b {
                            // dA = G · B, B stored [q×p]
                            matmul_acc(gab, gb_, bb, m, q, p, false);
                        } else {
                            matmul_nt_acc(gab, gb_, bb, m, q, p, false);
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let gbv = self.slot(grads, *b);
                    for bi in 0..batch {
                        let gbb = &mut gbv[bi * p * q..(bi + 1) * p * q];
                        let gb_ = &g[bi * m * q..(bi + 1) * m * q];
                        let ab = &da[bi * m * p..(bi + 1) * m * p];
                        if *trans_b {
                            // dB = Gᵀ · A, [q×p]
                            matmul_tn_acc(gbb, gb_, ab, q, m, p);
                        } else {
                            matmul_tn_acc(gbb, ab, gb_, p, m, q);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        add_into(self.slot(grads, v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    add_into(self.slot(grads, *a), g);
                }
                if self.requires_grad(*b) {
                    let gb = self.slot(grads, *b);
                    gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let other = self.data(*b);
                    let ga = self.slot(grads, *a);
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(other) {
                        *o += gv * bv;
                    }
                }
                if self.requires_grad(*b) {
                    let other = self.data(*a);
                    let gb = self.slot(grads, *b);
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(other) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = self.slot(grads, *x);
                gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *s);
            }
            Op::ScaleRows { x, s } => {
                let (_, width) = rows_of(self.shape(*x));
                let width = width.max(1);
                if self.requires_grad(*x) {
                    let sd = self.data(*s);
                    let gx = self.slot(grads, *x);
                    for ((orow, grow), &k) in gx.chunks_mut(width).zip(g.chunks(width)).zip(sd) {
                        orow.iter_mut().zip(grow).for_each(|(o, &v)| *o += v * k);
                    }
                }
                if self.requires_grad(*s) {
                    let xd = self.data(*x);
                    let gs = self.slot(grads, *s);
                    for ((o, grow), xrow) in gs.iter_mut().zip(g.chunks(width)).zip(xd.chunks(width)) {
                        *o += kernels::dot(grow, xrow);
                    }
                }
            }
            Op::Silu(x) => {
                let xd = self.data(*x);
                let gx = self.slot(grads, *x);
                for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
                    *o += gv * kernels::silu_grad(xv);
                }
            }
            Op::Softplus(x) => {
                let xd = self.data(*x);
                let gx = self.slot(grads, *x);
                for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
                    *o += gv * kernels::sigmoid(xv);
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(out_shape, *axis);
                let gx = self.slot(grads, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let d = *out_shape.last().unwrap_or(&1);
                let xd = self.data(*x);
                let gd = self.data(*gain);
                if self.requires_grad(*gain) {
                    let gg = self.slot(grads, *gain);
                    for ((xrow, grow), &r) in xd.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                        for j in 0..d {
                            gg[j] += grow[j] * xrow[j] * r;
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let dn = T::lit(d as f64);
                    let gx = self.slot(grads, *x);
                    for (((orow, xrow), grow), &r) in
                        gx.chunks_mut(d).zip(xd.chunks(d)).zip(g.chunks(d)).zip(inv_rms)
                    {
                        let proj: T = (0..d).map(|j| grow[j] * gd[j] * xrow[j]).sum();
                        let c = r * r * r / dn * proj;
                        for j in 0..d {
                            orow[j] += r * gd[j] * grow[j] - xrow[j] * c;
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = *out_shape.last().unwrap_or(&1);
                let eps = T::lit(COSINE_EPS);
                let y = node.value.data();
                let xd = self.data(*x);
                let gx = self.slot(grads, *x);
                for ((((orow, yrow), grow), xrow), &n) in gx
                    .chunks_mut(d)
                    .zip(y.chunks(d))
                    .zip(g.chunks(d))
                    .zip(xd.chunks(d))
                    .zip(norms)
                {
                    let raw = kernels::dot(xrow, xrow).sqrt();
                    if raw <= eps {
                        // clamped branch: y = x / ε
                        orow.iter_mut().zip(grow).for_each(|(o, &gv)| *o += gv / n);
                    } else {
                        let yg = kernels::dot(yrow, grow);
                        for j in 0..d {
                            orow[j] += (grow[j] - yrow[j] * yg) / n;
                        }
                    }
                }
            }
            Op::GatherRows { x, index, pad } => {
                let (_, width) = rows_of(self.shape(*x));
                let gx = self.slot(grads, *x);
                for (i, &r) in index.iter().enumerate() {
                    if *pad == Some(r) {
                        continue;
                    }
                    add_into(
                        &mut gx[r * width..(r + 1) * width],
                        &g[i * width..(i + 1) * width],
                    );
                }
            }
            Op::ScatterAddRows { x, index } => {
                let (_, width) = rows_of(self.shape(*x));
                let gx = self.slot(grads, *x);
                for (i, &r) in index.iter().enumerate() {
                    add_into(
                        &mut gx[i * width..(i + 1) * width],
                        &g[r * width..(r + 1) * width],
                    );
                }
            }
            Op::Concat(parts) => {
                let total = *out_shape.last().unwrap();
                let rows = node.value.numel() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if self.requires_grad(p) {
                        let gp = self.slot(grads, p);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => add_into(self.slot(grads, *x), g),
            Op::SwapAxes12(x) => {
                let s = out_shape;
                // the swap is its own inverse once extents are exchanged
                let back = swap12(g, s[0], s[1], s[2], s[3]);
                add_into(self.slot(grads, *x), &back);
            }
            Op::Sum(x) => {
                let gx = self.slot(grads, *x);
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(x) => {
                let gx = self.slot(grads, *x);
                let share = g[0] / T::lit(gx.len() as f64);
                gx.iter_mut().for_each(|o| *o += share);
            }
            Op::MaskFill { x, keep } => {
                let gx = self.slot(grads, *x);
                for ((o, &gv), &k) in gx.iter_mut().zip(g).zip(keep) {
                    if k {
                        *o += gv;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                reduction,
            } => {
                let cols = self.shape(*logits)[1];
                let mut coeff = g[0];
                if *reduction == Reduction::Mean && !targets.is_empty() {
                    coeff /= T::lit(targets.len() as f64);
                }
                let gx = self.slot(grads, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut gx[r * cols..(r + 1) * cols];
                    for (j, o) in row.iter_mut().enumerate() {
                        let p = probs[r * cols + j];
                        let onehot = if j == t { T::one() } else { T::zero() };
                        *o += coeff * (p - onehot);
                    }
                }
            }
        }
    }

    /// Gradient buffer for `v`, allocated on first use.
    #[allow(clippy::mut_from_ref)]
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
}

fn swap12<T: Scalar>(src: &[T], a: usize, b: usize, c: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let from = ((i * b + j) * c + k) * d;
                let to = ((i * c + k) * b + j) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    bound: Vec<(usize, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// `∂loss/∂v`, or `None` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter keys registered through [`Tape::param`] with their gradients.
    pub fn bound(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.bound
            .iter()
            .filter_map(|&(k, v)| self.wrt(v).map(|g| (k, g)))
    }

    /// Adds each bound gradient into `params[key]`.
    pub fn accumulate_into(&self, params: &mut [Tensor<T>]) -> Result<()> {
        for (key, g) in self.bound() {
            params[key].accumulate_grad(g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::<f64>::training();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.data(p), &[1., 2., 3., 4.]);

        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(p), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::training();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn matmul_gradient_closed_form() {
        let mut tape = Tape::<f64>::training();
        let a = tape.leaf(t(&[1, 2], &[1., 1.]).with_grad());
        let b = tape.constant(t(&[2, 1], &[2., 5.]));
        let p = tape.matmul(a, b).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[2., 5.]);
        assert!(g.wrt(b).is_none());
    }

    #[test]
    fn silu_values() {
        let mut tape = Tape::<f64>::training();
        let x = tape.leaf(t(&[2], &[0., 1.]).with_grad());
        let y = tape.silu(x);
        assert_eq!(tape.data(y)[0], 0.0);
        assert!((tape.data(y)[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert!((g.wrt(x).unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::training();
        let x = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);

        let x = tape.constant(t(&[3], &[2., 1., f64::NEG_INFINITY]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 0.731_058_578_630_004_9).abs() < 1e-9);
        assert!((d[1] - 0.268_941_421_369_995_1).abs() < 1e-9);
        assert_eq!(d[2], 0.0);

        let x = tape.constant(t(&[2], &[1000., 999.]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.data(y);
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 0.731_058_578_630_004_9).abs() < 1e-9);
    }

    #[test]
    fn softmax_rejects_all_neg_inf_and_bad_axis() {
        let mut tape = Tape::<f64>::training();
        let x = tape.constant(t(&[2], &[f64::NEG_INFINITY, f64::NEG_INFINITY]));
        assert_eq!(tape.softmax(x, 0), Err(TensorError::DegenerateSoftmax));
        assert!(matches!(tape.softmax(x, 1), Err(TensorError::Axis { .. })));
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut tape = Tape::<f64>::training();
        let x = tape.constant(t(&[2, 2], &[0., 5., 0., 5.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn rms_norm_examples() {
        let mut tape = Tape::<f64>::training();
        let gain = tape.constant(Tensor::full(vec![4], 1.0));
        let x = tape.constant(Tensor::full(vec![4], 1.0));
        let y = tape.rms_norm(x, gain).unwrap();
        assert!(tape.data(y).iter().all(|v| (v - 1.0).abs() < 1e-5));

        let x = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.rms_norm(x, gain).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));

        let gain2 = tape.constant(Tensor::full(vec![2], 1.0));
        let x = tape.constant(t(&[2], &[3., -3.]));
        let y = tape.rms_norm(x, gain2).unwrap();
        assert!((tape.data(y)[0] - 1.0).abs() < 1e-5);
        assert!((tape.data(y)[1] + 1.0).abs() < 1e-5);

        assert!(tape.rms_norm(x, gain).is_err());
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::<f64>::training();
        let cases: [(&[f64], &[f64], f64); 3] = [
            (&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0], 1.0),
            (&[1.0, 0.0], &[0.0, 1.0], 0.0),
            (&[1.0, 1.0], &[-2.0, -2.0], -1.0),
        ];
        for (a, b, want) in cases {
            let va = tape.constant(t(&[a.len()], a));
            let vb = tape.constant(t(&[b.len()], b));
            let c = tape.cosine_similarity(va, vb).unwrap();
            assert!((tape.data(c)[0] - want).abs() < 1e-6);
        }
        let z = tape.constant(Tensor::zeros(vec![2]));
        let c = tape.cosine_similarity(z, z).unwrap();
        assert_eq!(tape.data(c)[0], 0.0);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::<f64>::training();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[6.0]);

        let mut tape = Tape::<f64>::training();
        let x = tape.leaf(Tensor::scalar(1.0).with_grad());
        let twice = tape.add(x, x).unwrap();
        let g = tape.backward(twice).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_needs_scalar_and_training_mode() {
        let mut tape = Tape::<f64>::training();
        let x = tape.leaf(Tensor::zeros(vec![2]).with_grad());
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));

        let mut tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.data(y), &[4.0]);
        assert_eq!(tape.recorded_ops(), 0);
        assert_eq!(tape.backward(y).unwrap_err(), TensorError::InferenceMode);
    }

    #[test]
    fn gather_with_padding_row() {
        let mut tape = Tape::<f64>::training();
        let table = tape.leaf(t(&[3, 2], &[9., 9., 1., 2., 3., 4.]).with_grad());
        let rows = tape.gather_rows_padded(table, &[0, 2, 2], 0).unwrap();
        assert_eq!(tape.data(rows), &[0., 0., 3., 4., 3., 4.]);
        let loss = tape.sum(rows);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(table).unwrap(), &[0., 0., 0., 0., 2., 2.]);

        let err = tape.gather_rows(table, &[1, 3]).unwrap_err();
        assert_eq!(
            err,
            TensorError::Index {
                index: 3,
                rows: 3,
                position: 1
            }
        );
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::training();
        let x = tape.leaf(Tensor::zeros(vec![2, 3]).with_grad());
        let loss = tape.cross_entropy(x, &[0, 2], Reduction::Mean).unwrap();
        assert!((tape.data(loss)[0] - 3f64.ln()).abs() < 1e-12);
        let sum = tape.cross_entropy(x, &[0, 2], Reduction::Sum).unwrap();
        assert!((tape.data(sum)[0] - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn swap_axes_round_trip() {
        let mut tape = Tape::<f64>::training();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[1, 2, 3, 4], &data));
        let y = tape.swap_axes_12(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 2, 4]);
        assert_eq!(tape.value(y).at(&[0, 2, 1, 3]), tape.value(x).at(&[0, 1, 2, 3]));
        let z = tape.swap_axes_12(y).unwrap();
        assert_eq!(tape.data(z), &data[..]);
    }

    #[test]
    fn params_report_bound_gradients() {
        let mut params = vec![Tensor::<f64>::from_f64(vec![2], &[1., 2.]).unwrap().with_grad()];
        let mut tape = Tape::training();
        let p = tape.param(0, &params[0]);
        let q = tape.mul(p, p).unwrap();
        let loss = tape.sum(q);
        let g = tape.backward(loss).unwrap();
        g.accumulate_into(&mut params).unwrap();
        g.accumulate_into(&mut params).unwrap();
        assert_eq!(params[0].grad().unwrap(), &[4., 8.]);
    }
}
