use std::borrow::Cow;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{gemm_into, MatRef, Scalar};

/// Probability floor applied to `q` inside the KL divergence.
pub const KL_FLOOR: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: T },
    Mul { a: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    GatherRows { table: Var, idx: Vec<usize> },
    Transpose { a: Var },
    ConcatRows { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    Softmax { a: Var },
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<T> },
    Kl { p: Var, q: Var },
    Sum { a: Var },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records tensor operations in evaluation order so that gradients can be
/// propagated back with [`Tape::backward`].
///
/// Every op also computes its forward value eagerly, so a tape with no
/// trainable leaves doubles as the plain inference path. Leaves may borrow
/// their values (`'a`) to avoid copying frozen weights.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the trainable leaves.
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

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(512) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Owned leaf; gradients are reported for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Borrowed leaf, e.g. a model weight.
    pub fn borrowed(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.val(v).shape();
        if s.len() != 2 {
            return Err(shape_err(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    fn mm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.matrix(a, "matmul")?;
        let (br, bc) = self.matrix(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err("matmul", self.val(a).shape(), self.val(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        let mut ra = MatRef::new(self.val(a).data(), ar, ac);
        let mut rb = MatRef::new(self.val(b).data(), br, bc);
        if ta {
            ra = ra.t();
        }
        if tb {
            rb = rb.t();
        }
        gemm_into(ra, rb, T::zero(), &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_owned(t, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    /// `a·b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false, false)
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false, true)
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push_owned(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_owned(t, Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_owned(t, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.val(a), self.val(row));
        let n = va.cols();
        if vr.numel() != n || va.shape().is_empty() {
            return Err(shape_err("add_row", va.shape(), vr.shape()));
        }
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &r) in chunk.iter_mut().zip(vr.data()) {
                *x += r;
            }
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_owned(t, Op::AddRow { a, row }, &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.val(a).map(|x| x * c);
        self.push_owned(t, Op::Scale { a, c }, &[a])
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.val(x);
        let n = vx.cols();
        if self.val(gamma).numel() != n || self.val(beta).numel() != n {
            return Err(shape_err("layer_norm", vx.shape(), self.val(gamma).shape()));
        }
        let (g, b) = (self.val(gamma).data(), self.val(beta).data());
        let rows = vx.numel() / n.max(1);
        let nf = T::from_usize(n).unwrap();
        let eps = T::from_f64_lossy(LN_EPS);
        let mut out = vec![T::zero(); vx.numel()];
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let xs = &vx.data()[r * n..(r + 1) * n];
            let mean = xs.iter().copied().sum::<T>() / nf;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (xs[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push_owned(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.val(x).map(gelu_fwd);
        self.push_owned(t, Op::Gelu { x }, &[x])
    }

    /// Selects rows of `table` by index; doubles as the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let vt = self.val(table);
        let (r, c) = (vt.rows(), vt.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", vt.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(vt.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push_owned(t, Op::GatherRows { table, idx: idx.to_vec() }, &[table]))
    }

    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix(a, "transpose")?;
        let va = self.val(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], data)?;
        Ok(self.push_owned(t, Op::Transpose { a }, &[a]))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.matrix(p, "concat_rows")?.1,
            None => return Err(Error::Invalid("concat_rows of nothing".into())),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", &[rows, cols], &[r, c]));
            }
            rows += r;
            data.extend_from_slice(self.val(p).data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_owned(t, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.matrix(p, "concat_cols")?.0,
            None => return Err(Error::Invalid("concat_cols of nothing".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", &[rows], &[r, c]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.val(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![rows, total], data)?;
        Ok(self.push_owned(t, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, _) = self.matrix(a, "slice_rows")?;
        if start > end || end > r {
            return Err(shape_err("slice_rows", self.val(a).shape(), &[start, end]));
        }
        let t = self.val(a).slice_rows(start, end);
        Ok(self.push_owned(t, Op::SliceRows { a, start }, &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix(a, "slice_cols")?;
        if start > end || end > c {
            return Err(shape_err("slice_cols", self.val(a).shape(), &[start, end]));
        }
        let w = end - start;
        let src = self.val(a).data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, w], data)?;
        Ok(self.push_owned(t, Op::SliceCols { a, start }, &[a]))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last axis where row `r` only sees columns
    /// `0..=r + offset`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var, offset: usize) -> Result<Var> {
        self.softmax_impl(a, Some(offset))
    }

    fn softmax_impl(&mut self, a: Var, causal: Option<usize>) -> Result<Var> {
        let va = self.val(a);
        let n = va.cols();
        if n == 0 {
            return Err(Error::Invalid("softmax over an empty axis".into()));
        }
        let rows = va.numel() / n;
        let mut out = vec![T::zero(); va.numel()];
        for r in 0..rows {
            let lim = match causal {
                Some(off) => (r % va.rows().max(1) + off + 1).min(n),
                None => n,
            };
            let xs = &va.data()[r * n..r * n + lim];
            if xs.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("softmax"));
            }
            let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
            let o = &mut out[r * n..r * n + lim];
            let mut s = T::zero();
            for (y, &x) in o.iter_mut().zip(xs) {
                *y = (x - mx).exp();
                s += *y;
            }
            for y in o.iter_mut() {
                *y /= s;
            }
        }
        let t = Tensor::new(va.shape().to_vec(), out)?;
        Ok(self.push_owned(t, Op::Softmax { a }, &[a]))
    }

    /// Mean next-token negative log-likelihood over the masked-in rows of
    /// `logits: T×V`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(shape_err("cross_entropy", &[t, v], &[targets.len(), mask.len()]));
        }
        let picked: Vec<(usize, usize)> = (0..t).filter(|&r| mask[r]).map(|r| (r, targets[r])).collect();
        if picked.is_empty() {
            return Err(Error::Degenerate("every position is masked out".into()));
        }
        if let Some(&(_, bad)) = picked.iter().find(|&&(_, y)| y >= v) {
            return Err(shape_err("cross_entropy", &[t, v], &[bad]));
        }
        let lv = self.val(logits).data();
        let mut probs = vec![T::zero(); picked.len() * v];
        let mut total = T::zero();
        for (k, &(r, y)) in picked.iter().enumerate() {
            let xs = &lv[r * v..(r + 1) * v];
            if xs.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("cross_entropy"));
            }
            let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[k * v..(k + 1) * v];
            let mut s = T::zero();
            for (pi, &x) in p.iter_mut().zip(xs) {
                *pi = (x - mx).exp();
                s += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= s;
            }
            total += s.ln() + mx - xs[y];
        }
        let mean = total / T::from_usize(picked.len()).unwrap();
        Ok(self.push_owned(
            Tensor::scalar(mean),
            Op::CrossEntropy { logits, targets: picked, probs },
            &[logits],
        ))
    }

    /// `KL(p ‖ q)` in nats over the last axis, averaged over the leading
    /// axes. `q` is floored at [`KL_FLOOR`] and `0·ln 0 = 0`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (vp, vq) = (self.val(p), self.val(q));
        if vp.shape() != vq.shape() {
            return Err(shape_err("kl_divergence", vp.shape(), vq.shape()));
        }
        let n = vp.cols();
        let rows = vp.numel() / n.max(1);
        let tol = 1e-6f64.max(T::epsilon().as_f64() * 4.0 * n as f64);
        for (name, t) in [("kl_divergence(p)", vp), ("kl_divergence(q)", vq)] {
            if !t.is_finite() {
                return Err(Error::NonFinite(name));
            }
            if t.data().iter().any(|&x| x < T::zero()) {
                return Err(Error::NegativeProbability(name));
            }
            for r in 0..rows {
                let s: f64 = t.data()[r * n..(r + 1) * n].iter().map(|x| x.as_f64()).sum();
                if (s - 1.0).abs() > tol {
                    return Err(Error::NotNormalized { op: name, row: r, sum: s });
                }
            }
        }
        let floor = T::from_f64_lossy(KL_FLOOR);
        let mut total = T::zero();
        for (&pi, &qi) in vp.data().iter().zip(vq.data()) {
            if pi > T::zero() {
                total += pi * (pi.ln() - qi.max(floor).ln());
            }
        }
        let value = total / T::from_usize(rows).unwrap();
        Ok(self.push_owned(Tensor::scalar(value), Op::Kl { p, q }, &[p, q]))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().copied().sum();
        self.push_owned(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.val(a).numel().max(1)).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sum of scalars, as a scalar.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let mut acc = *it.next().ok_or_else(|| Error::Invalid("empty sum".into()))?;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every
    /// trainable leaf. Frozen leaves receive none.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.val(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: leaf_grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let dc = MatRef::new(g, m, n);
                let mut ra = MatRef::new(va.data(), va.shape()[0], va.shape()[1]);
                let mut rb = MatRef::new(vb.data(), vb.shape()[0], vb.shape()[1]);
                if *ta {
                    ra = ra.t();
                }
                if *tb {
                    rb = rb.t();
                }
                if rg(*a) {
                    let buf = acc(grads, *a, va.numel());
                    if *ta {
                        gemm_into(rb, dc.t(), T::one(), buf);
                    } else {
                        gemm_into(dc, rb.t(), T::one(), buf);
                    }
                }
                if rg(*b) {
                    let buf = acc(grads, *b, vb.numel());
                    if *tb {
                        gemm_into(dc.t(), ra, T::one(), buf);
                    } else {
                        gemm_into(ra.t(), dc, T::one(), buf);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if rg(v) {
                        add_into(acc(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if rg(*b) {
                    for (d, &x) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::AddRow { a, row } => {
                if rg(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if rg(*row) {
                    let n = self.val(*row).numel();
                    let buf = acc(grads, *row, n);
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                }
            }
            Op::Scale { a, c } => {
                if rg(*a) {
                    for (d, &x) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                        *d += x * *c;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                if rg(*a) {
                    for ((d, &x), &y) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                }
                if rg(*b) {
                    for ((d, &x), &y) in acc(grads, *b, g.len()).iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.val(*gamma).numel();
                let gm = self.val(*gamma).data();
                if rg(*gamma) {
                    let buf = acc(grads, *gamma, n);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            buf[c] += gr[c] * hr[c];
                        }
                    }
                }
                if rg(*beta) {
                    let buf = acc(grads, *beta, n);
                    for gr in g.chunks(n) {
                        add_into(buf, gr);
                    }
                }
                if rg(*x) {
                    let nf = T::from_usize(n).unwrap();
                    let buf = acc(grads, *x, g.len());
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..n {
                            let dh = gr[c] * gm[c];
                            m1 += dh;
                            m2 += dh * hr[c];
                        }
                        m1 /= nf;
                        m2 /= nf;
                        for c in 0..n {
                            let dh = gr[c] * gm[c];
                            buf[r * n + c] += rstd[r] * (dh - m1 - hr[c] * m2);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if rg(*x) {
                    let vx = self.val(*x).data();
                    for ((d, &gi), &xi) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(vx) {
                        *d += gi * gelu_grad(xi);
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if rg(*table) {
                    let c = self.val(*table).cols();
                    let buf = acc(grads, *table, self.val(*table).numel());
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(&mut buf[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::Transpose { a } => {
                if rg(*a) {
                    let (r, c) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                    let buf = acc(grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.val(p).numel();
                    if rg(p) {
                        add_into(acc(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { a, start } => {
                if rg(*a) {
                    let c = self.val(*a).cols();
                    let buf = acc(grads, *a, self.val(*a).numel());
                    add_into(&mut buf[start * c..start * c + g.len()], g);
                }
            }
            Op::ConcatCols { parts } => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if rg(p) {
                        let buf = acc(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(&mut buf[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { a, start } => {
                if rg(*a) {
                    let c = self.val(*a).cols();
                    let w = out.cols();
                    let rows = out.shape()[0];
                    let buf = acc(grads, *a, self.val(*a).numel());
                    for r in 0..rows {
                        add_into(&mut buf[r * c + start..r * c + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Softmax { a } => {
                if rg(*a) {
                    let n = out.cols();
                    let y = out.data();
                    let buf = acc(grads, *a, y.len());
                    for ((yr, gr), br) in y.chunks(n).zip(g.chunks(n)).zip(buf.chunks_mut(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for c in 0..n {
                            br[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if rg(*logits) {
                    let v = self.val(*logits).cols();
                    let scale = g[0] / T::from_usize(targets.len()).unwrap();
                    let buf = acc(grads, *logits, self.val(*logits).numel());
                    for (k, &(r, y)) in targets.iter().enumerate() {
                        let p = &probs[k * v..(k + 1) * v];
                        let br = &mut buf[r * v..(r + 1) * v];
                        for c in 0..v {
                            br[c] += p[c] * scale;
                        }
                        br[y] -= scale;
                    }
                }
            }
            Op::Kl { p, q } => {
                let (vp, vq) = (self.val(*p), self.val(*q));
                let rows = vp.numel() / vp.cols().max(1);
                let scale = g[0] / T::from_usize(rows).unwrap();
                let floor = T::from_f64_lossy(KL_FLOOR);
                if rg(*q) {
                    let buf = acc(grads, *q, vq.numel());
                    for ((d, &pi), &qi) in buf.iter_mut().zip(vp.data()).zip(vq.data()) {
                        if qi > floor {
                            *d -= scale * pi / qi;
                        }
                    }
                }
                if rg(*p) {
                    let buf = acc(grads, *p, vp.numel());
                    for ((d, &pi), &qi) in buf.iter_mut().zip(vp.data()).zip(vq.data()) {
                        if pi > T::zero() {
                            *d += scale * (pi.ln() - qi.max(floor).ln() + T::one());
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if rg(*a) {
                    for d in acc(grads, *a, self.val(*a).numel()).iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}
