//! Dynamically recorded tape over whole-tensor operations.
//!
//! Every operation appends a node holding its output value and the handles
//! of its inputs. [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar root with respect to every leaf that requires
//! gradients. Nodes that do not depend on a gradient-carrying leaf are
//! skipped entirely during the reverse sweep.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Scale(Var, T),
    AddConst(Var),
    Abs(Var),
    Square(Var),
    Ln1p(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: T,
    },
    MaxPool {
        x: Var,
        kernel: usize,
    },
    AvgPool {
        x: Var,
        kernel: usize,
    },
    Reshape(Var),
    SwapAxes12(Var),
    ShiftRows {
        x: Var,
        shift: usize,
    },
    ConcatRows(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one reverse sweep, keyed by leaf handle.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf, or `None` when no path reaches it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a leaf, materialized as zeros when unreachable.
    pub fn get_or_zeros(&self, v: Var, numel: usize) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); numel])
    }
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// New tape with finite-value checking on.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn with_check_finite(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf that receives gradients.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self
            .parents(&op)
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op<T>) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::ConcatRows(a, b) => vec![a, b],
            Op::BatchMatMul { a, b, .. } => vec![a, b],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Scale(x, _)
            | Op::AddConst(x)
            | Op::Abs(x)
            | Op::Square(x)
            | Op::Ln1p(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::SwapAxes12(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![x],
            Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::ShiftRows { x, .. }
            | Op::SliceRows { x, .. }
            | Op::GatherRows { x, .. } => vec![x],
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn rank2(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(x) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(format!("{what}: expected rank 2, got {s:?}"))),
        }
    }

    fn unary(&mut self, x: Var, op: Op<T>, name: &'static str, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(out, Op::Add(a, b), "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).numel() != d {
            return Err(Error::dim(format!(
                "add_bias: bias of {} values for last dim {d}",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        self.push(out, Op::AddBias(x, bias), "add_bias")
    }

    /// `a[..., K] · b[K, N]`, leading axes of `a` collapsed into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k2, n) = self.rank2(b, "matmul rhs")?;
        let va = self.value(a);
        let k = va.last_dim();
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dims {k} and {k2} disagree ({:?} x {:?})",
                va.shape(),
                self.shape(b)
            )));
        }
        let m = va.rows();
        let mut out = vec![T::zero(); m * n];
        gemm_nn(va.data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(&shape, out)?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// Batched product over the leading axis: `[B,M,K]·[B,K,N]`, or
    /// `[B,M,K]·[B,N,K]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[ba, m, k], &[bb, r1, r2]) = (sa, sb) else {
            return Err(Error::dim(format!(
                "bmm: expected rank 3, got {sa:?} and {sb:?}"
            )));
        };
        let (kb, n) = if trans_b { (r2, r1) } else { (r1, r2) };
        if ba != bb || k != kb {
            return Err(Error::dim(format!(
                "bmm: incompatible {sa:?} and {sb:?} (trans_b={trans_b})"
            )));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); ba * m * n];
        for i in 0..ba {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ai, bi, oi, m, k, n);
            } else {
                gemm_nn(ai, bi, oi, m, k, n);
            }
        }
        let out = Tensor::new(&[ba, m, n], out)?;
        self.push(out, Op::BatchMatMul { a, b, trans_b }, "bmm")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, Op::Scale(x, s), "scale", |v| v * s)
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Op::AddConst(x), "add_const", |v| v + c)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), "abs", |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), "square", |v| v * v)
    }

    /// `ln(1 + x)` elementwise.
    pub fn ln1p(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Ln1p(x), "ln1p", |v| v.ln_1p())
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), "gelu", gelu_scalar)
    }

    /// Softmax over the last axis. `mask[j] == false` blocks an entry; the
    /// mask is tiled over the rows of `x` so it may cover one row, one
    /// `L×L` block, or the whole tensor.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let vx = self.value(x);
        let l = vx.last_dim();
        if let Some(m) = mask {
            if m.is_empty() || m.len() % l != 0 || !vx.numel().is_multiple_of(m.len()) {
                return Err(Error::dim(format!(
                    "softmax mask of {} entries does not tile {:?}",
                    m.len(),
                    vx.shape()
                )));
            }
        }
        let mut out = vec![T::zero(); vx.numel()];
        for (r, (row, orow)) in vx.data().chunks(l).zip(out.chunks_mut(l)).enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m[(r * l + j) % m.len()]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::DegenerateRow { row: r });
            }
            let mut sum = T::zero();
            for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if allowed(j) {
                    *o = (v - max).exp();
                    sum = sum + *o;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        self.push(out, Op::Softmax(x), "softmax")
    }

    /// Normalizes every row of `x` to zero mean and unit variance, then
    /// applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim(format!(
                "layer_norm: affine params do not match last dim {d}"
            )));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![T::zero(); vx.numel()];
        for (row, orow) in vx.data().chunks(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = row_moments(row, eps);
            for j in 0..d {
                orow[j] = g[j] * (row[j] - mean) * rstd + b[j];
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        self.push(out, Op::LayerNorm { x, gain, bias, eps }, "layer_norm")
    }

    fn pool_shape(&self, x: Var, kernel: usize, what: &str) -> Result<(usize, usize)> {
        let (f, d) = self.rank2(x, what)?;
        if kernel == 0 || f % kernel != 0 {
            return Err(Error::config(format!(
                "{what}: {f} frames not divisible by kernel {kernel}"
            )));
        }
        Ok((f, d))
    }

    /// Per-channel max over disjoint windows of `kernel` rows.
    pub fn max_pool_1d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let (f, d) = self.pool_shape(x, kernel, "max_pool_1d")?;
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); f / kernel * d];
        for (w, orow) in out.chunks_mut(d).enumerate() {
            for (c, o) in orow.iter_mut().enumerate() {
                *o = vx[window_argmax(vx, w, kernel, d, c)];
            }
        }
        let out = Tensor::new(&[f / kernel, d], out)?;
        self.push(out, Op::MaxPool { x, kernel }, "max_pool_1d")
    }

    /// Per-channel mean over disjoint windows of `kernel` rows.
    pub fn avg_pool_1d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let (f, d) = self.pool_shape(x, kernel, "avg_pool_1d")?;
        let vx = self.value(x).data();
        let inv = T::one() / T::lit(kernel as f64);
        let mut out = vec![T::zero(); f / kernel * d];
        for (w, orow) in out.chunks_mut(d).enumerate() {
            for r in 0..kernel {
                let src = &vx[(w * kernel + r) * d..(w * kernel + r + 1) * d];
                for (o, &v) in orow.iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
            for o in orow.iter_mut() {
                *o = *o * inv;
            }
        }
        let out = Tensor::new(&[f / kernel, d], out)?;
        self.push(out, Op::AvgPool { x, kernel }, "avg_pool_1d")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let &[a, b, c, d] = self.shape(x) else {
            return Err(Error::dim(format!(
                "swap_axes12: expected rank 4, got {:?}",
                self.shape(x)
            )));
        };
        let out = swap12(self.value(x).data(), a, b, c, d);
        let out = Tensor::new(&[a, c, b, d], out)?;
        self.push(out, Op::SwapAxes12(x), "swap_axes12")
    }

    /// Circular left shift of the rows: `out[j] = x[(j + shift) mod F]`.
    pub fn shift_rows(&mut self, x: Var, shift: usize) -> Result<Var> {
        let (f, d) = self.rank2(x, "shift_rows")?;
        if shift >= f {
            return Err(Error::dim(format!(
                "shift_rows: shift {shift} out of range for {f} rows"
            )));
        }
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(f * d);
        out.extend_from_slice(&vx[shift * d..]);
        out.extend_from_slice(&vx[..shift * d]);
        let out = Tensor::new(&[f, d], out)?;
        self.push(out, Op::ShiftRows { x, shift }, "shift_rows")
    }

    /// Stacks the rows of `b` under the rows of `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.rank2(a, "concat_rows")?;
        let (rb, cb) = self.rank2(b, "concat_rows")?;
        if ca != cb {
            return Err(Error::dim(format!("concat_rows: {ca} vs {cb} columns")));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let out = Tensor::new(&[ra + rb, ca], out)?;
        self.push(out, Op::ConcatRows(a, b), "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (f, d) = self.rank2(x, "slice_rows")?;
        if len == 0 || start + len > f {
            return Err(Error::dim(format!(
                "slice_rows: [{start}, {}) outside {f} rows",
                start + len
            )));
        }
        let out = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::new(&[len, d], out)?;
        self.push(out, Op::SliceRows { x, start }, "slice_rows")
    }

    /// `out[j] = x[index[j]]` over rows.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (f, d) = self.rank2(x, "gather_rows")?;
        if index.is_empty() || index.iter().any(|&i| i >= f) {
            return Err(Error::dim(format!(
                "gather_rows: index out of range for {f} rows"
            )));
        }
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&vx[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[index.len(), d], out)?;
        self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), "mean")
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::dim(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(buf);
        };

        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, &mut |ga| axpy(ga, g, T::one()));
                acc(b, &mut |gb| axpy(gb, g, T::one()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + g[j] * vb[j];
                    }
                });
                acc(b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] = gb[j] + g[j] * va[j];
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(x, &mut |gx| axpy(gx, g, T::one()));
                acc(b, &mut |gb| {
                    for row in g.chunks(gb.len()) {
                        axpy(gb, row, T::one());
                    }
                });
            }
            Op::MatMul(a, b) => {
                let vb = &self.nodes[b.0].value;
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = g.len() / n;
                if needs(a) {
                    acc(a, &mut |ga| gemm_nt(g, vb.data(), ga, m, n, k));
                }
                if needs(b) {
                    let va = val(a);
                    acc(b, &mut |gb| gemm_tn(va, g, gb, m, k, n));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.nodes[a.0].value.shape();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            // b is [n, k]
                            gemm_nn(gi, bi, out, m, n, k);
                        } else {
                            gemm_nt(gi, bi, out, m, n, k);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm_tn(gi, ai, out, m, n, k);
                        } else {
                            gemm_tn(ai, gi, out, m, k, n);
                        }
                    }
                });
            }
            Op::Scale(x, s) => acc(x, &mut |gx| axpy(gx, g, s)),
            Op::AddConst(x) => acc(x, &mut |gx| axpy(gx, g, T::one())),
            Op::Abs(x) => {
                let vx = val(x);
                acc(x, &mut |gx| {
                    for j in 0..gx.len() {
                        let s = if vx[j] > T::zero() {
                            T::one()
                        } else if vx[j] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        gx[j] = gx[j] + g[j] * s;
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(x);
                let two = T::lit(2.0);
                acc(x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] = gx[j] + g[j] * two * vx[j];
                    }
                });
            }
            Op::Ln1p(x) => {
                let vx = val(x);
                acc(x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] = gx[j] + g[j] / (T::one() + vx[j]);
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = val(x);
                acc(x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] = gx[j] + g[j] * gelu_grad(vx[j]);
                    }
                });
            }
            Op::Softmax(x) => {
                let p = node.value.data();
                let l = node.value.last_dim();
                acc(x, &mut |gx| {
                    for ((prow, grow), xrow) in p.chunks(l).zip(g.chunks(l)).zip(gx.chunks_mut(l)) {
                        let dot: T = prow.iter().zip(grow).map(|(&pv, &gv)| pv * gv).sum();
                        for j in 0..l {
                            xrow[j] = xrow[j] + prow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = val(x);
                let gn = val(gain);
                let d = gn.len();
                let dn = T::lit(d as f64);
                if needs(gain) || needs(bias) {
                    let mut dgain = vec![T::zero(); d];
                    let mut dbias = vec![T::zero(); d];
                    for (row, grow) in vx.chunks(d).zip(g.chunks(d)) {
                        let (mean, rstd) = row_moments(row, eps);
                        for j in 0..d {
                            dgain[j] = dgain[j] + grow[j] * (row[j] - mean) * rstd;
                            dbias[j] = dbias[j] + grow[j];
                        }
                    }
                    acc(gain, &mut |gg| axpy(gg, &dgain, T::one()));
                    acc(bias, &mut |gb| axpy(gb, &dbias, T::one()));
                }
                acc(x, &mut |gx| {
                    let mut dxhat = vec![T::zero(); d];
                    for ((row, grow), xrow) in vx.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                        let (mean, rstd) = row_moments(row, eps);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = grow[j] * gn[j];
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * (row[j] - mean) * rstd;
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            xrow[j] = xrow[j] + rstd * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                });
            }
            Op::MaxPool { x, kernel } => {
                let vx = val(x);
                let d = node.value.last_dim();
                acc(x, &mut |gx| {
                    for (w, grow) in g.chunks(d).enumerate() {
                        for (c, &gv) in grow.iter().enumerate() {
                            let src = window_argmax(vx, w, kernel, d, c);
                            gx[src] = gx[src] + gv;
                        }
                    }
                });
            }
            Op::AvgPool { x, kernel } => {
                let d = node.value.last_dim();
                let inv = T::one() / T::lit(kernel as f64);
                acc(x, &mut |gx| {
                    for (w, grow) in g.chunks(d).enumerate() {
                        for r in 0..kernel {
                            let dst = &mut gx[(w * kernel + r) * d..(w * kernel + r + 1) * d];
                            axpy(dst, grow, inv);
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(x, &mut |gx| axpy(gx, g, T::one())),
            Op::SwapAxes12(x) => {
                let s = self.nodes[x.0].value.shape();
                // the output is [a, c, b, d]; swapping back restores [a, b, c, d]
                let back = swap12(g, s[0], s[2], s[1], s[3]);
                acc(x, &mut |gx| axpy(gx, &back, T::one()));
            }
            Op::ShiftRows { x, shift } => {
                let d = node.value.last_dim();
                let f = g.len() / d;
                acc(x, &mut |gx| {
                    for j in 0..f {
                        let src = (j + shift) % f;
                        axpy(
                            &mut gx[src * d..(src + 1) * d],
                            &g[j * d..(j + 1) * d],
                            T::one(),
                        );
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].value.numel();
                acc(a, &mut |ga| axpy(ga, &g[..na], T::one()));
                acc(b, &mut |gb| axpy(gb, &g[na..], T::one()));
            }
            Op::SliceRows { x, start } => {
                let d = node.value.last_dim();
                acc(x, &mut |gx| {
                    axpy(&mut gx[start * d..start * d + g.len()], g, T::one())
                });
            }
            Op::GatherRows { x, ref index } => {
                let d = node.value.last_dim();
                acc(x, &mut |gx| {
                    for (j, &i) in index.iter().enumerate() {
                        axpy(
                            &mut gx[i * d..(i + 1) * d],
                            &g[j * d..(j + 1) * d],
                            T::one(),
                        );
                    }
                });
            }
            Op::Sum(x) => acc(x, &mut |gx| {
                for v in gx.iter_mut() {
                    *v = *v + g[0];
                }
            }),
            Op::Mean(x) => acc(x, &mut |gx| {
                let s = g[0] / T::lit(gx.len() as f64);
                for v in gx.iter_mut() {
                    *v = *v + s;
                }
            }),
        }
    }
}

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    x * std_normal_cdf(x)
}

fn std_normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    std_normal_cdf(x) + x * pdf
}

fn row_moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

/// Flat index of the first maximum in channel `c` of window `w`.
fn window_argmax<T: Real>(x: &[T], w: usize, kernel: usize, d: usize, c: usize) -> usize {
    let mut best = w * kernel * d + c;
    for r in 1..kernel {
        let idx = (w * kernel + r) * d + c;
        if x[idx] > x[best] {
            best = idx;
        }
    }
    best
}

fn swap12<T: Real>(x: &[T], a: usize, b: usize, c: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

#[inline]
fn axpy<T: Real>(y: &mut [T], x: &[T], alpha: T) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            axpy(crow, &b[p * n..(p + 1) * n], av);
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: T = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            c[i * n + j] = c[i * n + j] + dot;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            axpy(&mut c[p * n..(p + 1) * n], brow, av);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let id = g.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(t(&[&[5.0, 6.0], &[7.0, 8.0]]));

        let r = g.matmul(id, a).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = g.matmul(a, z).unwrap();
        assert_eq!(g.value(r).data(), &[0.0; 4]);
        let r = g.matmul(a, b).unwrap();
        assert_eq!(g.value(r).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[3], vec![0.0; 3]).unwrap());
        let p = g.softmax_masked(x, None).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = g.constant(Tensor::new(&[3], vec![5.0, 2.0, 9.0]).unwrap());
        let p = g.softmax_masked(x, Some(&[true, false, true])).unwrap();
        let e5 = 5f64.exp();
        let e9 = 9f64.exp();
        let expect = e5 / (e5 + e9);
        let out = g.value(p).data();
        assert!((out[0] - expect).abs() < 1e-15);
        assert_eq!(out[1], 0.0);
        assert!((out[2] - (1.0 - expect)).abs() < 1e-15);

        let x = g.constant(Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap());
        let p = g.softmax_masked(x, None).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let err = g
            .softmax_masked(x, Some(&[true, true, false, false]))
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[&[1.0, 3.0]]));
        let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(t(&[&[2.5; 4]]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_normalizes_random_rows() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d = 16;
        let data: Vec<f64> = (0..d * 10).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut g = Graph::<f64>::new();
        let gain = g.constant(Tensor::full(&[d], 1.0));
        let bias = g.constant(Tensor::zeros(&[d]));
        let x = g.constant(Tensor::new(&[10, d], data).unwrap());
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for row in g.value(y).data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
        // x·Φ(x) at x = 1, Φ(1) = 0.841344746068542948...
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[&[1.0], &[5.0], &[3.0], &[2.0], &[4.0]]));
        let y = g.max_pool_1d(x, 5).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        let y = g.max_pool_1d(x, 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        assert!(matches!(g.max_pool_1d(x, 2), Err(Error::Config(_))));

        let x = g.constant(t(&[&[1.0, 9.0], &[2.0, 8.0], &[3.0, 7.0], &[4.0, 6.0]]));
        let y = g.max_pool_1d(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 9.0, 4.0, 7.0]);

        let x = g.constant(t(&[&[2.0], &[4.0]]));
        let y = g.avg_pool_1d(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
        let x = g.constant(t(&[&[1.0, 0.0], &[3.0, 8.0]]));
        let y = g.avg_pool_1d(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0]);
        let x = g.constant(Tensor::full(&[6, 3], 1.5));
        let y = g.avg_pool_1d(x, 3).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn max_pool_gradient_goes_to_first_maximum() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[&[3.0], &[3.0], &[1.0], &[2.0]]));
        let y = g.max_pool_1d(x, 2).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.sum(w).unwrap();
        assert_eq!(g.backward(s).unwrap().get(w).unwrap(), &[1.0, 1.0, 1.0]);

        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().get(w).unwrap(), &[2.0, 4.0, 6.0]);

        let other = g.leaf(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        let s = g.sum(other).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get_or_zeros(w, 3), vec![0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::zeros(&[2]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1], vec![-2.0]).unwrap());
        assert!(matches!(g.ln1p(x), Err(Error::NonFinite { op: "ln1p" })));
        let mut g = Graph::<f64>::new().with_check_finite(false);
        let x = g.constant(Tensor::new(&[1], vec![-2.0]).unwrap());
        assert!(g.ln1p(x).is_ok());
    }

    #[test]
    fn row_ops() {
        let mut g = Graph::<f64>::new();
        let rows: Vec<Vec<f64>> = (1..=8).map(|i| vec![i as f64]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let x = g.constant(t(&refs));
        let s = g.shift_rows(x, 2).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 1.0, 2.0]);
        let back = g.shift_rows(s, 6).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        let z = g.shift_rows(x, 0).unwrap();
        assert_eq!(g.value(z).data(), g.value(x).data());

        let head = g.slice_rows(x, 0, 1).unwrap();
        let cat = g.concat_rows(head, x).unwrap();
        assert_eq!(g.shape(cat), &[9, 1]);
        let gat = g.gather_rows(x, &[7, 0]).unwrap();
        assert_eq!(g.value(gat).data(), &[8.0, 1.0]);
    }
}
