//! Dense f64 tensors of shape `[batch, rows, cols]` and a reverse-mode tape.
//!
//! A [`Graph`] records every primitive as it is applied; node ids are handed
//! out in creation order, so the node list is already topologically sorted
//! and [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is limited to what the decoders need: any axis of size 1 may
//! be broadcast in `add`/`mul`, and either operand of `matmul` may have a
//! batch of 1.

use std::sync::Arc;

use thiserror::Error;

use crate::mask::MaskMatrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: [usize; 3], right: [usize; 3] },
    #[error("data of length {len} cannot fill shape {shape:?}")]
    DataLength { len: usize, shape: [usize; 3] },
    #[error("mask row {0} has no unmasked entry")]
    FullyMaskedRow(usize),
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("backward needs a scalar root, got shape {0:?}")]
    NotScalar([usize; 3]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl AsMut<[f64]> for Tensor {
    fn as_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl Tensor {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Tensor, TensorError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::DataLength { len: data.len(), shape });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Tensor {
        Tensor { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: [usize; 3], v: f64) -> Tensor {
        Tensor { shape, data: vec![v; shape.iter().product()] }
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Tensor {
        let mut data = Vec::with_capacity(shape.iter().product());
        for b in 0..shape[0] {
            for i in 0..shape[1] {
                for j in 0..shape[2] {
                    data.push(f(b, i, j));
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, b: usize, i: usize, j: usize) -> f64 {
        self.data[(b * self.shape[1] + i) * self.shape[2] + j]
    }

    /// Row `i` of batch entry `b`.
    pub fn row(&self, b: usize, i: usize) -> &[f64] {
        let c = self.shape[2];
        let start = (b * self.shape[1] + i) * c;
        &self.data[start..start + c]
    }

    /// Batch entry `b` as a row-major `rows x cols` slice.
    pub fn matrix(&self, b: usize) -> &[f64] {
        let sz = self.shape[1] * self.shape[2];
        &self.data[b * sz..(b + 1) * sz]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    MaskedSoftmax { a: Var, mask: Arc<MaskMatrix> },
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    ConcatRows { a: Var, b: Var },
    Reshape { a: Var },
    SplitHeads { a: Var, heads: usize },
    MergeHeads { a: Var, heads: usize },
    FlipLoss { logits: Var, target: Vec<f64>, norm: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Logical matrix view into a stored batch entry, possibly transposed.
#[derive(Clone, Copy)]
struct View {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl View {
    fn of(shape: [usize; 3], transposed: bool) -> View {
        let (r, c) = (shape[1], shape[2]);
        if transposed {
            View { rows: c, cols: r, rs: 1, cs: c as isize }
        } else {
            View { rows: r, cols: c, rs: c as isize, cs: 1 }
        }
    }

    fn t(self) -> View {
        View { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `c = a·b + beta·c` over raw strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], va: View, b: &[f64], vb: View, c: &mut [f64], vc: View, beta: f64) {
    debug_assert_eq!(va.cols, vb.rows);
    debug_assert_eq!((va.rows, vb.cols), (vc.rows, vc.cols));
    let (m, k, n) = (va.rows, va.cols, vb.cols);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every view was derived from the shape of the slice it indexes,
    // so all strided accesses stay in bounds; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), va.rs, va.cs, b.as_ptr(), vb.rs, vb.cs, beta, c.as_mut_ptr(), vc.rs, vc.cs,
        );
    }
}

fn broadcast_shape(op: &'static str, a: [usize; 3], b: [usize; 3]) -> Result<[usize; 3], TensorError> {
    let mut out = [0; 3];
    for d in 0..3 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::Shape { op, left: a, right: b }),
        };
    }
    Ok(out)
}

fn strides(shape: [usize; 3], out: [usize; 3]) -> [usize; 3] {
    let full = [shape[1] * shape[2], shape[2], 1];
    let mut s = [0; 3];
    for d in 0..3 {
        s[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { full[d] };
    }
    s
}

/// Calls `f(out_index, a_index, b_index)` over a broadcast pair.
fn for_each_broadcast(out: [usize; 3], a: [usize; 3], b: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let sa = strides(a, out);
    let sb = strides(b, out);
    let mut o = 0;
    for x in 0..out[0] {
        for y in 0..out[1] {
            let ba = x * sa[0] + y * sa[1];
            let bb = x * sb[0] + y * sb[1];
            for z in 0..out[2] {
                f(o, ba + z * sa[2], bb + z * sb[2]);
                o += 1;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over the unmasked entries of each row; masked outputs are
/// written as exact zeros.
fn masked_softmax_forward(x: &[f64], rows: usize, cols: usize, mask: &MaskMatrix, out: &mut [f64]) {
    let allowed = mask.allowed();
    for (xrow, (orow, i)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols).zip((0..rows).cycle())) {
        let arow = &allowed[i * cols..(i + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for (&v, &ok) in xrow.iter().zip(arow) {
            if ok && v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for ((o, &v), &ok) in orow.iter_mut().zip(xrow).zip(arow) {
            *o = if ok { (v - max).exp() } else { 0.0 };
            sum += *o;
        }
        let inv = 1.0 / sum;
        for (o, &ok) in orow.iter_mut().zip(arow) {
            if ok {
                *o *= inv;
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    let len = n.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 3] {
        self.nodes[v.0].value.shape
    }

    /// Gradient of the backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used by gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Trainable parameter number `id`.
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(id), true)
    }

    /// `op(a)·op(b)` per batch entry; `ta`/`tb` transpose the stored matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (va, vb) = (View::of(sa, ta), View::of(sb, tb));
        let batch_ok = sa[0] == sb[0] || sa[0] == 1 || sb[0] == 1;
        if va.cols != vb.rows || !batch_ok {
            return Err(TensorError::Shape { op: "matmul", left: sa, right: sb });
        }
        let batch = sa[0].max(sb[0]);
        let shape = [batch, va.rows, vb.cols];
        let mut out = Tensor::zeros(shape);
        let vc = View::of(shape, false);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if sb[0] == 1 && !ta && sa[0] == batch {
            // Fold the batch into the rows: one large product.
            let fa = View { rows: batch * va.rows, ..va };
            let fc = View { rows: batch * va.rows, ..vc };
            gemm(&av.data, fa, &bv.data, vb, &mut out.data, fc, 0.0);
        } else {
            for bi in 0..batch {
                let am = av.matrix(if sa[0] == 1 { 0 } else { bi });
                let bm = bv.matrix(if sb[0] == 1 { 0 } else { bi });
                let sz = shape[1] * shape[2];
                gemm(am, va, bm, vb, &mut out.data[bi * sz..(bi + 1) * sz], vc, 0.0);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape("add", sa, sb)?;
        let mut out = Tensor::zeros(shape);
        let (x, y) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        if sa == sb {
            for ((o, &p), &q) in out.data.iter_mut().zip(x).zip(y) {
                *o = p + q;
            }
        } else {
            for_each_broadcast(shape, sa, sb, |o, i, j| out.data[o] = x[i] + y[j]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape("mul", sa, sb)?;
        let mut out = Tensor::zeros(shape);
        let (x, y) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        for_each_broadcast(shape, sa, sb, |o, i, j| out.data[o] = x[i] * y[j]);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor { shape: v.shape, data: v.data.iter().map(|x| x * s).collect() };
        let ng = self.ng(a);
        self.push(out, Op::Scale { a, s }, ng)
    }

    /// Row-wise softmax restricted to the unmasked entries of `mask`, which
    /// is broadcast over the batch.
    pub fn masked_softmax(&mut self, a: Var, mask: Arc<MaskMatrix>) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if mask.rows() != s[1] || mask.cols() != s[2] {
            return Err(TensorError::Shape { op: "masked_softmax", left: s, right: [1, mask.rows(), mask.cols()] });
        }
        if let Some(&r) = mask.empty_rows().first() {
            return Err(TensorError::FullyMaskedRow(r));
        }
        let mut out = Tensor::zeros(s);
        masked_softmax_forward(&self.nodes[a.0].value.data, s[1], s[2], &mask, &mut out.data);
        let ng = self.ng(a);
        Ok(self.push(out, Op::MaskedSoftmax { a, mask }, ng))
    }

    /// Normalizes each row over the last axis, then applies `gain` and
    /// `bias` of shape `[1, 1, cols]`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let s = self.shape(a);
        let c = s[2];
        for p in [gain, bias] {
            if self.shape(p) != [1, 1, c] {
                return Err(TensorError::Shape { op: "layer_norm", left: s, right: self.shape(p) });
            }
        }
        let x = &self.nodes[a.0].value.data;
        let g = &self.nodes[gain.0].value.data;
        let bb = &self.nodes[bias.0].value.data;
        let rows = s[0] * s[1];
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(s);
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out.data[r * c + j] = h * g[j] + bb[j];
            }
        }
        let ng = self.ng(a) || self.ng(gain) || self.ng(bias);
        Ok(self.push(out, Op::LayerNorm { a, gain, bias, xhat, rstd }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor { shape: v.shape, data: v.data.iter().map(|&x| gelu(x)).collect() };
        let ng = self.ng(a);
        self.push(out, Op::Gelu { a }, ng)
    }

    /// Stacks `b` under `a` along the row axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(TensorError::Shape { op: "concat_rows", left: sa, right: sb });
        }
        let shape = [sa[0], sa[1] + sb[1], sa[2]];
        let mut data = Vec::with_capacity(shape.iter().product());
        for bi in 0..sa[0] {
            data.extend_from_slice(self.nodes[a.0].value.matrix(bi));
            data.extend_from_slice(self.nodes[b.0].value.matrix(bi));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape, data }, Op::ConcatRows { a, b }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: [usize; 3]) -> Result<Var, TensorError> {
        let v = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != v.len() {
            return Err(TensorError::Shape { op: "reshape", left: v.shape, right: shape });
        }
        let out = Tensor { shape, data: v.data.clone() };
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape { a }, ng))
    }

    /// `[B, r, h·dh] -> [B·h, r, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if heads == 0 || s[2] % heads != 0 {
            return Err(TensorError::Shape { op: "split_heads", left: s, right: [heads, 0, 0] });
        }
        let dh = s[2] / heads;
        let shape = [s[0] * heads, s[1], dh];
        let x = &self.nodes[a.0].value;
        let out = Tensor::from_fn(shape, |bh, i, j| x.get(bh / heads, i, (bh % heads) * dh + j));
        let ng = self.ng(a);
        Ok(self.push(out, Op::SplitHeads { a, heads }, ng))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if heads == 0 || s[0] % heads != 0 {
            return Err(TensorError::Shape { op: "merge_heads", left: s, right: [heads, 0, 0] });
        }
        let dh = s[2];
        let shape = [s[0] / heads, s[1], dh * heads];
        let x = &self.nodes[a.0].value;
        let out = Tensor::from_fn(shape, |b, i, j| x.get(b * heads + j / dh, i, j % dh));
        let ng = self.ng(a);
        Ok(self.push(out, Op::MergeHeads { a, heads }, ng))
    }

    /// Sign-flip cross-entropy summed over all entries and divided by `norm`:
    /// `sum z·softplus(f) + (1 - z)·softplus(-f)`, i.e.
    /// `-[z·ln(1 - σ(f)) + (1 - z)·ln σ(f)]`.
    pub fn flip_loss(&mut self, logits: Var, target: &[u8], norm: f64) -> Result<Var, TensorError> {
        let s = self.shape(logits);
        let f = &self.nodes[logits.0].value.data;
        if f.len() != target.len() {
            return Err(TensorError::Shape { op: "flip_loss", left: s, right: [1, 1, target.len()] });
        }
        let target: Vec<f64> = target.iter().map(|&z| z as f64).collect();
        let total: f64 = f.iter().zip(&target).map(|(&f, &z)| z * softplus(f) + (1.0 - z) * softplus(-f)).sum();
        let out = Tensor { shape: [1, 1, 1], data: vec![total / norm] };
        let ng = self.ng(logits);
        Ok(self.push(out, Op::FlipLoss { logits, target, norm }, ng))
    }

    /// Propagates `d root / d node` to every node that needs it. Runs once.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let rs = self.shape(root);
        if rs != [1, 1, 1] {
            return Err(TensorError::NotScalar(rs));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(gout) = self.grads[id].take() else { continue };
            self.backward_node(id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn backward_node(&mut self, id: usize, gout: &[f64]) {
        // Inputs always precede `id`, so splitting the node list lets us read
        // this node's saved state while accumulating into the inputs.
        let (before, rest) = self.nodes.split_at(id);
        let node = &rest[0];
        let out_shape = node.value.shape;
        let grads = &mut self.grads[..];
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, before, $v)
            };
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (&before[a.0].value, &before[b.0].value);
                let (sa, sb) = (av.shape, bv.shape);
                let (va, vb) = (View::of(sa, ta), View::of(sb, tb));
                let vc = View::of(out_shape, false);
                let batch = out_shape[0];
                let csz = out_shape[1] * out_shape[2];
                if let Some(ga) = acc!(a) {
                    // d op(A) = dC · op(B)ᵀ, written through A's view.
                    if sb[0] == 1 && !ta && sa[0] == batch {
                        let fa = View { rows: batch * va.rows, ..va };
                        let fc = View { rows: batch * va.rows, ..vc };
                        gemm(gout, fc, &bv.data, vb.t(), ga, fa, 1.0);
                    } else {
                        for bi in 0..batch {
                            let ai = if sa[0] == 1 { 0 } else { bi };
                            let bm = bv.matrix(if sb[0] == 1 { 0 } else { bi });
                            let asz = sa[1] * sa[2];
                            gemm(&gout[bi * csz..(bi + 1) * csz], vc, bm, vb.t(), &mut ga[ai * asz..(ai + 1) * asz], va, 1.0);
                        }
                    }
                }
                if let Some(gb) = acc!(b) {
                    let bsz = sb[1] * sb[2];
                    if sb[0] == 1 && !ta && sa[0] == batch {
                        let fa = View { rows: batch * va.rows, ..va };
                        let fc = View { rows: batch * va.rows, ..vc };
                        gemm(&av.data, fa.t(), gout, fc, &mut gb[..bsz], vb, 1.0);
                    } else {
                        for bi in 0..batch {
                            let bidx = if sb[0] == 1 { 0 } else { bi };
                            let am = av.matrix(if sa[0] == 1 { 0 } else { bi });
                            gemm(am, va.t(), &gout[bi * csz..(bi + 1) * csz], vc, &mut gb[bidx * bsz..(bidx + 1) * bsz], vb, 1.0);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                let (sa, sb) = (before[a.0].value.shape, before[b.0].value.shape);
                if let Some(ga) = acc!(a) {
                    if sa == out_shape {
                        ga.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
                    } else {
                        for_each_broadcast(out_shape, sa, sa, |o, i, _| ga[i] += gout[o]);
                    }
                }
                if let Some(gb) = acc!(b) {
                    if sb == out_shape {
                        gb.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
                    } else {
                        for_each_broadcast(out_shape, sb, sb, |o, i, _| gb[i] += gout[o]);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (x, y) = (&before[a.0].value, &before[b.0].value);
                let (sa, sb) = (x.shape, y.shape);
                if let Some(ga) = acc!(a) {
                    for_each_broadcast(out_shape, sa, sb, |o, i, j| ga[i] += gout[o] * y.data[j]);
                }
                if let Some(gb) = acc!(b) {
                    for_each_broadcast(out_shape, sa, sb, |o, i, j| gb[j] += gout[o] * x.data[i]);
                }
            }
            &Op::Scale { a, s } => {
                if let Some(ga) = acc!(a) {
                    ga.iter_mut().zip(gout).for_each(|(g, d)| *g += s * d);
                }
            }
            Op::MaskedSoftmax { a, mask } => {
                let y = &node.value.data;
                let c = out_shape[2];
                let r = out_shape[1];
                let allowed = mask.allowed();
                if let Some(ga) = acc!(*a) {
                    for (row, ((yr, dr), gr)) in
                        y.chunks_exact(c).zip(gout.chunks_exact(c)).zip(ga.chunks_exact_mut(c)).enumerate()
                    {
                        let arow = &allowed[(row % r) * c..(row % r + 1) * c];
                        let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            if arow[j] {
                                gr[j] += yr[j] * (dr[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { a, gain, bias, xhat, rstd } => {
                let c = out_shape[2];
                let g = &before[gain.0].value.data;
                if let Some(gg) = acc!(*gain) {
                    for (h, d) in xhat.chunks_exact(c).zip(gout.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += d[j] * h[j];
                        }
                    }
                }
                if let Some(gb) = acc!(*bias) {
                    for d in gout.chunks_exact(c) {
                        for j in 0..c {
                            gb[j] += d[j];
                        }
                    }
                }
                if let Some(ga) = acc!(*a) {
                    let mut dh = vec![0.0; c];
                    for (r, ((h, d), gr)) in
                        xhat.chunks_exact(c).zip(gout.chunks_exact(c)).zip(ga.chunks_exact_mut(c)).enumerate()
                    {
                        for j in 0..c {
                            dh[j] = d[j] * g[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(h).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gr[j] += rstd[r] * (dh[j] - m1 - h[j] * m2);
                        }
                    }
                }
            }
            &Op::Gelu { a } => {
                let x = &before[a.0].value.data;
                if let Some(ga) = acc!(a) {
                    for ((g, &xv), &d) in ga.iter_mut().zip(x).zip(gout) {
                        *g += d * gelu_grad(xv);
                    }
                }
            }
            &Op::ConcatRows { a, b } => {
                let (sa, sb) = (before[a.0].value.shape, before[b.0].value.shape);
                let (na, nb) = (sa[1] * sa[2], sb[1] * sb[2]);
                if let Some(ga) = acc!(a) {
                    for bi in 0..sa[0] {
                        let src = &gout[bi * (na + nb)..bi * (na + nb) + na];
                        ga[bi * na..(bi + 1) * na].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                    }
                }
                if let Some(gb) = acc!(b) {
                    for bi in 0..sb[0] {
                        let src = &gout[bi * (na + nb) + na..(bi + 1) * (na + nb)];
                        gb[bi * nb..(bi + 1) * nb].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = acc!(a) {
                    ga.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
                }
            }
            &Op::SplitHeads { a, heads } => {
                let s = before[a.0].value.shape;
                let dh = s[2] / heads;
                if let Some(ga) = acc!(a) {
                    let mut o = 0;
                    for bh in 0..out_shape[0] {
                        for i in 0..out_shape[1] {
                            for j in 0..dh {
                                ga[((bh / heads) * s[1] + i) * s[2] + (bh % heads) * dh + j] += gout[o];
                                o += 1;
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { a, heads } => {
                let s = before[a.0].value.shape;
                let dh = s[2];
                if let Some(ga) = acc!(a) {
                    let mut o = 0;
                    for b in 0..out_shape[0] {
                        for i in 0..out_shape[1] {
                            for j in 0..out_shape[2] {
                                ga[((b * heads + j / dh) * s[1] + i) * dh + j % dh] += gout[o];
                                o += 1;
                            }
                        }
                    }
                }
            }
            Op::FlipLoss { logits, target, norm } => {
                let f = &before[logits.0].value.data;
                let scale = gout[0] / norm;
                if let Some(gl) = acc!(*logits) {
                    for ((g, &fv), &z) in gl.iter_mut().zip(f).zip(target) {
                        *g += scale * (sigmoid(fv) - (1.0 - z));
                    }
                }
            }
        }
    }

    /// Sums parameter gradients into `out[id]` for every `Param(id)` node.
    pub fn accumulate_param_grads(&self, out: &mut [Vec<f64>]) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = self.grads.get(i).and_then(|g| g.as_ref()) {
                    out[id].iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Tensor {
        Tensor::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `build` (which must end in a scalar) with
    /// respect to every entry of every input.
    fn grad_check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let root = build(&mut g, &vars);
        g.backward(root).unwrap();
        let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()])).collect();
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let r = build(&mut g, &vars);
            g.value(r).data[0]
        };
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, t) in inputs.iter().enumerate() {
            for e in 0..t.len() {
                let mut plus = inputs.clone();
                plus[k].data[e] += eps;
                let mut minus = inputs.clone();
                minus[k].data[e] -= eps;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic[k][e];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-5);
                worst = worst.max(rel);
            }
        }
        worst
    }

    /// Weighted sum with fixed pseudo-random weights to make a scalar.
    fn project(g: &mut Graph, v: Var) -> Var {
        let s = g.shape(v);
        let w = Tensor::from_fn(s, |b, i, j| 0.1 + ((b * 7 + i * 3 + j) % 5) as f64 * 0.3);
        let w = g.constant(w);
        let p = g.mul(v, w).unwrap();
        let n = g.value(p).len();
        let flat = g.reshape(p, [1, 1, n]).unwrap();
        let ones = g.constant(Tensor::filled([1, n, 1], 1.0));
        g.matmul(flat, ones).unwrap()
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new([1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let i = g.constant(Tensor::new([1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let ai = g.matmul(a, i).unwrap();
        assert_eq!(g.value(ai).data(), g.value(a).data());
        let at = g.matmul_t(a, b, true, true).unwrap();
        // Aᵀ·Bᵀ = (B·A)ᵀ; B·A = [[23,34],[31,46]]
        assert_eq!(g.value(at).data(), &[23.0, 31.0, 34.0, 46.0]);
        let bad = g.constant(Tensor::zeros([1, 3, 2]));
        assert!(matches!(g.matmul(a, bad), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, [1, 4, 3]);
        let b = rand_tensor(&mut rng, [1, 3, 5]);
        assert!(grad_check(vec![a, b], |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            project(g, c)
        }) < 1e-6);
        // Batched, broadcast and transposed forms.
        for (sa, sb, ta, tb) in [
            ([3, 4, 3], [1, 3, 2], false, false),
            ([1, 4, 3], [3, 3, 2], false, false),
            ([3, 3, 4], [3, 2, 3], true, true),
            ([2, 4, 3], [2, 5, 3], false, true),
            ([2, 3, 4], [1, 3, 2], true, false),
        ] {
            let a = rand_tensor(&mut rng, sa);
            let b = rand_tensor(&mut rng, sb);
            let err = grad_check(vec![a, b], |g, v| {
                let c = g.matmul_t(v[0], v[1], ta, tb).unwrap();
                project(g, c)
            });
            assert!(err < 1e-6, "{sa:?} {sb:?} {ta} {tb}: {err}");
        }
    }

    #[test]
    fn broadcast_add_mul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (sa, sb) in [([2, 3, 4], [1, 1, 4]), ([2, 3, 1], [1, 3, 4]), ([2, 3, 4], [2, 3, 4]), ([2, 3, 1], [1, 1, 4])] {
            let a = rand_tensor(&mut rng, sa);
            let b = rand_tensor(&mut rng, sb);
            let e1 = grad_check(vec![a.clone(), b.clone()], |g, v| {
                let c = g.add(v[0], v[1]).unwrap();
                project(g, c)
            });
            let e2 = grad_check(vec![a, b], |g, v| {
                let c = g.mul(v[0], v[1]).unwrap();
                project(g, c)
            });
            assert!(e1 < 1e-6 && e2 < 1e-6, "{sa:?} {sb:?} {e1} {e2}");
        }
    }

    #[test]
    fn softmax_uniform_and_sentinel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled([1, 1, 4], 0.7));
        let y = g.masked_softmax(x, Arc::new(MaskMatrix::unmasked(1, 4))).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
        let x = g.constant(Tensor::new([1, 1, 2], vec![3.0, 1e300]).unwrap());
        let m = MaskMatrix::from_fn(1, 2, |_, j| j == 0);
        let y = g.masked_softmax(x, Arc::new(m)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
        let none = MaskMatrix::from_fn(2, 2, |i, _| i == 0);
        let x = g.constant(Tensor::zeros([1, 2, 2]));
        assert_eq!(g.masked_softmax(x, Arc::new(none)), Err(TensorError::FullyMaskedRow(1)));
    }

    #[test]
    fn softmax_matches_deleted_column_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (r, c) = (rng.random_range(1..6), rng.random_range(1..8));
            let keep = rng.random_range(0..c);
            let open: Vec<bool> = (0..r * c).map(|e| e % c == keep || rng.random_bool(0.5)).collect();
            let mask = MaskMatrix::from_fn(r, c, |i, j| open[i * c + j]);
            let x = rand_tensor(&mut rng, [2, r, c]);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = g.masked_softmax(xv, Arc::new(mask.clone())).unwrap();
            for b in 0..2 {
                for i in 0..r {
                    let cols: Vec<usize> = (0..c).filter(|&j| mask.is_allowed(i, j)).collect();
                    let ex: Vec<f64> = cols.iter().map(|&j| x.get(b, i, j).exp()).collect();
                    let s: f64 = ex.iter().sum();
                    let mut dense = vec![0.0; c];
                    for (k, &j) in cols.iter().enumerate() {
                        dense[j] = ex[k] / s;
                    }
                    for j in 0..c {
                        assert!((g.value(y).get(b, i, j) - dense[j]).abs() < 1e-14);
                        if !mask.is_allowed(i, j) {
                            assert_eq!(g.value(y).get(b, i, j).to_bits(), 0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_gradient_and_masked_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mask = Arc::new(MaskMatrix::from_fn(3, 5, |i, j| (i + j) % 3 != 0));
        let x = rand_tensor(&mut rng, [2, 3, 5]);
        let m2 = mask.clone();
        let err = grad_check(vec![x.clone()], move |g, v| {
            let y = g.masked_softmax(v[0], m2.clone()).unwrap();
            project(g, y)
        });
        assert!(err < 1e-6, "{err}");
        let mut g = Graph::new();
        let xv = g.input(x);
        let y = g.masked_softmax(xv, mask.clone()).unwrap();
        let root = project(&mut g, y);
        g.backward(root).unwrap();
        let gx = g.grad(xv).unwrap();
        for (e, &v) in gx.iter().enumerate() {
            let (i, j) = ((e / 5) % 3, e % 5);
            if !mask.is_allowed(i, j) {
                assert_eq!(v.to_bits(), 0);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled([1, 2, 4], 3.0));
        let gain = g.constant(Tensor::filled([1, 1, 4], 2.0));
        let bias = g.constant(Tensor::new([1, 1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).row(0, 1), &[0.1, 0.2, 0.3, 0.4]);

        let row = [-1.0, 1.0, -1.0, 1.0];
        let x = g.constant(Tensor::new([1, 1, 4], row.to_vec()).unwrap());
        let one = g.constant(Tensor::filled([1, 1, 4], 1.0));
        let zero = g.constant(Tensor::zeros([1, 1, 4]));
        let y = g.layer_norm(x, one, zero).unwrap();
        for (a, b) in g.value(y).data().iter().zip(row) {
            assert!((a - b).abs() < 1e-5);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ins = vec![rand_tensor(&mut rng, [2, 3, 6]), rand_tensor(&mut rng, [1, 1, 6]), rand_tensor(&mut rng, [1, 1, 6])];
        let err = grad_check(ins, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            project(g, y)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn gelu_ffn_cases() {
        assert_eq!(gelu(0.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 4;
        // Zero input with zero biases gives zero output.
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 3, d]));
        let w1 = g.constant(rand_tensor(&mut rng, [1, d, 4 * d]));
        let w2 = g.constant(rand_tensor(&mut rng, [1, 4 * d, d]));
        let h = g.matmul(x, w1).unwrap();
        let h = g.gelu(h);
        let y = g.matmul(h, w2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let ins = vec![
            rand_tensor(&mut rng, [2, 3, d]),
            rand_tensor(&mut rng, [1, d, 2 * d]),
            rand_tensor(&mut rng, [1, 1, 2 * d]),
            rand_tensor(&mut rng, [1, 2 * d, d]),
            rand_tensor(&mut rng, [1, 1, d]),
        ];
        let err = grad_check(ins, |g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add(h, v[2]).unwrap();
            let h = g.gelu(h);
            let y = g.matmul(h, v[3]).unwrap();
            let y = g.add(y, v[4]).unwrap();
            project(g, y)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn layout_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ins = vec![rand_tensor(&mut rng, [2, 3, 4]), rand_tensor(&mut rng, [2, 2, 4])];
        let err = grad_check(ins, |g, v| {
            let c = g.concat_rows(v[0], v[1]).unwrap();
            let s = g.split_heads(c, 2).unwrap();
            let s = g.scale(s, 1.5);
            let m = g.merge_heads(s, 2).unwrap();
            let sq = g.mul(m, m).unwrap();
            project(g, sq)
        });
        assert!(err < 1e-6, "{err}");
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, [2, 3, 6]));
        let s = g.split_heads(x, 3).unwrap();
        assert_eq!(g.shape(s), [6, 3, 2]);
        let m = g.merge_heads(s, 3).unwrap();
        assert_eq!(g.value(m), g.value(x));
    }

    #[test]
    fn flip_loss_values_and_gradient() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::filled([1, 1, 3], 50.0));
        let l = g.flip_loss(f, &[0, 0, 0], 1.0).unwrap();
        assert!(g.value(l).data()[0] < 1e-20);
        let f = g.constant(Tensor::new([1, 1, 3], vec![800.0, 0.0, 800.0]).unwrap());
        let l = g.flip_loss(f, &[0, 1, 0], 1.0).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, [2, 1, 5]);
        let target = [1u8, 0, 0, 1, 1, 0, 1, 0, 0, 0];
        let err = grad_check(vec![x], move |g, v| g.flip_loss(v[0], &target, 2.0).unwrap());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled([1, 1, 1], 2.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
        assert_eq!(g.backward(y), Err(TensorError::BackwardTwice));
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 1, 2]));
        assert_eq!(g.backward(x), Err(TensorError::NotScalar([1, 1, 2])));
    }

    #[test]
    fn param_grads_accumulate_by_id() {
        let mut g = Graph::new();
        let w = Tensor::filled([1, 1, 1], 3.0);
        let a = g.param(0, &w);
        let b = g.param(0, &w);
        let y = g.mul(a, b).unwrap();
        g.backward(y).unwrap();
        let mut out = vec![vec![0.0]];
        g.accumulate_param_grads(&mut out);
        assert_eq!(out[0], vec![6.0]);
    }
}
