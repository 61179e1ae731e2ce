use super::{gemm, MatView, NumericsError, ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum HeadLayout {
    /// `[L, heads * dh]`, head `j` occupies columns `j*dh..(j+1)*dh`.
    Packed,
    /// `[heads, L, dh]`.
    Split,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Scale { a: Var, s: F },
    Gelu { a: Var, tanh: Vec<F> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: usize, layout: HeadLayout, probs: Vec<F> },
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Reshape { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Mse { a: Var, b: Var },
}

enum Value<F: Scalar> {
    Owned(Tensor<F>),
    Param(ParamId),
}

struct Node<F: Scalar> {
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Tape of primitive applications for one forward pass.
///
/// Nodes are appended in execution order, which is a valid topological
/// order; `backward` visits them once in reverse.
pub struct Graph<'p, F: Scalar> {
    params: &'p ParamStore<F>,
    param_nodes: Vec<Option<Var>>,
    nodes: Vec<Node<F>>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[cfg(test)]
pub(crate) fn gelu_scalar<F: Scalar>(x: F) -> F {
    F::lit(0.5) * x * (F::one() + gelu_tanh(x))
}

fn gelu_tanh<F: Scalar>(x: F) -> F {
    let u = F::lit(SQRT_2_OVER_PI) * (x + F::lit(GELU_C) * x * x * x);
    // tanh via a single exp, sign restored afterwards
    let e = (F::lit(-2.0) * u.abs()).exp();
    let t = (F::one() - e) / (F::one() + e);
    if u < F::zero() {
        -t
    } else {
        t
    }
}

fn gelu_grad<F: Scalar>(x: F, t: F) -> F {
    let c = F::lit(SQRT_2_OVER_PI);
    let half = F::lit(0.5);
    let du = c * (F::one() + F::lit(3.0 * GELU_C) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

fn check_finite<F: Scalar>(op: &'static str, data: &[F]) -> Result<(), NumericsError> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

/// View of head `head` of segment `seg`; segments only exist for `Packed`.
fn head_view(layout: HeadLayout, heads: usize, seg: usize, head: usize, len: usize, dh: usize) -> MatView {
    match layout {
        HeadLayout::Packed => MatView { offset: (seg * len * heads + head) * dh, rows: len, cols: dh, rs: heads * dh, cs: 1 },
        HeadLayout::Split => MatView::dense(head * len * dh, len, dh),
    }
}

/// `buf += src`, allocating `buf` when absent.
fn accumulate<F: Scalar>(slot: &mut Option<Vec<F>>, src: &[F]) {
    match slot {
        Some(buf) => {
            for (a, b) in buf.iter_mut().zip(src) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(src.to_vec()),
    }
}

/// Like [`accumulate`] but takes ownership, avoiding a copy for the first contribution.
fn accumulate_owned<F: Scalar>(slot: &mut Option<Vec<F>>, src: Vec<F>) {
    match slot {
        Some(buf) => {
            for (a, b) in buf.iter_mut().zip(&src) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(src),
    }
}

fn grad_buf<F: Scalar>(slot: &mut Option<Vec<F>>, len: usize) -> &mut Vec<F> {
    slot.get_or_insert_with(|| vec![F::zero(); len])
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Graph { params, param_nodes: vec![None; params.len()], nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var, NumericsError> {
        check_finite(name, value.data())?;
        Ok(self.push(value, op, needs_grad))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Node for a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let needs = self.params.get(id).requires_grad;
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param, needs_grad: needs });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(
            F::one(),
            self.value(a).data(),
            MatView::dense(0, m, k),
            self.value(b).data(),
            MatView::dense(0, k, n),
            F::zero(),
            &mut out,
            MatView::dense(0, m, n),
        );
        let needs = self.needs(a) || self.needs(b);
        self.push_checked("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, needs)
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push_checked("add", t, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push_checked("sub", t, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push_checked("mul", t, Op::Mul { a, b }, needs)
    }

    /// Adds a length-`d` vector to every row of `a[.., d]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let d = ta.last_dim();
        if tr.len() != d {
            return Err(mismatch("add_row", ta.shape(), tr.shape()));
        }
        let r = tr.data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x + r[i % d]).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(row);
        self.push_checked("add_row", t, Op::AddRow { a, row }, needs)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var, NumericsError> {
        let t = self.value(a).map(|x| x * s);
        let needs = self.needs(a);
        self.push_checked("scale", t, Op::Scale { a, s }, needs)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let tanh: Vec<F> = ta.data().iter().map(|&x| gelu_tanh(x)).collect();
        let data = ta.data().iter().zip(&tanh).map(|(&x, &t)| F::lit(0.5) * x * (F::one() + t)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        let tanh = if needs { tanh } else { Vec::new() };
        self.push_checked("gelu", t, Op::Gelu { a, tanh }, needs)
    }

    /// Row-wise layer normalization over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var, NumericsError> {
        if !(eps > F::zero()) {
            return Err(NumericsError::Invalid { op: "layer_norm", msg: "eps must be positive".into() });
        }
        let tx = self.value(x);
        let d = tx.last_dim();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != d || tb.len() != d {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.outer_len();
        let df = F::from_usize(d).unwrap();
        let mut xhat = vec![F::zero(); rows * d];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * d];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * tg.data()[i] + tb.data()[i];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push_checked("layer_norm", t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let shape = ta.shape();
        if axis >= shape.len() {
            return Err(NumericsError::Invalid { op: "softmax", msg: format!("axis {axis} out of range for {shape:?}") });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = ta.data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..len {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut z = F::zero();
                for j in 0..len {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    z = z + e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / z;
                }
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        let needs = self.needs(a);
        self.push_checked("softmax", t, Op::Softmax { a, outer, len, inner }, needs)
    }

    /// Scaled dot-product attention on `[h, L, dh]` tensors, no causal mask.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, NumericsError> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || sk != sv {
            return Err(mismatch("attention", sq, sk));
        }
        let heads = sq[0];
        self.attention_impl(q, k, v, heads, 1, HeadLayout::Split)
    }

    /// Multi-head attention where `q[Lq, d]`, `k, v[Lk, d]` pack `heads`
    /// heads of width `d / heads` side by side.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NumericsError> {
        self.segmented_attention(q, k, v, heads, 1)
    }

    /// [`Graph::multi_head_attention`] over `segments` independent sequences
    /// stacked along the rows: segment `s` of `q` attends only to segment `s`
    /// of `k, v`.
    pub fn segmented_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: usize) -> Result<Var, NumericsError> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] || sk != sv || heads == 0 || sq[1] % heads != 0 {
            return Err(mismatch("multi_head_attention", sq, sk));
        }
        if segments == 0 || sq[0] % segments != 0 || sk[0] % segments != 0 {
            return Err(NumericsError::Invalid {
                op: "multi_head_attention",
                msg: format!("{} query and {} key rows do not split into {segments} segments", sq[0], sk[0]),
            });
        }
        self.attention_impl(q, k, v, heads, segments, HeadLayout::Packed)
    }

    fn attention_impl(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: usize, layout: HeadLayout) -> Result<Var, NumericsError> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        let (lq, lk, dh) = match layout {
            HeadLayout::Split => (sq[1], sk[1], sq[2]),
            HeadLayout::Packed => (sq[0] / segments, sk[0] / segments, sq[1] / heads),
        };
        if lk == 0 {
            return Err(NumericsError::Invalid { op: "attention", msg: "empty key sequence".into() });
        }
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![F::zero(); segments * heads * lq * lk];
        let mut out = vec![F::zero(); tq.len()];
        for (s, h) in (0..segments).flat_map(|s| (0..heads).map(move |h| (s, h))) {
            let qv = head_view(layout, heads, s, h, lq, dh);
            let kv = head_view(layout, heads, s, h, lk, dh);
            let base = (s * heads + h) * lq * lk;
            let pv = MatView::dense(base, lq, lk);
            gemm(scale, tq, qv, tk, kv.t(), F::zero(), &mut probs, pv);
            for r in 0..lq {
                let row = &mut probs[base + r * lk..base + (r + 1) * lk];
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    z = z + *x;
                }
                for x in row.iter_mut() {
                    *x = *x / z;
                }
            }
            gemm(F::one(), &probs, pv, tv, kv, F::zero(), &mut out, qv);
        }
        let t = Tensor::new(sq, out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push_checked("attention", t, Op::Attention { q, k, v, heads, segments, layout, probs }, needs)
    }

    /// Post-softmax attention weights `[segments * heads, Lq, Lk]` saved by an
    /// attention node, with `Lq, Lk` the per-segment lengths.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<F>> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, heads, segments, .. } => {
                let lq = match self.nodes[v.0].value {
                    Value::Owned(ref t) => match t.rank() {
                        3 => t.shape()[1],
                        _ => t.shape()[0] / segments,
                    },
                    Value::Param(_) => return None,
                };
                let blocks = heads * segments;
                let lk = probs.len() / (blocks * lq).max(1);
                Tensor::new(vec![blocks, lq, lk], probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Selects rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(NumericsError::Invalid { op: "gather_rows", msg: format!("expected 2-D input, got {:?}", ta.shape()) });
        }
        let rows = ta.shape()[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::Invalid { op: "gather_rows", msg: format!("row {bad} out of range for {rows} rows") });
        }
        let t = ta.gather_rows(idx);
        let needs = self.needs(a);
        self.push_checked("gather_rows", t, Op::GatherRows { a, idx: idx.to_vec() }, needs)
    }

    /// Stacks 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Invalid { op: "concat_rows", msg: "no inputs".into() })?;
        let cols = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[1] != cols {
                return Err(mismatch("concat_rows", self.shape(*first), t.shape()));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::Reshape { a }, needs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push_checked("sum", t, Op::Sum { a }, needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let n = ta.len().max(1);
        let t = Tensor::scalar(ta.sum() / F::from_usize(n).unwrap());
        let needs = self.needs(a);
        self.push_checked("mean", t, Op::Mean { a }, needs)
    }

    /// Mean squared difference over all elements; an empty pair yields 0.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mse", ta.shape(), tb.shape()));
        }
        let n = ta.len();
        let s: F = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let v = if n == 0 { F::zero() } else { s / F::from_usize(n).unwrap() };
        let needs = self.needs(a) || self.needs(b);
        self.push_checked("mse", Tensor::scalar(v), Op::Mse { a, b }, needs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, NumericsError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NumericsError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut kept: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => {
                    kept[i] = Some(Tensor::new(self.value(Var(i)).shape().to_vec(), g)?);
                }
                Op::MatMul { a, b } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let gv = MatView::dense(0, m, n);
                    if self.needs(*a) {
                        let buf = grad_buf(&mut grads[a.0], m * k);
                        gemm(F::one(), &g, gv, self.value(*b).data(), MatView::dense(0, k, n).t(), F::one(), buf, MatView::dense(0, m, k));
                    }
                    if self.needs(*b) {
                        let buf = grad_buf(&mut grads[b.0], k * n);
                        gemm(F::one(), self.value(*a).data(), MatView::dense(0, m, k).t(), &g, gv, F::one(), buf, MatView::dense(0, k, n));
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], &g);
                    }
                    if self.needs(*b) {
                        accumulate_owned(&mut grads[b.0], g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], &g);
                    }
                    if self.needs(*b) {
                        let neg: Vec<F> = g.iter().map(|&x| -x).collect();
                        accumulate_owned(&mut grads[b.0], neg);
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(*a) {
                        let c: Vec<F> = g.iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                        accumulate_owned(&mut grads[a.0], c);
                    }
                    if self.needs(*b) {
                        let c: Vec<F> = g.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                        accumulate_owned(&mut grads[b.0], c);
                    }
                }
                Op::AddRow { a, row } => {
                    if self.needs(*row) {
                        let d = self.value(*row).len();
                        let mut c = vec![F::zero(); d];
                        for chunk in g.chunks_exact(d) {
                            for (s, &x) in c.iter_mut().zip(chunk) {
                                *s = *s + x;
                            }
                        }
                        accumulate_owned(&mut grads[row.0], c);
                    }
                    if self.needs(*a) {
                        accumulate_owned(&mut grads[a.0], g);
                    }
                }
                Op::Scale { a, s } => {
                    let c: Vec<F> = g.iter().map(|&x| x * *s).collect();
                    accumulate_owned(&mut grads[a.0], c);
                }
                Op::Gelu { a, tanh } => {
                    let c: Vec<F> =
                        g.iter().zip(self.value(*a).data()).zip(tanh).map(|((&gy, &x), &t)| gy * gelu_grad(x, t)).collect();
                    accumulate_owned(&mut grads[a.0], c);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let d = self.value(*gamma).len();
                    let rows = rstd.len();
                    let gam = self.value(*gamma).data();
                    let df = F::from_usize(d).unwrap();
                    if self.needs(*x) {
                        let mut dx = vec![F::zero(); rows * d];
                        for r in 0..rows {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let mut m1 = F::zero();
                            let mut m2 = F::zero();
                            for j in 0..d {
                                let dh = gr[j] * gam[j];
                                m1 = m1 + dh;
                                m2 = m2 + dh * hr[j];
                            }
                            m1 = m1 / df;
                            m2 = m2 / df;
                            for j in 0..d {
                                dx[r * d + j] = rstd[r] * (gr[j] * gam[j] - m1 - hr[j] * m2);
                            }
                        }
                        accumulate_owned(&mut grads[x.0], dx);
                    }
                    if self.needs(*gamma) {
                        let mut dg = vec![F::zero(); d];
                        for (i, (&gy, &h)) in g.iter().zip(xhat).enumerate() {
                            dg[i % d] = dg[i % d] + gy * h;
                        }
                        accumulate_owned(&mut grads[gamma.0], dg);
                    }
                    if self.needs(*beta) {
                        let mut db = vec![F::zero(); d];
                        for (i, &gy) in g.iter().enumerate() {
                            db[i % d] = db[i % d] + gy;
                        }
                        accumulate_owned(&mut grads[beta.0], db);
                    }
                }
                Op::Softmax { a, outer, len, inner } => {
                    let y = self.value(Var(i)).data();
                    let mut dx = vec![F::zero(); y.len()];
                    for o in 0..*outer {
                        for c in 0..*inner {
                            let base = o * len * inner + c;
                            let mut dot = F::zero();
                            for j in 0..*len {
                                dot = dot + g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..*len {
                                let idx = base + j * inner;
                                dx[idx] = y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    accumulate_owned(&mut grads[a.0], dx);
                }
                Op::Attention { q, k, v, heads, segments, layout, probs } => {
                    self.attention_backward(&g, *q, *k, *v, (*heads, *segments), *layout, probs, &mut grads);
                }
                Op::GatherRows { a, idx } => {
                    let ta = self.value(*a);
                    let d = ta.last_dim();
                    let buf = grad_buf(&mut grads[a.0], ta.len());
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..d {
                            buf[src * d + j] = buf[src * d + j] + g[r * d + j];
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        if self.needs(*p) {
                            accumulate(&mut grads[p.0], &g[off..off + n]);
                        }
                        off += n;
                    }
                }
                Op::Reshape { a } => accumulate_owned(&mut grads[a.0], g),
                Op::Sum { a } => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads[a.0], &vec![g[0]; n]);
                }
                Op::Mean { a } => {
                    let n = self.value(*a).len();
                    let s = g[0] / F::from_usize(n.max(1)).unwrap();
                    accumulate(&mut grads[a.0], &vec![s; n]);
                }
                Op::Mse { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let n = ta.len();
                    if n > 0 {
                        let s = F::lit(2.0) * g[0] / F::from_usize(n).unwrap();
                        let diff: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| s * (x - y)).collect();
                        if self.needs(*b) {
                            let neg: Vec<F> = diff.iter().map(|&x| -x).collect();
                            accumulate_owned(&mut grads[b.0], neg);
                        }
                        if self.needs(*a) {
                            accumulate_owned(&mut grads[a.0], diff);
                        }
                    }
                }
            }
        }

        for t in kept.iter().flatten() {
            check_finite("backward", t.data())?;
        }
        let params = self
            .param_nodes
            .iter()
            .enumerate()
            .filter_map(|(pid, v)| v.map(|v| (ParamId(pid), v)))
            .collect();
        Ok(Gradients { grads: kept, params })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[F],
        q: Var,
        k: Var,
        v: Var,
        (heads, segments): (usize, usize),
        layout: HeadLayout,
        probs: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (lq, lk, dh) = match layout {
            HeadLayout::Split => (tq.shape()[1], tk.shape()[1], tq.shape()[2]),
            HeadLayout::Packed => (tq.shape()[0] / segments, tk.shape()[0] / segments, tq.shape()[1] / heads),
        };
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut dq = vec![F::zero(); tq.len()];
        let mut dk = vec![F::zero(); tk.len()];
        let mut dv = vec![F::zero(); tv.len()];
        let mut dp = vec![F::zero(); lq * lk];
        for (s, h) in (0..segments).flat_map(|s| (0..heads).map(move |h| (s, h))) {
            let qv = head_view(layout, heads, s, h, lq, dh);
            let kv = head_view(layout, heads, s, h, lk, dh);
            let base = (s * heads + h) * lq * lk;
            let pv = MatView::dense(base, lq, lk);
            let local = MatView::dense(0, lq, lk);
            // dV = Pᵀ·dO, dP = dO·Vᵀ
            gemm(F::one(), probs, pv.t(), g, qv, F::zero(), &mut dv, kv);
            gemm(F::one(), g, qv, tv.data(), kv.t(), F::zero(), &mut dp, local);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
            for r in 0..lq {
                let p = &probs[base + r * lk..base + (r + 1) * lk];
                let row = &mut dp[r * lk..(r + 1) * lk];
                let dot: F = row.iter().zip(p).map(|(&a, &b)| a * b).sum();
                for (x, &pj) in row.iter_mut().zip(p) {
                    *x = pj * (*x - dot) * scale;
                }
            }
            gemm(F::one(), &dp, local, tk.data(), kv, F::zero(), &mut dq, qv);
            gemm(F::one(), &dp, local.t(), tq.data(), qv, F::zero(), &mut dk, kv);
        }
        if self.needs(q) {
            accumulate_owned(&mut grads[q.0], dq);
        }
        if self.needs(k) {
            accumulate_owned(&mut grads[k.0], dk);
        }
        if self.needs(v) {
            accumulate_owned(&mut grads[v.0], dv);
        }
    }
}

/// Gradients of leaves and parameters produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a leaf created with [`Graph::variable`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.wrt(*v))
    }

    /// Parameter gradients in ascending parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.params.iter().filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }

    /// Adds every parameter gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) {
        for (id, g) in self.params() {
            store.accumulate_grad(id, g);
        }
    }
}
