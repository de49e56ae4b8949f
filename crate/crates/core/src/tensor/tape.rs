use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Element, ParamId, ParamStore, Tensor};
use crate::error::{contract, shape_err, EsaError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Allowed (query, key) pairs for fused attention, stored per query row in
/// compressed-row form. Row `b * lq + i` lists the keys of batch entry `b`
/// that query `i` may attend to, in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnPattern {
    batch: usize,
    lq: usize,
    lk: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
}

impl AttnPattern {
    /// Builds from per-row allowed key lists (`batch * lq` rows).
    pub fn from_rows(batch: usize, lq: usize, lk: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        if rows.len() != batch * lq {
            return contract(format!(
                "attention pattern expects {} rows, got {}",
                batch * lq,
                rows.len()
            ));
        }
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            if r.last().is_some_and(|&j| j as usize >= lk) {
                return contract("attention pattern column out of range");
            }
            cols.extend_from_slice(&r);
            row_ptr.push(cols.len());
        }
        Ok(Self {
            batch,
            lq,
            lk,
            row_ptr,
            cols,
        })
    }

    /// Every query may attend to the first `valid_keys[b]` keys of its batch entry.
    pub fn prefix(batch: usize, lq: usize, lk: usize, valid_keys: &[usize]) -> Self {
        assert_eq!(valid_keys.len(), batch);
        let mut row_ptr = Vec::with_capacity(batch * lq + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for &n in valid_keys {
            let n = n.min(lk);
            for _ in 0..lq {
                cols.extend(0..n as u32);
                row_ptr.push(cols.len());
            }
        }
        Self {
            batch,
            lq,
            lk,
            row_ptr,
            cols,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn lq(&self) -> usize {
        self.lq
    }
    pub fn lk(&self) -> usize {
        self.lk
    }
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Allowed keys of query `i` in batch entry `b`.
    pub fn row(&self, b: usize, i: usize) -> &[u32] {
        let r = b * self.lq + i;
        &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    /// Offset of the first entry of query `i` in batch entry `b`.
    pub fn row_offset(&self, b: usize, i: usize) -> usize {
        self.row_ptr[b * self.lq + i]
    }

    pub fn is_allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.row(b, i).binary_search(&(j as u32)).is_ok()
    }

    /// Dense additive form `[batch, lq, lk]`: 0 where allowed, `floor` elsewhere.
    pub fn to_additive<T: Element>(&self, floor: T) -> Tensor<T> {
        let mut t = Tensor::full(vec![self.batch, self.lq, self.lk], floor);
        let d = t.data_mut();
        for b in 0..self.batch {
            for i in 0..self.lq {
                for &j in self.row(b, i) {
                    d[(b * self.lq + i) * self.lk + j as usize] = T::zero();
                }
            }
        }
        t
    }
}

enum Op<T> {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    MatMul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    SliceLast { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    Gelu(Var),
    Silu(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pattern: Rc<AttnPattern>,
        probs: Vec<T>,
    },
    GatherRows { x: Var, rows: Vec<usize> },
    ExpandBatch(Var),
    Mse { pred: Var, target: Tensor<T> },
    Mae { pred: Var, target: Tensor<T> },
    BceLogits { logits: Var, target: Tensor<T> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records one forward pass. Build a fresh tape per pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
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

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Elementwise sum. `b` may also match a trailing suffix of `a`'s shape,
    /// in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return shape_err("add", sa, sb);
        }
        let bd = self.value(b).data();
        let m = bd.len().max(1);
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % m])
            .collect();
        let t = Tensor::new(sa.to_vec(), out)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("sub", sa, sb);
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("mul", sa, sb);
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    /// Elementwise product with a constant tensor (dropout masks, fixed weights).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return shape_err("mul_const", self.shape(a), c.shape());
        }
        let out = zip_map(self.value(a), &c, |x, y| x * y);
        let g = self.needs(a);
        Ok(self.push(out, Op::MulConst(a, c), g))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let g = self.needs(a);
        self.push(out, Op::Scale(a, c), g)
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]`. The right operand may
    /// also be a plain `[k, n]` matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb).ok_or(EsaError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let MatDims {
            batch,
            m,
            k,
            n,
            shared_rhs,
        } = dims;
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let boff = if shared_rhs { 0 } else { bi * k * n };
            gemm_nn(
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[boff..boff + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let t = Tensor::new(shape, out)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul(a, b), g))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return shape_err("transpose_last2", &s, &[]);
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_blocks(self.value(a).data(), m, n);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let g = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::TransposeLast2(a), g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?;
        let g = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), g))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap_or(&0);
        if start + len > d {
            return shape_err("slice_last", &s, &[start, len]);
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(src.rows() * len);
        for r in 0..src.rows() {
            out.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let g = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceLast { x: a, start }, g))
    }

    /// Concatenates along the last axis, in argument order.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat_last of zero tensors");
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.is_empty() || sp[..sp.len() - 1] != lead[..] {
                return shape_err("concat_last", self.shape(first), sp);
            }
            total += sp[sp.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatLast(parts.to_vec()), g))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        let g = self.needs(a);
        self.push(out, Op::Gelu(a), g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::silu);
        let g = self.needs(a);
        self.push(out, Op::Silu(a), g)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (t, _) = self.reduce_axis(a, axis, "sum_axis")?;
        let g = self.needs(a);
        Ok(self.push(t, Op::SumAxis { x: a, axis }, g))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (mut t, ext) = self.reduce_axis(a, axis, "mean_axis")?;
        let inv = T::one() / T::of(ext.max(1) as f64);
        t.data_mut().iter_mut().for_each(|x| *x *= inv);
        let g = self.needs(a);
        Ok(self.push(t, Op::MeanAxis { x: a, axis }, g))
    }

    fn reduce_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<(Tensor<T>, usize)> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return shape_err(op, &s, &[axis]);
        }
        let (pre, ext, post) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); pre * post];
        for p in 0..pre {
            for e in 0..ext {
                let base = (p * ext + e) * post;
                for q in 0..post {
                    out[p * post + q] += src[base + q];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        Ok((Tensor::new(shape, out)?, ext))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let g = self.needs(a);
        self.push(t, Op::SumAll(a), g)
    }

    /// Softmax over the last axis. Rows at the masking floor become zeros.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let d = src.last_dim();
        if src.rank() == 0 || d == 0 {
            return shape_err("softmax_lastdim", src.shape(), &[]);
        }
        let mut out = vec![T::zero(); src.numel()];
        for r in 0..src.rows() {
            kernels::softmax_row(src.row(r), &mut out[r * d..(r + 1) * d]);
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let g = self.needs(a);
        Ok(self.push(t, Op::Softmax(a), g))
    }

    /// Per-row normalisation over the last axis followed by `scale`/`shift`.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(scale) != [d] || self.shape(shift) != [d] {
            return shape_err("layer_norm", self.shape(x), self.shape(scale));
        }
        let src = self.value(x);
        let rows = src.rows();
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut out = vec![T::zero(); src.numel()];
        let mut xhat = vec![T::zero(); src.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let n = T::of(d as f64);
        let eps = T::of(eps);
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let xh = (row[c] - mean) * inv;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * sc[c] + sh[c];
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let g = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// Fused multi-head attention over a sparse allowed-pair pattern.
    ///
    /// `q` is `[B, Lq, H·dk]`, `k` and `v` are `[B, Lk, H·dk]`; head `h` uses
    /// columns `h·dk..(h+1)·dk`. Each head computes
    /// `softmax(q kᵀ / √dk + M) v` where `M` is 0 on allowed pairs and the
    /// masking floor elsewhere; blocked pairs contribute exactly zero, so only
    /// allowed pairs are visited. Queries with no allowed key output zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pattern: Rc<AttnPattern>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return shape_err("attention", &sq, &sk);
        }
        let (b, lq, lk, dm) = (sq[0], sq[1], sk[1], sq[2]);
        if heads == 0 || dm % heads != 0 {
            return contract(format!("attention width {dm} not divisible by {heads} heads"));
        }
        if pattern.batch() != b || pattern.lq() != lq || pattern.lk() != lk {
            return shape_err(
                "attention pattern",
                &sq,
                &[pattern.batch(), pattern.lq(), pattern.lk()],
            );
        }
        let dk = dm / heads;
        let scale = T::one() / T::of(dk as f64).sqrt();
        let nnz = pattern.nnz();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); b * lq * dm];
        let mut probs = vec![T::zero(); heads * nnz];
        let mut scores: Vec<T> = Vec::new();
        for bi in 0..b {
            for i in 0..lq {
                let cols = pattern.row(bi, i);
                if cols.is_empty() {
                    continue;
                }
                let off = pattern.row_offset(bi, i);
                let qrow = &qd[(bi * lq + i) * dm..(bi * lq + i + 1) * dm];
                for h in 0..heads {
                    let hs = h * dk..(h + 1) * dk;
                    scores.clear();
                    for &j in cols {
                        let krow = &kd[(bi * lk + j as usize) * dm..][hs.clone()];
                        scores.push(dot(&qrow[hs.clone()], krow) * scale);
                    }
                    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let orow = &mut out[(bi * lq + i) * dm..][hs.clone()];
                    for (e, &j) in cols.iter().enumerate() {
                        let p = scores[e] / sum;
                        probs[h * nnz + off + e] = p;
                        let vrow = &vd[(bi * lk + j as usize) * dm..][hs.clone()];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, lq, dm], out)?;
        let g = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                pattern,
                probs,
            },
            g,
        ))
    }

    /// Post-softmax weights of an attention node, laid out `[head][entry]`
    /// over the pattern's allowed pairs.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttnPattern, usize, &[T])> {
        match &self.nodes[v.0].op {
            Op::Attention {
                pattern,
                heads,
                probs,
                ..
            } => Some((pattern, *heads, probs)),
            _ => None,
        }
    }

    /// Selects rows of the `[rows, d]` view of `x`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let d = src.last_dim();
        let n = src.rows();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return shape_err("gather_rows", src.shape(), &[r]);
            }
            out.extend_from_slice(src.row(r));
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        let g = self.needs(x);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            g,
        ))
    }

    /// Repeats `x` along a new leading axis of length `batch`.
    pub fn expand_batch(&mut self, x: Var, batch: usize) -> Var {
        let src = self.value(x);
        let mut out = Vec::with_capacity(src.numel() * batch);
        for _ in 0..batch {
            out.extend_from_slice(src.data());
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(src.shape());
        let t = Tensor::new(shape, out).expect("expand shape");
        let g = self.needs(x);
        self.push(t, Op::ExpandBatch(x), g)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.numel() == 0 {
            return shape_err("mse", p.shape(), target.shape());
        }
        let n = T::of(p.numel() as f64);
        let s: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let g = self.needs(pred);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { pred, target }, g))
    }

    /// Mean absolute error against a constant target.
    pub fn mae(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.numel() == 0 {
            return shape_err("mae", p.shape(), target.shape());
        }
        let n = T::of(p.numel() as f64);
        let s: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        let g = self.needs(pred);
        Ok(self.push(Tensor::scalar(s / n), Op::Mae { pred, target }, g))
    }

    /// Mean binary cross-entropy on logits; targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Tensor<T>) -> Result<Var> {
        let p = self.value(logits);
        if p.shape() != target.shape() || p.numel() == 0 {
            return shape_err("bce_with_logits", p.shape(), target.shape());
        }
        if target
            .data()
            .iter()
            .any(|&y| !(y >= T::zero() && y <= T::one()))
        {
            return contract("binary target outside [0, 1]");
        }
        let n = T::of(p.numel() as f64);
        let s: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        let g = self.needs(logits);
        Ok(self.push(Tensor::scalar(s / n), Op::BceLogits { logits, target }, g))
    }

    /// Mean softmax cross-entropy of `[n, C]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let p = self.value(logits);
        if p.rank() != 2 || p.shape()[0] != labels.len() || labels.is_empty() {
            return shape_err("softmax_cross_entropy", p.shape(), &[labels.len()]);
        }
        let c = p.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return contract(format!("label {bad} out of range for {c} classes"));
        }
        let mut probs = vec![T::zero(); p.numel()];
        let mut total = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            let row = p.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += lse - row[l];
            for (j, &x) in row.iter().enumerate() {
                probs[r * c + j] = (x - lse).exp();
            }
        }
        let n = T::of(labels.len() as f64);
        let g = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let param_vars = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, param_vars })
    }

    fn backprop_node(&self, idx: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gyd = gy.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || gy.clone());
                self.acc(grads, *b, || {
                    let sb = self.shape(*b);
                    let m = sb.iter().product::<usize>().max(1);
                    let mut out = vec![T::zero(); m];
                    for (i, &g) in gyd.iter().enumerate() {
                        out[i % m] += g;
                    }
                    Tensor::new(sb.to_vec(), out).expect("add grad")
                });
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || gy.clone());
                self.acc(grads, *b, || gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, || zip_map(gy, self.value(*b), |g, y| g * y));
                self.acc(grads, *b, || zip_map(gy, self.value(*a), |g, x| g * x));
            }
            Op::MulConst(a, c) => self.acc(grads, *a, || zip_map(gy, c, |g, y| g * y)),
            Op::Scale(a, c) => self.acc(grads, *a, || gy.map(|g| g * *c)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let d = matmul_dims(sa, sb).expect("matmul dims");
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, || {
                    let mut out = vec![T::zero(); d.batch * d.m * d.k];
                    for bi in 0..d.batch {
                        let boff = if d.shared_rhs { 0 } else { bi * d.k * d.n };
                        gemm_nt(
                            &gyd[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                            &bd[boff..boff + d.k * d.n],
                            &mut out[bi * d.m * d.k..(bi + 1) * d.m * d.k],
                            d.m,
                            d.n,
                            d.k,
                        );
                    }
                    Tensor::new(sa.to_vec(), out).expect("matmul grad a")
                });
                self.acc(grads, *b, || {
                    let mut out = vec![T::zero(); bd.len()];
                    for bi in 0..d.batch {
                        let boff = if d.shared_rhs { 0 } else { bi * d.k * d.n };
                        gemm_tn(
                            &ad[bi * d.m * d.k..(bi + 1) * d.m * d.k],
                            &gyd[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                            &mut out[boff..boff + d.k * d.n],
                            d.m,
                            d.k,
                            d.n,
                        );
                    }
                    Tensor::new(sb.to_vec(), out).expect("matmul grad b")
                });
            }
            Op::TransposeLast2(a) => self.acc(grads, *a, || {
                let s = node.value.shape();
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                Tensor::new(self.shape(*a).to_vec(), transpose_blocks(gyd, m, n))
                    .expect("transpose grad")
            }),
            Op::Reshape(a) => self.acc(grads, *a, || {
                Tensor::new(self.shape(*a).to_vec(), gyd.to_vec()).expect("reshape grad")
            }),
            Op::SliceLast { x, start } => self.acc(grads, *x, || {
                let src = self.value(*x);
                let (d, len) = (src.last_dim(), node.value.last_dim());
                let mut out = vec![T::zero(); src.numel()];
                for r in 0..src.rows() {
                    out[r * d + start..r * d + start + len]
                        .copy_from_slice(&gyd[r * len..(r + 1) * len]);
                }
                Tensor::new(src.shape().to_vec(), out).expect("slice grad")
            }),
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let src = self.value(p);
                    let d = src.last_dim();
                    self.acc(grads, p, || {
                        let mut out = Vec::with_capacity(src.numel());
                        for r in 0..src.rows() {
                            out.extend_from_slice(&gyd[r * total + offset..r * total + offset + d]);
                        }
                        Tensor::new(src.shape().to_vec(), out).expect("concat grad")
                    });
                    offset += d;
                }
            }
            Op::Gelu(a) => self.acc(grads, *a, || {
                zip_map(gy, self.value(*a), |g, x| g * kernels::gelu_grad(x))
            }),
            Op::Silu(a) => self.acc(grads, *a, || {
                zip_map(gy, self.value(*a), |g, x| g * kernels::silu_grad(x))
            }),
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let s = self.shape(*x).to_vec();
                let (pre, ext, post) = split_axis(&s, *axis);
                let f = if matches!(node.op, Op::MeanAxis { .. }) {
                    T::one() / T::of(ext.max(1) as f64)
                } else {
                    T::one()
                };
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); pre * ext * post];
                    for p in 0..pre {
                        for e in 0..ext {
                            for q in 0..post {
                                out[(p * ext + e) * post + q] = gyd[p * post + q] * f;
                            }
                        }
                    }
                    Tensor::new(s.clone(), out).expect("reduce grad")
                });
            }
            Op::SumAll(a) => {
                let g = gyd[0];
                self.acc(grads, *a, || Tensor::full(self.shape(*a).to_vec(), g));
            }
            Op::Softmax(a) => self.acc(grads, *a, || {
                let p = &node.value;
                let d = p.last_dim();
                let mut out = vec![T::zero(); p.numel()];
                for r in 0..p.rows() {
                    let pr = p.row(r);
                    let gr = &gyd[r * d..(r + 1) * d];
                    let s = dot(pr, gr);
                    for c in 0..d {
                        out[r * d + c] = pr[c] * (gr[c] - s);
                    }
                }
                Tensor::new(p.shape().to_vec(), out).expect("softmax grad")
            }),
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let rows = node.value.rows();
                let sc = self.value(*scale).data();
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); rows * d];
                    let n = T::of(d as f64);
                    for r in 0..rows {
                        let gr = &gyd[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            let dxh = gr[c] * sc[c];
                            m1 += dxh;
                            m2 += dxh * xr[c];
                        }
                        m1 /= n;
                        m2 /= n;
                        for c in 0..d {
                            let dxh = gr[c] * sc[c];
                            out[r * d + c] = inv_std[r] * (dxh - m1 - xr[c] * m2);
                        }
                    }
                    Tensor::new(node.value.shape().to_vec(), out).expect("ln grad")
                });
                self.acc(grads, *scale, || {
                    let mut out = vec![T::zero(); d];
                    for r in 0..rows {
                        for c in 0..d {
                            out[c] += gyd[r * d + c] * xhat[r * d + c];
                        }
                    }
                    Tensor::new(vec![d], out).expect("ln scale grad")
                });
                self.acc(grads, *shift, || {
                    let mut out = vec![T::zero(); d];
                    for r in 0..rows {
                        for c in 0..d {
                            out[c] += gyd[r * d + c];
                        }
                    }
                    Tensor::new(vec![d], out).expect("ln shift grad")
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                pattern,
                probs,
            } => self.attention_backward(grads, gyd, *q, *k, *v, *heads, pattern, probs),
            Op::GatherRows { x, rows } => self.acc(grads, *x, || {
                let src = self.value(*x);
                let d = src.last_dim();
                let mut out = vec![T::zero(); src.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..d {
                        out[r * d + c] += gyd[i * d + c];
                    }
                }
                Tensor::new(src.shape().to_vec(), out).expect("gather grad")
            }),
            Op::ExpandBatch(x) => self.acc(grads, *x, || {
                let src = self.value(*x);
                let n = src.numel();
                let mut out = vec![T::zero(); n];
                for chunk in gyd.chunks(n.max(1)) {
                    for (o, &g) in out.iter_mut().zip(chunk) {
                        *o += g;
                    }
                }
                Tensor::new(src.shape().to_vec(), out).expect("expand grad")
            }),
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let f = gyd[0] * T::of(2.0 / p.numel() as f64);
                self.acc(grads, *pred, || zip_map(p, target, |a, b| (a - b) * f));
            }
            Op::Mae { pred, target } => {
                let p = self.value(*pred);
                let f = gyd[0] / T::of(p.numel() as f64);
                self.acc(grads, *pred, || {
                    zip_map(p, target, |a, b| {
                        if a > b {
                            f
                        } else if a < b {
                            -f
                        } else {
                            T::zero()
                        }
                    })
                });
            }
            Op::BceLogits { logits, target } => {
                let p = self.value(*logits);
                let f = gyd[0] / T::of(p.numel() as f64);
                self.acc(grads, *logits, || {
                    zip_map(p, target, |x, y| (kernels::sigmoid(x) - y) * f)
                });
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let p = self.value(*logits);
                let c = p.shape()[1];
                let f = gyd[0] / T::of(labels.len() as f64);
                self.acc(grads, *logits, || {
                    let mut out: Vec<T> = probs.iter().map(|&x| x * f).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        out[r * c + l] -= f;
                    }
                    Tensor::new(p.shape().to_vec(), out).expect("ce grad")
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        gyd: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pattern: &AttnPattern,
        probs: &[T],
    ) {
        let sq = self.shape(q);
        let (b, lq, dm) = (sq[0], sq[1], sq[2]);
        let lk = self.shape(k)[1];
        let dk = dm / heads;
        let scale = T::one() / T::of(dk as f64).sqrt();
        let nnz = pattern.nnz();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![T::zero(); qd.len()];
        let mut dkk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp: Vec<T> = Vec::new();
        for bi in 0..b {
            for i in 0..lq {
                let cols = pattern.row(bi, i);
                if cols.is_empty() {
                    continue;
                }
                let off = pattern.row_offset(bi, i);
                let qi = (bi * lq + i) * dm;
                for h in 0..heads {
                    let hs = h * dk..(h + 1) * dk;
                    let go = &gyd[qi..][hs.clone()];
                    dp.clear();
                    let mut s = T::zero();
                    for (e, &j) in cols.iter().enumerate() {
                        let vj = (bi * lk + j as usize) * dm;
                        let p = probs[h * nnz + off + e];
                        let d = dot(go, &vd[vj..][hs.clone()]);
                        dp.push(d);
                        s += p * d;
                        for (dvv, &g) in dv[vj..][hs.clone()].iter_mut().zip(go) {
                            *dvv += p * g;
                        }
                    }
                    for (e, &j) in cols.iter().enumerate() {
                        let kj = (bi * lk + j as usize) * dm;
                        let ds = probs[h * nnz + off + e] * (dp[e] - s) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        for c in hs.clone() {
                            dq[qi + c] += ds * kd[kj + c];
                            dkk[kj + c] += ds * qd[qi + c];
                        }
                    }
                }
            }
        }
        let shapes = [
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        ];
        self.acc(grads, q, || Tensor::new(shapes[0].clone(), dq).expect("dq"));
        self.acc(grads, k, || Tensor::new(shapes[1].clone(), dkk).expect("dk"));
        self.acc(grads, v, || Tensor::new(shapes[2].clone(), dv).expect("dv"));
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, make: impl FnOnce() -> Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        let g = make();
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// Result of one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: Vec<(ParamId, Var)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to a recorded value; zeros-shaped `None` when the
    /// loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.param_vars
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shapes")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre = shape[..axis].iter().product();
    let post = shape[axis + 1..].iter().product();
    (pre, shape[axis], post)
}

fn transpose_blocks<T: Element>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    let block = m * n;
    if block == 0 {
        return out;
    }
    for (bi, chunk) in src.chunks(block).enumerate() {
        let dst = &mut out[bi * block..(bi + 1) * block];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = chunk[i * n + j];
            }
        }
    }
    out
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Option<MatDims> {
    if sa.len() < 2 || sb.len() < 2 {
        return None;
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != kb {
        return None;
    }
    let lead_a = &sa[..sa.len() - 2];
    let lead_b = &sb[..sb.len() - 2];
    let shared_rhs = lead_b.is_empty();
    if !shared_rhs && lead_a != lead_b {
        return None;
    }
    Some(MatDims {
        batch: lead_a.iter().product(),
        m,
        k,
        n,
        shared_rhs,
    })
}
