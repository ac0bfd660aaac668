//! Reverse-mode differentiation over an append-only operation record.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! record once in reverse, accumulating gradients only into nodes that
//! (transitively) depend on a differentiable leaf.

use std::collections::HashMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key-side validity for attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    /// `rows × len_k`, true where the key position may be attended.
    pub key_valid: Vec<bool>,
    /// Query position `i` may only see keys `j <= i`.
    pub causal: bool,
}

impl AttnMask {
    pub fn all_valid(rows: usize, len_k: usize, causal: bool) -> Self {
        AttnMask {
            key_valid: vec![true; rows * len_k],
            causal,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    SoftmaxRows(Var),
    MatMul {
        a: Var,
        b: Var,
        batched: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        scale: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        probs: Vec<f64>,
        counts: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        coeffs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    PadLen {
        x: Var,
        old_len: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Shape(msg.into())
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c` with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers pass slices covering the strided m×k, k×n and
    // row-major m×n extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables the non-finite check on every forward op.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.check_finite {
            assert!(value.all_finite(), "non-finite value produced by forward op");
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf not backed by a parameter store.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Differentiable leaf bound to a stored parameter. Repeated calls return
    /// the same node so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("mul {:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x * s).collect()).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| x.max(0.0)).collect()).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// `a[..., n, k] · b[k, m]`, or batched `a[B, n, k] · b[B, k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(format!("matmul needs ≥2 axes: {sa:?} · {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        let n = sa[sa.len() - 2];
        let (kb, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err(format!("matmul inner extents {sa:?} · {sb:?}")));
        }
        let batched = sb.len() > 2;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(m);
        let out = if batched {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(shape_err(format!("matmul batch extents {sa:?} · {sb:?}")));
            }
            let batches = ta.len() / (n * k);
            let mut out = vec![0.0; batches * n * m];
            for i in 0..batches {
                gemm(
                    n,
                    k,
                    m,
                    &ta.data()[i * n * k..],
                    k,
                    1,
                    &tb.data()[i * k * m..],
                    m,
                    1,
                    0.0,
                    &mut out[i * n * m..],
                );
            }
            out
        } else {
            let rows = ta.len() / k;
            let mut out = vec![0.0; rows * m];
            gemm(rows, k, m, ta.data(), k, 1, tb.data(), m, 1, 0.0, &mut out);
            out
        };
        let out = Tensor::new(&shape, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, batched }, ng))
    }

    /// `x[..., k] · w[k, m] + b[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let (tx, tw) = (self.value(x), self.value(w));
        let k = tx.last_dim();
        if tw.shape().len() != 2 || tw.shape()[0] != k {
            return Err(shape_err(format!("linear {:?} · {:?}", tx.shape(), tw.shape())));
        }
        let m = tw.shape()[1];
        let rows = tx.outer_len();
        let mut out = vec![0.0; rows * m];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != m {
                return Err(shape_err(format!("bias {:?} for width {m}", tb.shape())));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(tb.data());
            }
            gemm(rows, k, m, tx.data(), k, 1, tw.data(), m, 1, 1.0, &mut out);
        } else {
            gemm(rows, k, m, tx.data(), k, 1, tw.data(), m, 1, 0.0, &mut out);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let out = Tensor::new(&shape, out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// Row-wise normalisation over the last axis followed by `gain·x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let d = tx.last_dim();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != d || tb.len() != d {
            return Err(shape_err(format!(
                "layer_norm gain {:?} bias {:?} for width {d}",
                tg.shape(),
                tb.shape()
            )));
        }
        let rows = tx.outer_len();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = tg.data()[c] * h + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention on already-projected inputs.
    ///
    /// `q: [rows, len_q, d]`, `k, v: [rows, len_k, d]`; head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads`. Output is the concatenation of heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttnMask, heads: usize) -> Result<Var, NumericsError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (sq, sk) = (tq.shape(), tk.shape());
        if sq.len() != 3 || sk.len() != 3 || tv.shape() != sk {
            return Err(shape_err(format!("attention q {sq:?} k {sk:?} v {:?}", tv.shape())));
        }
        let (rows, lq, d) = (sq[0], sq[1], sq[2]);
        let lk = sk[1];
        if sk[0] != rows || sk[2] != d || heads == 0 || d % heads != 0 {
            return Err(shape_err(format!("attention q {sq:?} k {sk:?} heads {heads}")));
        }
        if mask.key_valid.len() != rows * lk {
            return Err(shape_err(format!(
                "attention mask holds {} entries, expected {}",
                mask.key_valid.len(),
                rows * lk
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; rows * heads * lq * lk];
        let mut out = vec![0.0; rows * lq * d];
        for r in 0..rows {
            let valid = &mask.key_valid[r * lk..(r + 1) * lk];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let qi = &qd[(r * lq + i) * d + off..][..dh];
                    let p = &mut probs[((r * heads + h) * lq + i) * lk..][..lk];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..lk {
                        if valid[j] && (!mask.causal || j <= i) {
                            let kj = &kd[(r * lk + j) * d + off..][..dh];
                            let s = dot(qi, kj) * scale;
                            p[j] = s;
                            mx = mx.max(s);
                        } else {
                            p[j] = f64::NEG_INFINITY;
                        }
                    }
                    if mx == f64::NEG_INFINITY {
                        p.iter_mut().for_each(|x| *x = 0.0);
                        continue;
                    }
                    let mut total = 0.0;
                    for x in p.iter_mut() {
                        *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - mx).exp() };
                        total += *x;
                    }
                    let o = &mut out[(r * lq + i) * d + off..][..dh];
                    for j in 0..lk {
                        p[j] /= total;
                        if p[j] != 0.0 {
                            let vj = &vd[(r * lk + j) * d + off..][..dh];
                            for c in 0..dh {
                                o[c] += p[j] * vj[c];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[rows, lq, d], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Attention weights `[rows, heads, len_q, len_k]` of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Inverted dropout; the caller supplies the random stream.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = Tensor::new(t.shape(), t.data().iter().zip(&mask).map(|(a, m)| a * m).collect()).expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Gathers `table` rows for `ids` (shape `[rows, len]`), multiplies by
    /// `scale` and adds `positions[t]` to position `t` of every row.
    pub fn embedding(
        &mut self,
        table: Var,
        ids: &[usize],
        rows: usize,
        scale: f64,
        positions: Option<&Tensor>,
    ) -> Result<Var, NumericsError> {
        let tt = self.value(table);
        if tt.shape().len() != 2 || rows == 0 || !ids.len().is_multiple_of(rows) {
            return Err(shape_err("embedding table must be [vocab, d]"));
        }
        let (vocab, d) = (tt.shape()[0], tt.shape()[1]);
        let len = ids.len() / rows;
        if let Some(p) = positions {
            if p.shape().len() != 2 || p.shape()[0] < len || p.shape()[1] != d {
                return Err(shape_err(format!(
                    "positions {:?} for length {len} width {d}",
                    p.shape()
                )));
            }
        }
        let mut out = vec![0.0; ids.len() * d];
        for (n, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(NumericsError::IndexOutOfRange {
                    index: id,
                    bound: vocab,
                });
            }
            let src = &tt.data()[id * d..(id + 1) * d];
            let dst = &mut out[n * d..(n + 1) * d];
            for c in 0..d {
                dst[c] = src[c] * scale;
            }
            if let Some(p) = positions {
                let t = n % len;
                for c in 0..d {
                    dst[c] += p.data()[t * d + c];
                }
            }
        }
        let out = Tensor::new(&[rows, len, d], out)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                scale,
            },
            ng,
        ))
    }

    /// Per-row mean over non-pad positions of `-ln softmax(logits)[target]`.
    ///
    /// `logits: [rows, len, vocab]`, `targets: rows·len` ids. Rows whose
    /// targets are all `pad` yield 0.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var, NumericsError> {
        let tl = self.value(logits);
        let s = tl.shape();
        if s.len() != 3 || s[0] * s[1] != targets.len() {
            return Err(shape_err(format!(
                "cross entropy logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let (rows, len, vocab) = (s[0], s[1], s[2]);
        let mut probs = vec![0.0; tl.len()];
        let mut counts = vec![0usize; rows];
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            for t in 0..len {
                let n = r * len + t;
                let tgt = targets[n];
                if tgt == pad {
                    continue;
                }
                if tgt >= vocab {
                    return Err(NumericsError::IndexOutOfRange {
                        index: tgt,
                        bound: vocab,
                    });
                }
                let x = &tl.data()[n * vocab..(n + 1) * vocab];
                let p = &mut probs[n * vocab..(n + 1) * vocab];
                p.copy_from_slice(x);
                let mx = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in p.iter_mut() {
                    *v = (*v - mx).exp();
                    total += *v;
                }
                for v in p.iter_mut() {
                    *v /= total;
                }
                out[r] += -(x[tgt] - mx - total.ln());
                counts[r] += 1;
            }
            if counts[r] > 0 {
                out[r] /= counts[r] as f64;
            }
        }
        let out = Tensor::new(&[rows], out)?;
        let ng = self.ng(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                probs,
                counts,
            },
            ng,
        ))
    }

    /// Scalar `Σ coeffs[i]·x[i]` over the flattened input.
    pub fn weighted_sum(&mut self, x: Var, coeffs: &[f64]) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.len() != coeffs.len() {
            return Err(shape_err(format!(
                "weighted_sum over {} values with {} coefficients",
                t.len(),
                coeffs.len()
            )));
        }
        let s = t.data().iter().zip(coeffs).map(|(a, c)| a * c).sum();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                coeffs: coeffs.to_vec(),
            },
            ng,
        ))
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or_else(|| shape_err("concat of zero tensors"))?;
        let inner = self.shape(*first)[1..].to_vec();
        if parts.len() == 1 {
            return Ok(*first);
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != inner[..] {
                return Err(shape_err(format!("concat {:?} with inner {inner:?}", t.shape())));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&inner);
        let out = Tensor::new(&shape, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Gathers the listed entries of the first axis.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let n = t.shape()[0];
        let stride = t.len() / n;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(NumericsError::IndexOutOfRange { index: r, bound: n });
            }
            data.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(&shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, ng))
    }

    /// Zero-extends axis 1 of `[rows, len, d]` to `new_len`.
    pub fn pad_len(&mut self, x: Var, new_len: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 || new_len < s[1] {
            return Err(shape_err(format!("pad {s:?} to length {new_len}")));
        }
        if new_len == s[1] {
            return Ok(x);
        }
        let (rows, len, d) = (s[0], s[1], s[2]);
        let mut data = vec![0.0; rows * new_len * d];
        for r in 0..rows {
            data[r * new_len * d..][..len * d].copy_from_slice(&t.data()[r * len * d..][..len * d]);
        }
        let out = Tensor::new(&[rows, new_len, d], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::PadLen { x, old_len: len }, ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr, |$b:ident| $body:block) => {
                if nodes[$v.0].needs_grad {
                    let $b = grads[$v.0].get_or_insert_with(|| vec![0.0; nodes[$v.0].value.len()]);
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                acc!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc!(*a, |ga| {
                    for n in 0..g.len() {
                        ga[n] += g[n] * vb[n];
                    }
                });
                acc!(*b, |gb| {
                    for n in 0..g.len() {
                        gb[n] += g[n] * va[n];
                    }
                });
            }
            Op::Scale(a, s) => {
                acc!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
                });
            }
            Op::Sum(a) => {
                acc!(*a, |ga| {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc!(*a, |ga| {
                    for n in 0..g.len() {
                        if va[n] > 0.0 {
                            ga[n] += g[n];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = nodes[i].value.data();
                let n = nodes[i].value.last_dim();
                acc!(*a, |ga| {
                    for r in 0..y.len() / n {
                        let (yr, gr) = (&y[r * n..][..n], &g[r * n..][..n]);
                        let d = dot(yr, gr);
                        for c in 0..n {
                            ga[r * n + c] += yr[c] * (gr[c] - d);
                        }
                    }
                });
            }
            Op::MatMul { a, b, batched } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let sa = ta.shape();
                let sb = tb.shape();
                let k = sa[sa.len() - 1];
                let m = sb[sb.len() - 1];
                if *batched {
                    let n = sa[sa.len() - 2];
                    let batches = ta.len() / (n * k);
                    acc!(*a, |ga| {
                        for bi in 0..batches {
                            gemm(
                                n,
                                m,
                                k,
                                &g[bi * n * m..],
                                m,
                                1,
                                &tb.data()[bi * k * m..],
                                1,
                                m,
                                1.0,
                                &mut ga[bi * n * k..],
                            );
                        }
                    });
                    acc!(*b, |gb| {
                        for bi in 0..batches {
                            gemm(
                                k,
                                n,
                                m,
                                &ta.data()[bi * n * k..],
                                1,
                                k,
                                &g[bi * n * m..],
                                m,
                                1,
                                1.0,
                                &mut gb[bi * k * m..],
                            );
                        }
                    });
                } else {
                    let rows = ta.len() / k;
                    acc!(*a, |ga| {
                        gemm(rows, m, k, g, m, 1, tb.data(), 1, m, 1.0, ga);
                    });
                    acc!(*b, |gb| {
                        gemm(k, rows, m, ta.data(), 1, k, g, m, 1, 1.0, gb);
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                let k = tx.last_dim();
                let m = tw.shape()[1];
                let rows = tx.outer_len();
                acc!(*x, |gx| {
                    gemm(rows, m, k, g, m, 1, tw.data(), 1, m, 1.0, gx);
                });
                acc!(*w, |gw| {
                    gemm(k, rows, m, tx.data(), 1, k, g, m, 1, 1.0, gw);
                });
                if let Some(b) = b {
                    acc!(*b, |gb| {
                        for row in g.chunks(m) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = nodes[x.0].value.last_dim();
                let rows = inv_std.len();
                let gv = val(*gain);
                acc!(*gain, |gg| {
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                acc!(*bias, |gbias| {
                    for r in 0..rows {
                        for c in 0..d {
                            gbias[c] += g[r * d + c];
                        }
                    }
                });
                acc!(*x, |gx| {
                    let mut dxh = vec![0.0; d];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            dxh[c] = g[r * d + c] * gv[c];
                            m1 += dxh[c];
                            m2 += dxh[c] * xhat[r * d + c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for c in 0..d {
                            gx[r * d + c] += inv_std[r] * (dxh[c] - m1 - xhat[r * d + c] * m2);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::Dropout { x, mask } => {
                acc!(*x, |gx| {
                    for n in 0..g.len() {
                        gx[n] += g[n] * mask[n];
                    }
                });
            }
            Op::Embedding { table, ids, scale } => {
                let d = nodes[table.0].value.shape()[1];
                acc!(*table, |gt| {
                    for (n, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[n * d + c] * scale;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                counts,
            } => {
                let s = nodes[logits.0].value.shape();
                let (len, vocab) = (s[1], s[2]);
                acc!(*logits, |gl| {
                    for (n, &tgt) in targets.iter().enumerate() {
                        if tgt == *pad {
                            continue;
                        }
                        let r = n / len;
                        let coef = g[r] / counts[r] as f64;
                        let p = &probs[n * vocab..(n + 1) * vocab];
                        let dst = &mut gl[n * vocab..(n + 1) * vocab];
                        for c in 0..vocab {
                            dst[c] += coef * p[c];
                        }
                        dst[tgt] -= coef;
                    }
                });
            }
            Op::WeightedSum { x, coeffs } => {
                acc!(*x, |gx| {
                    for n in 0..coeffs.len() {
                        gx[n] += g[0] * coeffs[n];
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    acc!(p, |gp| {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y);
                    });
                    off += n;
                }
            }
            Op::SelectRows { x, rows } => {
                let t = &nodes[x.0].value;
                let stride = t.len() / t.shape()[0];
                acc!(*x, |gx| {
                    for (o, &r) in rows.iter().enumerate() {
                        let src = &g[o * stride..(o + 1) * stride];
                        gx[r * stride..(r + 1) * stride]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::PadLen { x, old_len } => {
                let s = nodes[i].value.shape();
                let (rows, new_len, d) = (s[0], s[1], s[2]);
                acc!(*x, |gx| {
                    for r in 0..rows {
                        let src = &g[r * new_len * d..][..old_len * d];
                        gx[r * old_len * d..][..old_len * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let sq = nodes[q.0].value.shape();
        let (rows, lq, d) = (sq[0], sq[1], sq[2]);
        let lk = nodes[k.0].value.shape()[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            nodes[q.0].value.data(),
            nodes[k.0].value.data(),
            nodes[v.0].value.data(),
        );
        let mut gq = nodes[q.0].needs_grad.then(|| vec![0.0; qd.len()]);
        let mut gk = nodes[k.0].needs_grad.then(|| vec![0.0; kd.len()]);
        let mut gv = nodes[v.0].needs_grad.then(|| vec![0.0; vd.len()]);
        let mut dp = vec![0.0; lk];
        for r in 0..rows {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let p = &probs[((r * heads + h) * lq + i) * lk..][..lk];
                    let go = &g[(r * lq + i) * d + off..][..dh];
                    let mut pd = 0.0;
                    for j in 0..lk {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vd[(r * lk + j) * d + off..][..dh];
                        dp[j] = dot(go, vj);
                        pd += p[j] * dp[j];
                        if let Some(gv) = gv.as_mut() {
                            let dst = &mut gv[(r * lk + j) * d + off..][..dh];
                            for c in 0..dh {
                                dst[c] += p[j] * go[c];
                            }
                        }
                    }
                    let qi = &qd[(r * lq + i) * d + off..][..dh];
                    for j in 0..lk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - pd) * scale;
                        let kj = &kd[(r * lk + j) * d + off..][..dh];
                        if let Some(gq) = gq.as_mut() {
                            let dst = &mut gq[(r * lq + i) * d + off..][..dh];
                            for c in 0..dh {
                                dst[c] += ds * kj[c];
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            let dst = &mut gk[(r * lk + j) * d + off..][..dh];
                            for c in 0..dh {
                                dst[c] += ds * qi[c];
                            }
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(local) = local {
                match grads[var.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&local).for_each(|(a, b)| *a += b),
                    None => grads[var.0] = Some(local),
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.wrt(*self.params.get(&id)?)
    }
}
