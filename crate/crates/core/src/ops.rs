//! Differentiable ops and their backward rules.
//!
//! Every forward method computes its value, allocates the output slot and,
//! when the output requires a gradient, records a node listing the slots the
//! matching backward rule reads.

use crate::element::{gemm, matmul, matmul_nt, matmul_tn, Element, MatRef};
use crate::error::{ensure, Error, Result};
use crate::kernels::loss::{segmented_loss_and_grad, SegmentPlan, IGNORE_INDEX};
use crate::ledger::Category;
use crate::tape::{Tape, Var};

/// Additive mask value; `exp` of it (after max subtraction) underflows to exactly 0.
pub const MASKED: f64 = -1.0e30;

#[derive(Debug)]
pub(crate) enum Rule<T> {
    Matmul { m: usize, k: usize, n: usize },
    MatmulNt { m: usize, k: usize, n: usize },
    Add,
    Mul,
    Scale(T),
    Relu,
    Silu,
    RmsNorm { weight: Vec<T>, cols: usize },
    GatherRows { idx: Vec<usize>, src_rows: usize, cols: usize },
    PadRows { idx: Vec<usize>, cols: usize },
    ScatterAdd { idx: Vec<usize>, cols: usize },
    GatherRmsNorm { idx: Vec<usize>, src_rows: usize, weight: Vec<T>, cols: usize },
    Embedding { ids: Vec<usize>, cols: usize },
    Rope { positions: Vec<usize>, n_heads: usize, head_dim: usize, base: f64 },
    CausalAttention { n_heads: usize },
    SoftmaxCausal,
    CrossEntropy { targets: Vec<usize>, count: usize },
    LmLoss,
    Sum,
    MseLowerTri { count: usize },
    BlockMean { block: usize, rows: usize, cols: usize },
}

fn check_indices(idx: &[usize], bound: usize) -> Result<()> {
    for w in idx.windows(2) {
        ensure!(w[0] < w[1], Contract, "row indices must be strictly increasing, got {} then {}", w[0], w[1]);
    }
    if let Some(&last) = idx.last() {
        ensure!(last < bound, Index, "row index {last} out of range for {bound} rows");
    }
    Ok(())
}

fn rms_rows<T: Element>(src: &[T], cols: usize, weight: &[T], eps: f64, xhat: &mut [T], out: &mut [T], rstd: &mut T) {
    let ms: f64 = src.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / cols as f64;
    let r = T::of_f64(1.0 / (ms + eps).sqrt());
    *rstd = r;
    for c in 0..cols {
        xhat[c] = src[c] * r;
        out[c] = xhat[c] * weight[c];
    }
}

/// RMS-normalises one row into `out`.
pub(crate) fn rmsnorm_row_into<T: Element>(src: &[T], weight: &[T], eps: f64, out: &mut [T]) {
    let ms: f64 = src.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / src.len() as f64;
    let r = T::of_f64(1.0 / (ms + eps).sqrt());
    for ((o, x), w) in out.iter_mut().zip(src).zip(weight) {
        *o = *x * r * *w;
    }
}

/// Row-wise RMS normalisation outside the tape.
pub(crate) fn rmsnorm_rows<T: Element>(src: &[T], rows: usize, cols: usize, weight: &[T], eps: f64) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    let mut xhat = vec![T::zero(); cols];
    let mut r = T::zero();
    for i in 0..rows {
        let s = i * cols..(i + 1) * cols;
        rms_rows(&src[s.clone()], cols, weight, eps, &mut xhat, &mut out[s], &mut r);
    }
    out
}

fn rms_backward_row<T: Element>(g: &[T], xhat: &[T], rstd: T, weight: &[T], dx: &mut [T]) {
    let cols = g.len();
    let mut dot = T::zero();
    for c in 0..cols {
        dot += g[c] * weight[c] * xhat[c];
    }
    let mean = dot / T::of_f64(cols as f64);
    for c in 0..cols {
        dx[c] = rstd * (g[c] * weight[c] - xhat[c] * mean);
    }
}

/// Rotates one row in place. `sign` = 1 for forward, -1 for the inverse rotation.
pub(crate) fn rope_row<T: Element>(row: &mut [T], pos: usize, n_heads: usize, head_dim: usize, base: f64, sign: f64) {
    let half = head_dim / 2;
    for h in 0..n_heads {
        let o = h * head_dim;
        for i in 0..half {
            let theta = pos as f64 / base.powf(2.0 * i as f64 / head_dim as f64);
            let (s, c) = (sign * theta).sin_cos();
            let (s, c) = (T::of_f64(s), T::of_f64(c));
            let a = row[o + i];
            let b = row[o + i + half];
            row[o + i] = a * c - b * s;
            row[o + i + half] = a * s + b * c;
        }
    }
}

/// Causal multi-head attention over `n` rows of width `h`, writing the
/// context into `out` and the per-(head,row) log-sum-exp into `lse`.
/// `scores` is an `n×n` workspace.
pub(crate) fn attention_forward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    h: usize,
    n_heads: usize,
    out: &mut [T],
    lse: &mut [T],
    scores: &mut [T],
) {
    let d = h / n_heads;
    let scale = T::of_f64(1.0 / (d as f64).sqrt());
    for hh in 0..n_heads {
        let o = hh * d;
        gemm(
            MatRef::strided(&q[o..], n, d, h),
            false,
            MatRef::strided(&k[o..], n, d, h),
            true,
            scale,
            T::zero(),
            scores,
            n,
        );
        for i in 0..n {
            let row = &mut scores[i * n..(i + 1) * n];
            let m = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in &mut row[..=i] {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in &mut row[..=i] {
                *v /= sum;
            }
            for v in &mut row[i + 1..] {
                *v = T::zero();
            }
            lse[hh * n + i] = m + sum.ln();
        }
        gemm(
            MatRef::new(scores, n, n),
            false,
            MatRef::strided(&v[o..], n, d, h),
            false,
            T::one(),
            T::zero(),
            &mut out[o..],
            h,
        );
    }
}

impl<T: Element> Tape<T> {
    fn rg(&self, v: Var) -> bool {
        self.slots[v.0].requires_grad
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        ensure!(k == k2, Dimension, "matmul inner extents differ: {m}x{k} · {k2}x{n}");
        let out = matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        let y = self.push(vec![m, n], out, rg, "matmul");
        if rg {
            let mut saved = Vec::new();
            if self.rg(b) {
                saved.push(a);
            }
            if self.rg(a) {
                saved.push(b);
            }
            self.record("matmul", Rule::Matmul { m, k, n }, vec![a, b], y, saved);
        }
        Ok(y)
    }

    /// `a (m×k) · bᵀ` with `b` of shape `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        ensure!(k == k2, Dimension, "matmul_nt inner extents differ: {m}x{k} · ({n}x{k2})ᵀ");
        let out = matmul_nt(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        let y = self.push(vec![m, n], out, rg, "matmul_nt");
        if rg {
            let mut saved = Vec::new();
            if self.rg(b) {
                saved.push(a);
            }
            if self.rg(a) {
                saved.push(b);
            }
            self.record("matmul_nt", Rule::MatmulNt { m, k, n }, vec![a, b], y, saved);
        }
        Ok(y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            Dimension,
            "add shapes differ: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let rg = self.rg(a) || self.rg(b);
        let y = self.push(self.shape(a).to_vec(), out, rg, "add");
        if rg {
            self.record("add", Rule::Add, vec![a, b], y, vec![]);
        }
        Ok(y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            Dimension,
            "mul shapes differ: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let rg = self.rg(a) || self.rg(b);
        let y = self.push(self.shape(a).to_vec(), out, rg, "mul");
        if rg {
            let mut saved = Vec::new();
            if self.rg(b) {
                saved.push(a);
            }
            if self.rg(a) {
                saved.push(b);
            }
            self.record("mul", Rule::Mul, vec![a, b], y, saved);
        }
        Ok(y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of_f64(c);
        let out: Vec<T> = self.value(a).iter().map(|x| *x * c).collect();
        let rg = self.rg(a);
        let y = self.push(self.shape(a).to_vec(), out, rg, "scale");
        if rg {
            self.record("scale", Rule::Scale(c), vec![a], y, vec![]);
        }
        y
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.value(a).iter().map(|x| x.max(T::zero())).collect();
        let rg = self.rg(a);
        let y = self.push(self.shape(a).to_vec(), out, rg, "relu");
        if rg {
            self.record("relu", Rule::Relu, vec![a], y, vec![y]);
        }
        y
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.value(a).iter().map(|&x| x / (T::one() + (-x).exp())).collect();
        let rg = self.rg(a);
        let y = self.push(self.shape(a).to_vec(), out, rg, "silu");
        if rg {
            self.record("silu", Rule::Silu, vec![a], y, vec![a]);
        }
        y
    }

    /// Row-wise RMS normalisation with a frozen gain.
    pub fn rmsnorm(&mut self, x: Var, weight: &[T], eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        ensure!(weight.len() == cols, Dimension, "rmsnorm gain of {} for width {cols}", weight.len());
        let src = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let s = r * cols..(r + 1) * cols;
            rms_rows(&src[s.clone()], cols, weight, eps, &mut xhat[s.clone()], &mut out[s], &mut rstd[r]);
        }
        let rg = self.rg(x);
        let y = self.push(vec![rows, cols], out, rg, "rmsnorm");
        if rg {
            let xh = self.push(vec![rows, cols], xhat, false, "rmsnorm");
            let rs = self.push(vec![rows], rstd, false, "rmsnorm");
            self.record("rmsnorm", Rule::RmsNorm { weight: weight.to_vec(), cols }, vec![x], y, vec![xh, rs]);
        }
        Ok(y)
    }

    /// Copies the rows `idx` of `x` into a fresh `k×h` buffer.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        check_indices(idx, rows)?;
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(x);
        let y = self.push(vec![idx.len(), cols], out, rg, "gather");
        if rg {
            self.record("gather", Rule::GatherRows { idx: idx.to_vec(), src_rows: rows, cols }, vec![x], y, vec![]);
        }
        Ok(y)
    }

    /// Places the `k` rows of `src` at rows `idx` of a zero `rows×h` buffer.
    pub fn pad_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (k, cols) = self.dims2(src)?;
        ensure!(k == idx.len(), Dimension, "pad of {k} rows with {} indices", idx.len());
        check_indices(idx, rows)?;
        let s = self.value(src);
        let mut out = vec![T::zero(); rows * cols];
        for (i, &r) in idx.iter().enumerate() {
            out[r * cols..(r + 1) * cols].copy_from_slice(&s[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(src);
        let y = self.push(vec![rows, cols], out, rg, "pad");
        if rg {
            self.record("pad", Rule::PadRows { idx: idx.to_vec(), cols }, vec![src], y, vec![]);
        }
        Ok(y)
    }

    /// Adds the rows of `src` into rows `idx` of `x`, reusing `x`'s buffer.
    ///
    /// `x` must not be read by any backward rule; this is checked, and `x`
    /// is consumed (its value is no longer available).
    pub fn scatter_add_inplace(&mut self, x: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        let (k, c2) = self.dims2(src)?;
        ensure!(c2 == cols && k == idx.len(), Dimension, "scatter of {k}x{c2} into {rows}x{cols} with {} indices", idx.len());
        check_indices(idx, rows)?;
        let (mut buf, mem) = self.take_for_inplace(x)?;
        {
            let s = self.value(src);
            for (i, &r) in idx.iter().enumerate() {
                for (d, v) in buf[r * cols..(r + 1) * cols].iter_mut().zip(&s[i * cols..(i + 1) * cols]) {
                    *d += *v;
                }
            }
        }
        let rg = self.rg(x) || self.rg(src);
        let y = self.push_with_mem(vec![rows, cols], buf, rg, mem);
        if rg {
            self.record("scatter_add", Rule::ScatterAdd { idx: idx.to_vec(), cols }, vec![x, src], y, vec![]);
        }
        Ok(y)
    }

    /// RMS-normalised rows `idx` of `x`, read through the index list without
    /// materialising the gathered rows.
    pub fn gather_rmsnorm(&mut self, x: Var, idx: &[usize], weight: &[T], eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        ensure!(weight.len() == cols, Dimension, "rmsnorm gain of {} for width {cols}", weight.len());
        check_indices(idx, rows)?;
        let k = idx.len();
        let src = self.value(x);
        let mut out = vec![T::zero(); k * cols];
        let mut xhat = vec![T::zero(); k * cols];
        let mut rstd = vec![T::zero(); k];
        for (i, &r) in idx.iter().enumerate() {
            let s = i * cols..(i + 1) * cols;
            rms_rows(&src[r * cols..(r + 1) * cols], cols, weight, eps, &mut xhat[s.clone()], &mut out[s], &mut rstd[i]);
        }
        let rg = self.rg(x);
        let y = self.push(vec![k, cols], out, rg, "gather_rmsnorm");
        if rg {
            let xh = self.push(vec![k, cols], xhat, false, "gather_rmsnorm");
            let rs = self.push(vec![k], rstd, false, "gather_rmsnorm");
            self.record(
                "gather_rmsnorm",
                Rule::GatherRmsNorm { idx: idx.to_vec(), src_rows: rows, weight: weight.to_vec(), cols },
                vec![x],
                y,
                vec![xh, rs],
            );
        }
        Ok(y)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, cols) = self.dims2(table)?;
        if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &t in ids {
            out.extend_from_slice(&src[t * cols..(t + 1) * cols]);
        }
        let rg = self.rg(table);
        let y = self.push(vec![ids.len(), cols], out, rg, "embedding");
        if rg {
            self.record("embedding", Rule::Embedding { ids: ids.to_vec(), cols }, vec![table], y, vec![]);
        }
        Ok(y)
    }

    /// Rotary position embedding per head, using the given absolute positions.
    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize, base: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        ensure!(positions.len() == rows, Dimension, "{} positions for {rows} rows", positions.len());
        ensure!(cols % n_heads == 0, Dimension, "width {cols} not divisible by {n_heads} heads");
        let head_dim = cols / n_heads;
        ensure!(head_dim.is_multiple_of(2), Dimension, "rotary embedding needs an even head dim, got {head_dim}");
        let mut out = self.value(x).to_vec();
        for (r, &p) in positions.iter().enumerate() {
            rope_row(&mut out[r * cols..(r + 1) * cols], p, n_heads, head_dim, base, 1.0);
        }
        let rg = self.rg(x);
        let y = self.push(vec![rows, cols], out, rg, "rope");
        if rg {
            self.record(
                "rope",
                Rule::Rope { positions: positions.to_vec(), n_heads, head_dim, base },
                vec![x],
                y,
                vec![],
            );
        }
        Ok(y)
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// Saves `q`, `k`, `v`, the output and one log-sum-exp per (head, row);
    /// the probability matrix is recomputed in backward, so retained memory
    /// is linear in the number of rows.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (n, h) = self.dims2(q)?;
        ensure!(
            self.shape(k) == [n, h] && self.shape(v) == [n, h],
            Dimension,
            "attention operands differ: {:?} {:?} {:?}",
            self.shape(q),
            self.shape(k),
            self.shape(v)
        );
        ensure!(h % n_heads == 0, Dimension, "width {h} not divisible by {n_heads} heads");
        let mut out = vec![T::zero(); n * h];
        let mut lse = vec![T::zero(); n_heads * n];
        let ws = self.ledger.alloc(T::bytes(n * n), Category::Transient, "attention_scores");
        let mut scores = vec![T::zero(); n * n];
        attention_forward(self.value(q), self.value(k), self.value(v), n, h, n_heads, &mut out, &mut lse, &mut scores);
        drop(scores);
        self.ledger.free(ws)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let y = self.push(vec![n, h], out, rg, "attention");
        if rg {
            let l = self.push(vec![n_heads, n], lse, false, "attention");
            self.record("attention", Rule::CausalAttention { n_heads }, vec![q, k, v], y, vec![q, k, v, y, l]);
        }
        Ok(y)
    }

    /// Row softmax of a square score matrix with entries above the diagonal masked.
    pub fn softmax_causal(&mut self, scores: Var) -> Result<Var> {
        let (n, m) = self.dims2(scores)?;
        ensure!(n == m && self.shape(scores).len() == 2, Dimension, "softmax_causal needs a square matrix, got {n}x{m}");
        let src = self.value(scores);
        let mut out = vec![T::zero(); n * n];
        let masked = T::of_f64(MASKED);
        for i in 0..n {
            let row: Vec<T> = (0..n).map(|j| if j > i { masked } else { src[i * n + j] }).collect();
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let rg = self.rg(scores);
        let y = self.push(vec![n, n], out, rg, "softmax_causal");
        if rg {
            self.record("softmax_causal", Rule::SoftmaxCausal, vec![scores], y, vec![y]);
        }
        Ok(y)
    }

    /// Mean token cross-entropy; targets equal to [`IGNORE_INDEX`] are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits)?;
        ensure!(targets.len() == rows, Dimension, "{} targets for {rows} rows", targets.len());
        if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE_INDEX && t >= vocab) {
            return Err(Error::Index(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let count = targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
        ensure!(count > 0, Contract, "cross_entropy with every target ignored");
        let src = self.value(logits);
        let mut lse = vec![T::zero(); rows];
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &src[r * vocab..(r + 1) * vocab];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
            lse[r] = mx + s.ln();
            if targets[r] != IGNORE_INDEX {
                total += (lse[r] - row[targets[r]]).as_f64();
            }
        }
        let loss = T::of_f64(total / count as f64);
        let rg = self.rg(logits);
        let y = self.push(vec![1], vec![loss], rg, "cross_entropy");
        if rg {
            let l = self.push(vec![rows], lse, false, "cross_entropy");
            self.record(
                "cross_entropy",
                Rule::CrossEntropy { targets: targets.to_vec(), count },
                vec![logits],
                y,
                vec![logits, l],
            );
        }
        Ok(y)
    }

    /// LM-head projection plus mean cross-entropy, evaluated segment by segment.
    ///
    /// The gradient with respect to `hidden` is produced during the forward
    /// sweep and saved; logits never exist for more than one segment at a time.
    pub fn lm_head_loss(&mut self, hidden: Var, lm_head: Var, targets: &[usize], plan: &SegmentPlan) -> Result<Var> {
        let (rows, h) = self.dims2(hidden)?;
        let (h2, vocab) = self.dims2(lm_head)?;
        ensure!(h == h2, Dimension, "hidden width {h} vs lm head rows {h2}");
        ensure!(!self.rg(lm_head), Contract, "the LM head is frozen; segmented loss computes no weight gradient");
        ensure!(plan.seq_len() == rows, Dimension, "segment plan for {} rows applied to {rows}", plan.seq_len());
        let want_grad = self.rg(hidden);
        let (loss, grad) = {
            let hv = self.slots[hidden.0].data.as_deref().expect("hidden value is live");
            let wv = self.slots[lm_head.0].data.as_deref().expect("lm head value is live");
            segmented_loss_and_grad(hv, rows, wv, h, vocab, targets, plan, want_grad, &mut self.ledger)?
        };
        let y = self.push(vec![1], vec![loss], want_grad, "lm_loss");
        if want_grad {
            let g = self.push(vec![rows, h], grad.expect("gradient requested"), false, "lm_loss");
            self.record("lm_loss", Rule::LmLoss, vec![hidden, lm_head], y, vec![g]);
        }
        Ok(y)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<T>();
        let rg = self.rg(a);
        let y = self.push(vec![1], vec![s], rg, "sum");
        if rg {
            self.record("sum", Rule::Sum, vec![a], y, vec![]);
        }
        y
    }

    /// Mean squared error over the lower triangle (`j <= i`) of a square matrix.
    /// With `zero_floor`, a zero target only penalises positive predictions,
    /// matching scores that are clamped at zero before use.
    pub fn mse_lower_tri(&mut self, pred: Var, target: &[T], zero_floor: bool) -> Result<Var> {
        let (n, m) = self.dims2(pred)?;
        ensure!(n == m && target.len() == n * n, Dimension, "mse_lower_tri needs matching square operands");
        let p = self.value(pred);
        let mut diff = vec![T::zero(); n * n];
        let mut total = T::zero();
        for i in 0..n {
            for j in 0..=i {
                let (x, t) = (p[i * n + j], target[i * n + j]);
                let d = if zero_floor && t == T::zero() && x < T::zero() { T::zero() } else { x - t };
                diff[i * n + j] = d;
                total += d * d;
            }
        }
        let count = n * (n + 1) / 2;
        let rg = self.rg(pred);
        let y = self.push(vec![1], vec![total / T::of_f64(count as f64)], rg, "mse");
        if rg {
            let d = self.push(vec![n, n], diff, false, "mse");
            self.record("mse", Rule::MseLowerTri { count }, vec![pred], y, vec![d]);
        }
        Ok(y)
    }

    /// Mean of each block of `block` consecutive rows; a ragged last block
    /// averages over the rows it has.
    pub fn block_mean(&mut self, x: Var, block: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        ensure!(block > 0, Contract, "block size must be positive");
        let nb = rows.div_ceil(block);
        let src = self.value(x);
        let mut out = vec![T::zero(); nb * cols];
        for b in 0..nb {
            let lo = b * block;
            let hi = ((b + 1) * block).min(rows);
            let inv = T::of_f64(1.0 / (hi - lo) as f64);
            for r in lo..hi {
                for c in 0..cols {
                    out[b * cols + c] += src[r * cols + c];
                }
            }
            for v in &mut out[b * cols..(b + 1) * cols] {
                *v *= inv;
            }
        }
        let rg = self.rg(x);
        let y = self.push(vec![nb, cols], out, rg, "block_mean");
        if rg {
            self.record("block_mean", Rule::BlockMean { block, rows, cols }, vec![x], y, vec![]);
        }
        Ok(y)
    }
}

/// Gradients of node `ni`'s inputs given the gradient `g` of its output.
pub(crate) fn backward_rule<T: Element>(tape: &mut Tape<T>, ni: usize, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
    let node = &tape.nodes[ni];
    let inputs = node.inputs.clone();
    let saved = node.saved.clone();
    let need = |i: usize| tape.slots[inputs[i].0].requires_grad;
    let val = |v: Var| -> &[T] { tape.slots[v.0].data.as_deref().expect("saved value is live") };
    let out = match &node.rule {
        Rule::Matmul { m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let mut s = saved.iter();
            let a_saved = if need(1) { s.next().copied() } else { None };
            let b_saved = if need(0) { s.next().copied() } else { None };
            let da = b_saved.map(|b| matmul_nt(g, val(b), m, n, k));
            let db = a_saved.map(|a| matmul_tn(val(a), g, m, k, n));
            vec![da, db]
        }
        Rule::MatmulNt { m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let mut s = saved.iter();
            let a_saved = if need(1) { s.next().copied() } else { None };
            let b_saved = if need(0) { s.next().copied() } else { None };
            // y = a bᵀ: da = g b, db = gᵀ a
            let da = b_saved.map(|b| matmul(g, val(b), m, n, k));
            let db = a_saved.map(|a| matmul_tn(g, val(a), m, n, k));
            vec![da, db]
        }
        Rule::Add => vec![need(0).then(|| g.to_vec()), need(1).then(|| g.to_vec())],
        Rule::Mul => {
            let mut s = saved.iter();
            let a_saved = if need(1) { s.next().copied() } else { None };
            let b_saved = if need(0) { s.next().copied() } else { None };
            let da = b_saved.map(|b| g.iter().zip(val(b)).map(|(x, y)| *x * *y).collect());
            let db = a_saved.map(|a| g.iter().zip(val(a)).map(|(x, y)| *x * *y).collect());
            vec![da, db]
        }
        Rule::Scale(c) => vec![Some(g.iter().map(|x| *x * *c).collect())],
        Rule::Relu => {
            let y = val(saved[0]);
            vec![Some(g.iter().zip(y).map(|(g, y)| if *y > T::zero() { *g } else { T::zero() }).collect())]
        }
        Rule::Silu => {
            let x = val(saved[0]);
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(&g, &x)| {
                        let s = T::one() / (T::one() + (-x).exp());
                        g * (s + x * s * (T::one() - s))
                    })
                    .collect(),
            )]
        }
        Rule::RmsNorm { weight, cols } => {
            let (xhat, rstd) = (val(saved[0]), val(saved[1]));
            let cols = *cols;
            let rows = rstd.len();
            let mut dx = vec![T::zero(); rows * cols];
            for r in 0..rows {
                let s = r * cols..(r + 1) * cols;
                rms_backward_row(&g[s.clone()], &xhat[s.clone()], rstd[r], weight, &mut dx[s]);
            }
            vec![Some(dx)]
        }
        Rule::GatherRows { idx, src_rows, cols } => {
            let cols = *cols;
            let mut dx = vec![T::zero(); src_rows * cols];
            for (i, &r) in idx.iter().enumerate() {
                for (d, v) in dx[r * cols..(r + 1) * cols].iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                    *d += *v;
                }
            }
            vec![Some(dx)]
        }
        Rule::PadRows { idx, cols } => {
            let cols = *cols;
            let mut ds = Vec::with_capacity(idx.len() * cols);
            for &r in idx {
                ds.extend_from_slice(&g[r * cols..(r + 1) * cols]);
            }
            vec![Some(ds)]
        }
        Rule::ScatterAdd { idx, cols } => {
            let cols = *cols;
            let dsrc = need(1).then(|| {
                let mut ds = Vec::with_capacity(idx.len() * cols);
                for &r in idx {
                    ds.extend_from_slice(&g[r * cols..(r + 1) * cols]);
                }
                ds
            });
            vec![need(0).then(|| g.to_vec()), dsrc]
        }
        Rule::GatherRmsNorm { idx, src_rows, weight, cols } => {
            let (xhat, rstd) = (val(saved[0]), val(saved[1]));
            let cols = *cols;
            let mut dx = vec![T::zero(); src_rows * cols];
            for (i, &r) in idx.iter().enumerate() {
                let s = i * cols..(i + 1) * cols;
                rms_backward_row(&g[s.clone()], &xhat[s], rstd[i], weight, &mut dx[r * cols..(r + 1) * cols]);
            }
            vec![Some(dx)]
        }
        Rule::Embedding { ids, cols } => {
            let cols = *cols;
            let vocab = tape.slots[inputs[0].0].shape[0];
            let mut dt = vec![T::zero(); vocab * cols];
            for (i, &t) in ids.iter().enumerate() {
                for (d, v) in dt[t * cols..(t + 1) * cols].iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                    *d += *v;
                }
            }
            vec![Some(dt)]
        }
        Rule::Rope { positions, n_heads, head_dim, base } => {
            let cols = n_heads * head_dim;
            let mut dx = g.to_vec();
            for (r, &p) in positions.iter().enumerate() {
                rope_row(&mut dx[r * cols..(r + 1) * cols], p, *n_heads, *head_dim, *base, -1.0);
            }
            vec![Some(dx)]
        }
        Rule::CausalAttention { n_heads } => {
            let (q, k, v, o, lse) = (val(saved[0]), val(saved[1]), val(saved[2]), val(saved[3]), val(saved[4]));
            let n_heads = *n_heads;
            let n = lse.len() / n_heads;
            let h = q.len() / n.max(1);
            let d = h / n_heads;
            let scale = T::of_f64(1.0 / (d as f64).sqrt());
            let mut dq = vec![T::zero(); n * h];
            let mut dk = vec![T::zero(); n * h];
            let mut dv = vec![T::zero(); n * h];
            let mut p = vec![T::zero(); n * n];
            let mut dp = vec![T::zero(); n * n];
            for hh in 0..n_heads {
                let off = hh * d;
                gemm(
                    MatRef::strided(&q[off..], n, d, h),
                    false,
                    MatRef::strided(&k[off..], n, d, h),
                    true,
                    scale,
                    T::zero(),
                    &mut p,
                    n,
                );
                for i in 0..n {
                    let l = lse[hh * n + i];
                    for j in 0..n {
                        let e = &mut p[i * n + j];
                        *e = if j <= i { (*e - l).exp() } else { T::zero() };
                    }
                }
                // dV = Pᵀ dO
                gemm(MatRef::new(&p, n, n), true, MatRef::strided(&g[off..], n, d, h), false, T::one(), T::zero(), &mut dv[off..], h);
                // dP = dO Vᵀ
                gemm(
                    MatRef::strided(&g[off..], n, d, h),
                    false,
                    MatRef::strided(&v[off..], n, d, h),
                    true,
                    T::one(),
                    T::zero(),
                    &mut dp,
                    n,
                );
                for i in 0..n {
                    let mut di = T::zero();
                    for c in 0..d {
                        di += g[i * h + off + c] * o[i * h + off + c];
                    }
                    for j in 0..n {
                        let idx = i * n + j;
                        dp[idx] = p[idx] * (dp[idx] - di);
                    }
                }
                // dQ = scale dS K, dK = scale dSᵀ Q
                gemm(MatRef::new(&dp, n, n), false, MatRef::strided(&k[off..], n, d, h), false, scale, T::zero(), &mut dq[off..], h);
                gemm(MatRef::new(&dp, n, n), true, MatRef::strided(&q[off..], n, d, h), false, scale, T::zero(), &mut dk[off..], h);
            }
            vec![need(0).then_some(dq), need(1).then_some(dk), need(2).then_some(dv)]
        }
        Rule::SoftmaxCausal => {
            let y = val(saved[0]);
            let n = (y.len() as f64).sqrt() as usize;
            let mut dx = vec![T::zero(); n * n];
            for i in 0..n {
                let row = i * n..(i + 1) * n;
                let dot: T = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| *a * *b).sum();
                for j in 0..n {
                    dx[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
                }
            }
            vec![Some(dx)]
        }
        Rule::CrossEntropy { targets, count } => {
            let (logits, lse) = (val(saved[0]), val(saved[1]));
            let rows = lse.len();
            let vocab = logits.len() / rows;
            let scale = g[0] / T::of_f64(*count as f64);
            let mut dl = vec![T::zero(); rows * vocab];
            for r in 0..rows {
                if targets[r] == IGNORE_INDEX {
                    continue;
                }
                for c in 0..vocab {
                    dl[r * vocab + c] = (logits[r * vocab + c] - lse[r]).exp() * scale;
                }
                dl[r * vocab + targets[r]] -= scale;
            }
            vec![Some(dl)]
        }
        Rule::LmLoss => {
            let gh = val(saved[0]);
            vec![Some(gh.iter().map(|v| *v * g[0]).collect()), None]
        }
        Rule::Sum => {
            let n = tape.slots[inputs[0].0].shape.iter().product();
            vec![Some(vec![g[0]; n])]
        }
        Rule::MseLowerTri { count } => {
            let d = val(saved[0]);
            let c = T::of_f64(2.0) * g[0] / T::of_f64(*count as f64);
            vec![Some(d.iter().map(|v| *v * c).collect())]
        }
        Rule::BlockMean { block, rows, cols } => {
            let (block, rows, cols) = (*block, *rows, *cols);
            let mut dx = vec![T::zero(); rows * cols];
            for r in 0..rows {
                let b = r / block;
                let hi = ((b + 1) * block).min(rows);
                let inv = T::of_f64(1.0 / (hi - b * block) as f64);
                for c in 0..cols {
                    dx[r * cols + c] = g[b * cols + c] * inv;
                }
            }
            vec![Some(dx)]
        }
    };
    Ok(out)
}
