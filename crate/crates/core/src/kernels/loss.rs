//! LM-head loss and its gradient computed over sequence segments.
//!
//! The vocabulary projection of a long sequence is the largest transient
//! buffer in a fine-tuning step. Splitting the rows into `N` contiguous
//! segments and turning each segment's logits into its loss gradient before
//! moving on bounds the live logits to one segment.

use serde::{Deserialize, Serialize};

use crate::element::{gemm, Element, MatRef};
use crate::error::{ensure, Error, Result};
use crate::ledger::{Category, Ledger};
use crate::tensor::Tensor;

/// Target value that contributes neither loss nor gradient.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Contiguous, non-empty row ranges covering `[0, seq_len)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    seq_len: usize,
    bounds: Vec<(usize, usize)>,
}

impl SegmentPlan {
    /// `n_segments` near-equal segments; the first `seq_len % n` get one extra row.
    pub fn new(seq_len: usize, n_segments: usize) -> Result<Self> {
        ensure!(n_segments >= 1, Contract, "segment count must be at least 1");
        ensure!(
            n_segments <= seq_len,
            Contract,
            "{n_segments} segments over {seq_len} rows leaves a segment with zero tokens"
        );
        let base = seq_len / n_segments;
        let extra = seq_len % n_segments;
        let mut bounds = Vec::with_capacity(n_segments);
        let mut lo = 0;
        for i in 0..n_segments {
            let len = base + usize::from(i < extra);
            bounds.push((lo, lo + len));
            lo += len;
        }
        Ok(SegmentPlan { seq_len, bounds })
    }

    pub fn from_bounds(seq_len: usize, bounds: Vec<(usize, usize)>) -> Result<Self> {
        ensure!(!bounds.is_empty(), Contract, "a segment plan needs at least one segment");
        let mut expect = 0;
        for &(lo, hi) in &bounds {
            ensure!(lo == expect, Contract, "segment starting at {lo} leaves a gap or overlap at {expect}");
            ensure!(hi > lo, Contract, "segment [{lo}, {hi}) has zero tokens");
            expect = hi;
        }
        ensure!(expect == seq_len, Contract, "segments end at {expect}, sequence has {seq_len} rows");
        Ok(SegmentPlan { seq_len, bounds })
    }

    /// Eight segments from 1024 rows up, otherwise one.
    pub fn default_for(seq_len: usize) -> Self {
        let n = if seq_len >= 1024 { 8 } else { 1 };
        Self::new(seq_len.max(1), n.min(seq_len.max(1))).expect("valid default plan")
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn bounds(&self) -> &[(usize, usize)] {
        &self.bounds
    }

    pub fn max_segment_len(&self) -> usize {
        self.bounds.iter().map(|(a, b)| b - a).max().unwrap_or(0)
    }
}

fn validate<T: Element>(
    hidden: &[T],
    rows: usize,
    lm_head: &[T],
    hidden_dim: usize,
    vocab: usize,
    targets: &[usize],
) -> Result<usize> {
    ensure!(hidden.len() == rows * hidden_dim, Dimension, "hidden buffer is not {rows}x{hidden_dim}");
    ensure!(lm_head.len() == hidden_dim * vocab, Dimension, "lm head is not {hidden_dim}x{vocab}");
    ensure!(targets.len() == rows, Dimension, "{} targets for {rows} rows", targets.len());
    if let Some((pos, &bad)) = targets.iter().enumerate().find(|(_, &t)| t != IGNORE_INDEX && t >= vocab) {
        return Err(Error::Index(format!("target {bad} at position {pos} outside vocabulary of {vocab}")));
    }
    let count = targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
    ensure!(count > 0, Contract, "every target is ignored");
    Ok(count)
}

/// Turns a logits row into `(softmax - onehot) / count` in place and returns the row loss.
fn row_loss_and_dlogits<T: Element>(row: &mut [T], target: usize, inv_count: T, want_grad: bool) -> Option<f64> {
    if target == IGNORE_INDEX {
        if want_grad {
            row.fill(T::zero());
        }
        return None;
    }
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
    let lse = mx + sum.ln();
    let loss = (lse - row[target]).as_f64();
    if want_grad {
        for v in row.iter_mut() {
            *v = (*v - lse).exp() * inv_count;
        }
        row[target] -= inv_count;
    }
    Some(loss)
}

/// Processes rows `[lo, hi)`; logits live only inside this call.
#[allow(clippy::too_many_arguments)]
fn process_segment<T: Element>(
    hidden: &[T],
    lm_head: &[T],
    hidden_dim: usize,
    vocab: usize,
    targets: &[usize],
    (lo, hi): (usize, usize),
    inv_count: T,
    grad: Option<&mut [T]>,
    ledger: &mut Ledger,
) -> Result<f64> {
    let len = hi - lo;
    let mem = ledger.alloc(T::bytes(len * vocab), Category::Transient, "segment_logits");
    let mut logits = vec![T::zero(); len * vocab];
    gemm(
        MatRef::new(&hidden[lo * hidden_dim..hi * hidden_dim], len, hidden_dim),
        false,
        MatRef::new(lm_head, hidden_dim, vocab),
        false,
        T::one(),
        T::zero(),
        &mut logits,
        vocab,
    );
    let want_grad = grad.is_some();
    let mut total = 0.0;
    for r in 0..len {
        if let Some(l) = row_loss_and_dlogits(&mut logits[r * vocab..(r + 1) * vocab], targets[lo + r], inv_count, want_grad)
        {
            total += l;
        }
    }
    if let Some(grad) = grad {
        // grad rows = dlogits · lm_headᵀ
        gemm(
            MatRef::new(&logits, len, vocab),
            false,
            MatRef::new(lm_head, hidden_dim, vocab),
            true,
            T::one(),
            T::zero(),
            &mut grad[lo * hidden_dim..hi * hidden_dim],
            hidden_dim,
        );
    }
    drop(logits);
    ledger.free(mem)?;
    Ok(total)
}

/// Mean cross-entropy of `hidden · lm_head` against `targets` and, when
/// `want_grad`, its gradient with respect to `hidden`, segment by segment.
#[allow(clippy::too_many_arguments)]
pub fn segmented_loss_and_grad<T: Element>(
    hidden: &[T],
    rows: usize,
    lm_head: &[T],
    hidden_dim: usize,
    vocab: usize,
    targets: &[usize],
    plan: &SegmentPlan,
    want_grad: bool,
    ledger: &mut Ledger,
) -> Result<(T, Option<Vec<T>>)> {
    let order: Vec<usize> = (0..plan.len()).collect();
    segmented_loss_and_grad_ordered(hidden, rows, lm_head, hidden_dim, vocab, targets, plan, &order, want_grad, ledger)
}

/// As [`segmented_loss_and_grad`], visiting segments in `order`.
#[allow(clippy::too_many_arguments)]
pub fn segmented_loss_and_grad_ordered<T: Element>(
    hidden: &[T],
    rows: usize,
    lm_head: &[T],
    hidden_dim: usize,
    vocab: usize,
    targets: &[usize],
    plan: &SegmentPlan,
    order: &[usize],
    want_grad: bool,
    ledger: &mut Ledger,
) -> Result<(T, Option<Vec<T>>)> {
    let count = validate(hidden, rows, lm_head, hidden_dim, vocab, targets)?;
    ensure!(plan.seq_len() == rows, Dimension, "segment plan covers {} rows, hidden has {rows}", plan.seq_len());
    let mut seen = vec![false; plan.len()];
    for &i in order {
        ensure!(i < plan.len() && !seen[i], Contract, "segment order must be a permutation");
        seen[i] = true;
    }
    ensure!(order.len() == plan.len(), Contract, "segment order must be a permutation");
    let inv_count = T::of_f64(1.0 / count as f64);
    let mut grad = want_grad.then(|| vec![T::zero(); rows * hidden_dim]);
    let mut total = 0.0;
    for &i in order {
        total += process_segment(
            hidden,
            lm_head,
            hidden_dim,
            vocab,
            targets,
            plan.bounds()[i],
            inv_count,
            grad.as_deref_mut(),
            ledger,
        )?;
    }
    Ok((T::of_f64(total / count as f64), grad))
}

/// Reference path: materialises the full `rows×vocab` logits at once.
#[allow(clippy::too_many_arguments)]
pub fn unsegmented_loss_and_grad<T: Element>(
    hidden: &[T],
    rows: usize,
    lm_head: &[T],
    hidden_dim: usize,
    vocab: usize,
    targets: &[usize],
    ledger: &mut Ledger,
) -> Result<(T, Vec<T>)> {
    let count = validate(hidden, rows, lm_head, hidden_dim, vocab, targets)?;
    let inv_count = T::of_f64(1.0 / count as f64);
    let mem = ledger.alloc(T::bytes(rows * vocab), Category::Transient, "full_logits");
    let mut logits = vec![T::zero(); rows * vocab];
    gemm(
        MatRef::new(hidden, rows, hidden_dim),
        false,
        MatRef::new(lm_head, hidden_dim, vocab),
        false,
        T::one(),
        T::zero(),
        &mut logits,
        vocab,
    );
    let mut total = 0.0;
    for r in 0..rows {
        if let Some(l) = row_loss_and_dlogits(&mut logits[r * vocab..(r + 1) * vocab], targets[r], inv_count, true) {
            total += l;
        }
    }
    let mut grad = vec![T::zero(); rows * hidden_dim];
    gemm(
        MatRef::new(&logits, rows, vocab),
        false,
        MatRef::new(lm_head, hidden_dim, vocab),
        true,
        T::one(),
        T::zero(),
        &mut grad,
        hidden_dim,
    );
    drop(logits);
    ledger.free(mem)?;
    Ok((T::of_f64(total / count as f64), grad))
}

/// Tensor-level entry point: `hidden` is `s×h`, `lm_head` is `h×V`.
pub fn segmented_loss<T: Element>(
    hidden: &Tensor<T>,
    lm_head: &Tensor<T>,
    targets: &[usize],
    plan: &SegmentPlan,
    ledger: &mut Ledger,
) -> Result<(T, Tensor<T>)> {
    ensure!(hidden.shape().len() == 2 && lm_head.shape().len() == 2, Dimension, "expected matrices");
    let (rows, h) = (hidden.shape()[0], hidden.shape()[1]);
    let vocab = lm_head.shape()[1];
    let (loss, grad) =
        segmented_loss_and_grad(hidden.data(), rows, lm_head.data(), h, vocab, targets, plan, true, ledger)?;
    Ok((loss, Tensor::from_vec(&[rows, h], grad.expect("gradient requested"))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_partitions_rows() {
        let p = SegmentPlan::new(10, 3).unwrap();
        assert_eq!(p.bounds(), &[(0, 4), (4, 7), (7, 10)]);
        assert_eq!(p.max_segment_len(), 4);
        assert!(SegmentPlan::new(3, 4).is_err());
        assert!(SegmentPlan::new(3, 0).is_err());
        assert!(SegmentPlan::from_bounds(4, vec![(0, 2), (2, 2), (2, 4)]).is_err());
        assert!(SegmentPlan::from_bounds(4, vec![(0, 2), (3, 4)]).is_err());
        assert_eq!(SegmentPlan::default_for(2048).len(), 8);
        assert_eq!(SegmentPlan::default_for(512).len(), 1);
    }

    #[test]
    fn uniform_logits_give_log_vocab_for_any_segment_count() {
        let (s, h, v) = (16, 4, 32);
        let hidden = vec![0.0f64; s * h];
        let head = vec![0.3f64; h * v];
        let targets: Vec<usize> = (0..s).map(|i| (i * 7) % v).collect();
        for n in [1, 2, 4, 8] {
            let plan = SegmentPlan::new(s, n).unwrap();
            let (loss, _) =
                segmented_loss_and_grad(&hidden, s, &head, h, v, &targets, &plan, true, &mut Ledger::disabled()).unwrap();
            assert!((loss - (v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_target_is_an_index_error() {
        let plan = SegmentPlan::new(2, 1).unwrap();
        let r = segmented_loss_and_grad(&[0.0f32; 4], 2, &[0.0; 8], 2, 4, &[0, 4], &plan, false, &mut Ledger::disabled());
        assert!(matches!(r, Err(Error::Index(_))));
    }
}
