//! Token informativeness, block-wise elimination and per-layer thresholds.
//!
//! A token's informativeness is the sum of the pre-softmax scores later
//! tokens place on it. For elimination the score matrix is tiled into
//! `b×b` score blocks; a block's score is the largest head-aggregated
//! positive score inside it, and a token block's score is the sum of its
//! column of score blocks. Blocks scoring below the layer's threshold are
//! dropped from that layer's attention (or MLP) computation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{ensure, Error, Result};
use crate::ledger::{Category, Ledger};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Attention,
    Mlp,
}

impl Component {
    pub const ALL: [Component; 2] = [Component::Attention, Component::Mlp];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Attention => "attention",
            Component::Mlp => "mlp",
        })
    }
}

/// A sequence of `seq_len` tokens cut into blocks of `block_size`; the last
/// block may be short.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub seq_len: usize,
    pub block_size: usize,
}

impl BlockGrid {
    pub fn new(seq_len: usize, block_size: usize) -> Result<Self> {
        ensure!(block_size > 0, Contract, "block size must be positive");
        Ok(BlockGrid { seq_len, block_size })
    }

    pub fn n_blocks(&self) -> usize {
        self.seq_len.div_ceil(self.block_size)
    }

    pub fn token_range(&self, block: usize) -> std::ops::Range<usize> {
        let lo = block * self.block_size;
        lo..((block + 1) * self.block_size).min(self.seq_len)
    }
}

/// Lower-triangular block scores `I(B^S_mn)`, query block `m`, key block `n <= m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScoreMatrix {
    pub grid: BlockGrid,
    pub layer: usize,
    pub component: Component,
    /// Packed row-major lower triangle: entry `(m, n)` at `m(m+1)/2 + n`.
    scores: Vec<f64>,
}

impl BlockScoreMatrix {
    pub fn zeros(grid: BlockGrid) -> Self {
        let nb = grid.n_blocks();
        BlockScoreMatrix { grid, layer: 0, component: Component::Attention, scores: vec![0.0; nb * (nb + 1) / 2] }
    }

    pub fn from_packed(grid: BlockGrid, scores: Vec<f64>) -> Result<Self> {
        let nb = grid.n_blocks();
        ensure!(
            scores.len() == nb * (nb + 1) / 2,
            Dimension,
            "{} packed scores for {nb} blocks",
            scores.len()
        );
        ensure!(
            scores.iter().all(|v| v.is_finite() && *v >= 0.0),
            Contract,
            "block scores must be finite and non-negative"
        );
        Ok(BlockScoreMatrix { grid, layer: 0, component: Component::Attention, scores })
    }

    pub fn with_tag(mut self, layer: usize, component: Component) -> Self {
        self.layer = layer;
        self.component = component;
        self
    }

    pub fn n_blocks(&self) -> usize {
        self.grid.n_blocks()
    }

    /// Score of block `(m, n)`; zero above the diagonal.
    pub fn get(&self, m: usize, n: usize) -> f64 {
        if n > m {
            0.0
        } else {
            self.scores[m * (m + 1) / 2 + n]
        }
    }

    pub fn set(&mut self, m: usize, n: usize, v: f64) {
        assert!(n <= m, "block ({m}, {n}) is above the diagonal");
        self.scores[m * (m + 1) / 2 + n] = v;
    }

    pub fn packed(&self) -> &[f64] {
        &self.scores
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        BlockScoreMatrix { scores: self.scores.iter().map(|v| f(*v)).collect(), ..self.clone() }
    }
}

/// Strided read access to per-head query/key rows.
#[derive(Debug, Clone, Copy)]
pub struct HeadsView<'a, T> {
    data: &'a [T],
    pub n_heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
    head_stride: usize,
    row_stride: usize,
}

impl<'a, T: Element> HeadsView<'a, T> {
    /// A `[heads, seq, dim]` tensor.
    pub fn head_major(t: &'a Tensor<T>) -> Result<Self> {
        ensure!(t.shape().len() == 3, Dimension, "expected [heads, seq, dim], got {:?}", t.shape());
        let (n_heads, seq_len, head_dim) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        Ok(HeadsView { data: t.data(), n_heads, seq_len, head_dim, head_stride: seq_len * head_dim, row_stride: head_dim })
    }

    /// A `[seq, heads·dim]` buffer as produced by the projections.
    pub fn interleaved(data: &'a [T], seq_len: usize, n_heads: usize, head_dim: usize) -> Result<Self> {
        ensure!(
            data.len() == seq_len * n_heads * head_dim,
            Dimension,
            "buffer of {} is not {seq_len}x{n_heads}x{head_dim}",
            data.len()
        );
        Ok(HeadsView { data, n_heads, seq_len, head_dim, head_stride: head_dim, row_stride: n_heads * head_dim })
    }

    pub fn row(&self, head: usize, i: usize) -> &'a [T] {
        let o = head * self.head_stride + i * self.row_stride;
        &self.data[o..o + self.head_dim]
    }

    fn same_geometry(&self, other: &Self) -> bool {
        self.n_heads == other.n_heads && self.seq_len == other.seq_len && self.head_dim == other.head_dim
    }
}

fn dot<T: Element>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

/// `Σ_{h: S^h_ij > 0} S^h_ij / N_head` for one pair.
fn aggregated_pair<T: Element>(q: &HeadsView<'_, T>, k: &HeadsView<'_, T>, i: usize, j: usize) -> f64 {
    let mut acc = 0.0;
    for h in 0..q.n_heads {
        let s = dot(q.row(h, i), k.row(h, j));
        if s > 0.0 {
            acc += s;
        }
    }
    acc / q.n_heads as f64
}

/// Block scores computed tile by tile; the full score matrix never exists.
///
/// Auxiliary memory is one `b×b` tile, announced to `ledger` as transient.
pub fn exact_block_scores<T: Element>(
    q: HeadsView<'_, T>,
    k: HeadsView<'_, T>,
    block_size: usize,
    ledger: &mut Ledger,
) -> Result<BlockScoreMatrix> {
    ensure!(q.same_geometry(&k), Dimension, "query and key views differ in shape");
    ensure!(
        block_size > 0 && block_size <= q.seq_len,
        Contract,
        "block size {block_size} must be in 1..={}",
        q.seq_len
    );
    let grid = BlockGrid::new(q.seq_len, block_size)?;
    let nb = grid.n_blocks();
    let mut out = BlockScoreMatrix::zeros(grid);
    let mem = ledger.alloc(8 * block_size * block_size, Category::Transient, "score_tile");
    let mut tile = vec![0.0f64; block_size * block_size];
    for m in 0..nb {
        let rows = grid.token_range(m);
        for n in 0..=m {
            let cols = grid.token_range(n);
            tile.fill(0.0);
            for h in 0..q.n_heads {
                for (ti, i) in rows.clone().enumerate() {
                    let qi = q.row(h, i);
                    for (tj, j) in cols.clone().enumerate() {
                        if j > i {
                            break;
                        }
                        let s = dot(qi, k.row(h, j));
                        if s > 0.0 {
                            tile[ti * block_size + tj] += s;
                        }
                    }
                }
            }
            let mut best = 0.0f64;
            for (ti, i) in rows.clone().enumerate() {
                for (tj, j) in cols.clone().enumerate() {
                    if j > i {
                        break;
                    }
                    best = best.max(tile[ti * block_size + tj] / q.n_heads as f64);
                }
            }
            out.set(m, n, best);
        }
    }
    ledger.free(mem)?;
    Ok(out)
}

/// [`exact_block_scores`] on `[heads, seq, dim]` tensors.
pub fn exact_block_scores_tensor<T: Element>(q: &Tensor<T>, k: &Tensor<T>, block_size: usize) -> Result<BlockScoreMatrix> {
    ensure!(q.shape() == k.shape(), Dimension, "Q {:?} and K {:?} differ", q.shape(), k.shape());
    exact_block_scores(HeadsView::head_major(q)?, HeadsView::head_major(k)?, block_size, &mut Ledger::disabled())
}

/// Head-aggregated positive scores for every causal pair, `s×s` row-major
/// (query row, key column); entries above the diagonal are zero.
pub fn aggregated_scores<T: Element>(q: HeadsView<'_, T>, k: HeadsView<'_, T>) -> Result<Vec<f64>> {
    ensure!(q.same_geometry(&k), Dimension, "query and key views differ in shape");
    let s = q.seq_len;
    let mut out = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..=i {
            out[i * s + j] = aggregated_pair(&q, &k, i, j);
        }
    }
    Ok(out)
}

/// `I(T_j) = Σ_{i > j} S_ij` over causally valid pairs, excluding the token itself.
pub fn token_informativeness<T: Element>(q: HeadsView<'_, T>, k: HeadsView<'_, T>) -> Result<Vec<f64>> {
    ensure!(q.same_geometry(&k), Dimension, "query and key views differ in shape");
    let s = q.seq_len;
    let mut out = vec![0.0; s];
    for (j, o) in out.iter_mut().enumerate() {
        for i in j + 1..s {
            *o += aggregated_pair(&q, &k, i, j);
        }
    }
    Ok(out)
}

/// `I(B^T_n) = Σ_{m >= n} I(B^S_mn)`.
pub fn token_block_scores(m: &BlockScoreMatrix) -> Vec<f64> {
    let nb = m.n_blocks();
    (0..nb).map(|n| (n..nb).map(|q| m.get(q, n)).sum()).collect()
}

/// Retained token blocks of one layer component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityPattern {
    pub layer: usize,
    pub component: Component,
    pub grid: BlockGrid,
    blocks: Vec<usize>,
    tokens: Vec<usize>,
}

impl SparsityPattern {
    pub fn from_blocks(grid: BlockGrid, blocks: Vec<usize>) -> Result<Self> {
        for w in blocks.windows(2) {
            ensure!(w[0] < w[1], Contract, "retained blocks must be sorted and unique");
        }
        if let Some(&b) = blocks.last() {
            ensure!(b < grid.n_blocks(), Index, "block {b} outside grid of {}", grid.n_blocks());
        }
        let tokens = blocks.iter().flat_map(|&b| grid.token_range(b)).collect();
        Ok(SparsityPattern { layer: 0, component: Component::Attention, grid, blocks, tokens })
    }

    pub fn all(grid: BlockGrid) -> Self {
        Self::from_blocks(grid, (0..grid.n_blocks()).collect()).expect("full block list is valid")
    }

    pub fn none(grid: BlockGrid) -> Self {
        Self::from_blocks(grid, Vec::new()).expect("empty block list is valid")
    }

    pub fn with_tag(mut self, layer: usize, component: Component) -> Self {
        self.layer = layer;
        self.component = component;
        self
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn is_full(&self) -> bool {
        self.tokens.len() == self.grid.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Share of tokens retained.
    pub fn retained_fraction(&self) -> f64 {
        if self.grid.seq_len == 0 {
            1.0
        } else {
            self.tokens.len() as f64 / self.grid.seq_len as f64
        }
    }

    pub fn contains_block(&self, b: usize) -> bool {
        self.blocks.binary_search(&b).is_ok()
    }
}

/// Keeps block `n` iff `scores[n] >= threshold`; `sinks` are always kept.
pub fn eliminate(scores: &[f64], threshold: f64, grid: BlockGrid, sinks: &[usize]) -> Result<SparsityPattern> {
    ensure!(
        scores.len() == grid.n_blocks(),
        Dimension,
        "{} block scores for a grid of {} blocks",
        scores.len(),
        grid.n_blocks()
    );
    ensure!(scores.iter().all(|v| v.is_finite()), Contract, "block scores must be finite");
    let blocks = scores
        .iter()
        .enumerate()
        .filter(|(n, s)| **s >= threshold || sinks.contains(n))
        .map(|(n, _)| n)
        .collect();
    SparsityPattern::from_blocks(grid, blocks)
}

/// Per-token mean absolute MLP inner activation (`rows×d_ff`).
pub fn mlp_token_informativeness<T: Element>(inner: &[T], rows: usize, d_ff: usize) -> Result<Vec<f64>> {
    ensure!(inner.len() == rows * d_ff && d_ff > 0, Dimension, "inner activation is not {rows}x{d_ff}");
    Ok(inner.chunks(d_ff).map(|r| r.iter().map(|v| v.as_f64().abs()).sum::<f64>() / d_ff as f64).collect())
}

/// Block scores for the MLP: the largest per-token score in each block,
/// stored on the diagonal so column sums give the block scores directly.
pub fn mlp_block_scores(token_scores: &[f64], grid: BlockGrid) -> Result<BlockScoreMatrix> {
    ensure!(token_scores.len() == grid.seq_len, Dimension, "{} token scores for {} tokens", token_scores.len(), grid.seq_len);
    let mut m = BlockScoreMatrix::zeros(grid).with_tag(0, Component::Mlp);
    for b in 0..grid.n_blocks() {
        let best = grid.token_range(b).map(|t| token_scores[t]).fold(0.0, f64::max);
        m.set(b, b, best);
    }
    Ok(m)
}

/// Finite-difference step for threshold tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Epsilon {
    Fixed { value: f64 },
    /// `frac · |T| + floor`
    Relative { frac: f64, floor: f64 },
}

impl Epsilon {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Epsilon::Fixed { value } => value,
            Epsilon::Relative { frac, floor } => frac * t.abs() + floor,
        }
    }
}

impl Default for Epsilon {
    fn default() -> Self {
        Epsilon::Relative { frac: 0.05, floor: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneParams {
    pub epsilon: Epsilon,
    pub eta: f64,
    pub rounds: usize,
    /// Clamp each update to this fraction of `|T|` (none: unclamped).
    pub max_relative_step: Option<f64>,
}

impl Default for TuneParams {
    fn default() -> Self {
        TuneParams { epsilon: Epsilon::default(), eta: 1.0, rounds: 1, max_relative_step: Some(0.1) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub layer: usize,
    pub component: Component,
    pub value: f64,
}

/// One threshold per (layer, component).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ThresholdSet {
    entries: Vec<ThresholdEntry>,
    #[serde(default)]
    pub tuning: TuneParams,
}

impl ThresholdSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Same value everywhere, e.g. `-inf` to retain every block.
    pub fn uniform(n_layers: usize, value: f64) -> Self {
        let mut t = Self::new();
        for l in 0..n_layers {
            for c in Component::ALL {
                t.set(l, c, value);
            }
        }
        t
    }

    pub fn get(&self, layer: usize, component: Component) -> Option<f64> {
        self.entries.iter().find(|e| e.layer == layer && e.component == component).map(|e| e.value)
    }

    pub fn set(&mut self, layer: usize, component: Component, value: f64) {
        match self.entries.iter_mut().find(|e| e.layer == layer && e.component == component) {
            Some(e) => e.value = value,
            None => {
                self.entries.push(ThresholdEntry { layer, component, value });
                self.entries.sort_by_key(|e| (e.layer, e.component));
            }
        }
    }

    pub fn entries(&self) -> &[ThresholdEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Threshold initialisation: the mean token-block score observed per
/// (layer, component), pooled over every profiled batch.
pub fn init_thresholds(profile: &[BlockScoreMatrix]) -> Result<ThresholdSet> {
    ensure!(!profile.is_empty(), Contract, "threshold initialisation needs at least one profiled batch");
    let mut pooled: BTreeMap<(usize, Component), (f64, usize)> = BTreeMap::new();
    for m in profile {
        let e = pooled.entry((m.layer, m.component)).or_default();
        for s in token_block_scores(m) {
            e.0 += s;
            e.1 += 1;
        }
    }
    let mut out = ThresholdSet::new();
    for ((layer, component), (sum, count)) in pooled {
        ensure!(count > 0, Contract, "layer {layer} {component} has no token blocks");
        out.set(layer, component, sum / count as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRecord {
    pub round: usize,
    pub layer: usize,
    pub component: Component,
    pub before: f64,
    pub after: f64,
    pub gradient: f64,
    pub acc_plus: f64,
    pub acc_minus: f64,
}

/// Threshold fine-tuning by central finite differences of `acc`.
///
/// For each round and each threshold in turn (others held at their current
/// values): `G = (acc(T+ε) − acc(T−ε)) / 2ε`, `T ← T + η·G`.
pub fn tune_thresholds<F>(mut acc: F, thresholds: &ThresholdSet, params: &TuneParams) -> Result<(ThresholdSet, Vec<TuneRecord>)>
where
    F: FnMut(&ThresholdSet) -> Result<f64>,
{
    let mut current = thresholds.clone();
    current.tuning = params.clone();
    let mut log = Vec::new();
    let keys: Vec<(usize, Component)> = current.entries.iter().map(|e| (e.layer, e.component)).collect();
    for round in 0..params.rounds {
        for &(layer, component) in &keys {
            let t = current.get(layer, component).expect("key taken from the set");
            let eps = params.epsilon.at(t);
            ensure!(eps > 0.0 && eps.is_finite(), Contract, "finite-difference step must be positive, got {eps}");
            let mut probe = current.clone();
            probe.set(layer, component, t + eps);
            let plus = acc(&probe)?;
            probe.set(layer, component, t - eps);
            let minus = acc(&probe)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "acc is not finite while tuning layer {layer} {component} (round {round}): acc(T+ε)={plus}, acc(T−ε)={minus}"
                )));
            }
            let g = (plus - minus) / (2.0 * eps);
            let mut step = params.eta * g;
            if let Some(frac) = params.max_relative_step {
                let cap = frac * t.abs();
                step = step.clamp(-cap, cap);
            }
            let next = t + step;
            current.set(layer, component, next);
            log.push(TuneRecord { round, layer, component, before: t, after: next, gradient: g, acc_plus: plus, acc_minus: minus });
        }
    }
    Ok((current, log))
}

/// Share of entries below `frac · max`, over entries where `mask` is true.
///
/// `Ok(None)` when the maximum is not positive (ratio undefined).
pub fn sparsity_ratio(values: &[f64], mask: Option<&[bool]>, frac: f64) -> Result<Option<f64>> {
    ensure!(frac > 0.0 && frac < 1.0, Contract, "fraction must lie in (0, 1), got {frac}");
    if let Some(m) = mask {
        ensure!(m.len() == values.len(), Dimension, "mask of {} for {} values", m.len(), values.len());
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let selected: Vec<f64> = values.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, v)| *v).collect();
    ensure!(!selected.is_empty(), Contract, "sparsity ratio of an empty set");
    let max = selected.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        return Ok(None);
    }
    let cut = frac * max;
    Ok(Some(selected.iter().filter(|v| **v < cut).count() as f64 / selected.len() as f64))
}
