//! Low-rank sparsity-pattern predictors.
//!
//! Each layer owns a query-side and a key-side predictor. Both map block
//! embeddings through `W1 → ReLU → W2 → ReLU → W3` to `d_pred`-dimensional
//! vectors; the dot product of a query-block vector with a key-block vector
//! approximates the (log1p-scaled) exact block score. Neurons that are
//! almost always zero after a ReLU can be pruned to shrink the predictor.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::element::{matmul, matmul_nt, Element};
use crate::error::{ensure, Error, Result};
use crate::optim::Adam;
use crate::sparsity::{eliminate, token_block_scores, BlockGrid, BlockScoreMatrix, Component, SparsityPattern, ThresholdSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Key,
}

/// How a block's representative vector is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean of the block's token embeddings, then the network.
    #[default]
    BlockMean,
    /// First two stages per token, block mean before the last projection.
    TokenThenMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub r1: usize,
    pub r2: usize,
    pub d_pred: usize,
    pub pooling: Pooling,
}

impl PredictorConfig {
    /// `r1 = r2 = h/4`, `d_pred = 16`.
    pub fn for_hidden(h: usize) -> Self {
        PredictorConfig { r1: (h / 4).max(1), r2: (h / 4).max(1), d_pred: 16, pooling: Pooling::BlockMean }
    }
}

/// One three-matrix predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor<T> {
    pub role: Role,
    pub layer: usize,
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
    pub w3: Tensor<T>,
    active1: Vec<bool>,
    active2: Vec<bool>,
    zeros1: Vec<u64>,
    zeros2: Vec<u64>,
    observed: u64,
}

/// Post-ReLU activations of the two intermediate stages.
#[derive(Debug, Clone)]
pub struct Intermediates<T> {
    pub h1: Vec<T>,
    pub h2: Vec<T>,
    pub rows: usize,
}

impl<T: Element> Predictor<T> {
    pub fn new<R: Rng + ?Sized>(role: Role, layer: usize, hidden: usize, cfg: &PredictorConfig, rng: &mut R) -> Self {
        let w1 = Tensor::randn(&[hidden, cfg.r1], (2.0 / hidden as f64).sqrt(), rng);
        let w2 = Tensor::randn(&[cfg.r1, cfg.r2], (2.0 / cfg.r1 as f64).sqrt(), rng);
        let w3 = Tensor::randn(&[cfg.r2, cfg.d_pred], (1.0 / cfg.r2 as f64).sqrt(), rng);
        Self::from_weights(role, layer, w1, w2, w3).expect("shapes built from one config")
    }

    pub fn from_weights(role: Role, layer: usize, w1: Tensor<T>, w2: Tensor<T>, w3: Tensor<T>) -> Result<Self> {
        ensure!(
            w1.shape().len() == 2 && w2.shape().len() == 2 && w3.shape().len() == 2,
            Dimension,
            "predictor weights must be matrices"
        );
        ensure!(
            w1.cols() == w2.rows() && w2.cols() == w3.rows(),
            Dimension,
            "predictor chain {:?} · {:?} · {:?} does not compose",
            w1.shape(),
            w2.shape(),
            w3.shape()
        );
        let (r1, r2) = (w1.cols(), w2.cols());
        Ok(Predictor {
            role,
            layer,
            w1: w1.with_requires_grad(true),
            w2: w2.with_requires_grad(true),
            w3: w3.with_requires_grad(true),
            active1: vec![true; r1],
            active2: vec![true; r2],
            zeros1: vec![0; r1],
            zeros2: vec![0; r2],
            observed: 0,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn r1(&self) -> usize {
        self.w1.cols()
    }

    pub fn r2(&self) -> usize {
        self.w2.cols()
    }

    pub fn d_pred(&self) -> usize {
        self.w3.cols()
    }

    pub fn active_counts(&self) -> (usize, usize) {
        (self.active1.iter().filter(|a| **a).count(), self.active2.iter().filter(|a| **a).count())
    }

    pub fn active_masks(&self) -> (&[bool], &[bool]) {
        (&self.active1, &self.active2)
    }

    /// Parameters in the unpruned network.
    pub fn full_param_count(&self) -> usize {
        self.hidden() * self.r1() + self.r1() * self.r2() + self.r2() * self.d_pred()
    }

    /// Parameters left after removing pruned rows and columns.
    pub fn param_count(&self) -> usize {
        let (a1, a2) = self.active_counts();
        self.hidden() * a1 + a1 * a2 + a2 * self.d_pred()
    }

    pub fn zero_counts(&self) -> (&[u64], &[u64], u64) {
        (&self.zeros1, &self.zeros2, self.observed)
    }

    /// Restores counters and masks, e.g. from a checkpoint.
    pub fn restore_state(&mut self, active1: Vec<bool>, active2: Vec<bool>, zeros1: Vec<u64>, zeros2: Vec<u64>, observed: u64) -> Result<()> {
        ensure!(
            active1.len() == self.r1() && zeros1.len() == self.r1() && active2.len() == self.r2() && zeros2.len() == self.r2(),
            Dimension,
            "predictor state does not match ranks {}x{}",
            self.r1(),
            self.r2()
        );
        self.active1 = active1;
        self.active2 = active2;
        self.zeros1 = zeros1;
        self.zeros2 = zeros2;
        self.observed = observed;
        self.apply_masks();
        Ok(())
    }

    /// Zeroes the weights feeding into and out of every pruned neuron.
    pub fn apply_masks(&mut self) {
        let (h, r1, r2, d) = (self.hidden(), self.r1(), self.r2(), self.d_pred());
        for j in (0..r1).filter(|j| !self.active1[*j]) {
            for i in 0..h {
                self.w1.data_mut()[i * r1 + j] = T::zero();
            }
            self.w2.data_mut()[j * r2..(j + 1) * r2].fill(T::zero());
        }
        for j in (0..r2).filter(|j| !self.active2[*j]) {
            for i in 0..r1 {
                self.w2.data_mut()[i * r2 + j] = T::zero();
            }
            self.w3.data_mut()[j * d..(j + 1) * d].fill(T::zero());
        }
    }

    /// The two ReLU stages on `rows×h` input.
    pub fn intermediates(&self, x: &[T], rows: usize) -> Result<Intermediates<T>> {
        ensure!(x.len() == rows * self.hidden(), Dimension, "predictor input of {} is not {rows}x{}", x.len(), self.hidden());
        let relu_masked = |mut v: Vec<T>, mask: &[bool]| {
            let w = mask.len();
            for (i, e) in v.iter_mut().enumerate() {
                if !mask[i % w] || *e < T::zero() {
                    *e = T::zero();
                }
            }
            v
        };
        let h1 = relu_masked(matmul(x, self.w1.data(), rows, self.hidden(), self.r1()), &self.active1);
        let h2 = relu_masked(matmul(&h1, self.w2.data(), rows, self.r1(), self.r2()), &self.active2);
        Ok(Intermediates { h1, h2, rows })
    }

    /// Output vectors for `rows×h` input (`rows×d_pred`).
    pub fn forward(&self, x: &[T], rows: usize) -> Result<Vec<T>> {
        let im = self.intermediates(x, rows)?;
        Ok(matmul(&im.h2, self.w3.data(), rows, self.r2(), self.d_pred()))
    }

    /// One vector per block of `x` (`s×h`) under `pooling`.
    pub fn embed_blocks(&self, x: &Tensor<T>, block: usize, pooling: Pooling) -> Result<Tensor<T>> {
        let nb = x.rows().div_ceil(block.max(1));
        match pooling {
            Pooling::BlockMean => {
                let xb = block_embed(x, block)?;
                Tensor::from_vec(&[nb, self.d_pred()], self.forward(xb.data(), nb)?)
            }
            Pooling::TokenThenMean => {
                let im = self.intermediates(x.data(), x.rows())?;
                let h2 = Tensor::from_vec(&[x.rows(), self.r2()], im.h2)?;
                let pooled = block_embed(&h2, block)?;
                Tensor::from_vec(&[nb, self.d_pred()], matmul(pooled.data(), self.w3.data(), nb, self.r2(), self.d_pred()))
            }
        }
    }

    /// Adds, per intermediate neuron, the number of input rows on which its
    /// post-ReLU output was exactly zero.
    pub fn observe(&mut self, im: &Intermediates<T>) {
        let (r1, r2) = (self.r1(), self.r2());
        for row in im.h1.chunks(r1) {
            for (j, v) in row.iter().enumerate() {
                if *v == T::zero() {
                    self.zeros1[j] += 1;
                }
            }
        }
        for row in im.h2.chunks(r2) {
            for (j, v) in row.iter().enumerate() {
                if *v == T::zero() {
                    self.zeros2[j] += 1;
                }
            }
        }
        self.observed += im.rows as u64;
    }

    fn zero_rate(&self, stage: usize, j: usize) -> f64 {
        if self.observed == 0 {
            return 0.0;
        }
        let z = if stage == 0 { self.zeros1[j] } else { self.zeros2[j] };
        z as f64 / self.observed as f64
    }

    fn remove(&mut self, stage: usize, j: usize) {
        if stage == 0 {
            self.active1[j] = false;
        } else {
            self.active2[j] = false;
        }
        self.apply_masks();
    }
}

/// Mean of each block of `b` rows; a ragged last block averages what it has.
pub fn block_embed<T: Element>(x: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
    ensure!(x.shape().len() == 2, Dimension, "block_embed expects a matrix, got {:?}", x.shape());
    ensure!(b > 0, Contract, "block size must be positive");
    let (rows, cols) = (x.rows(), x.cols());
    let nb = rows.div_ceil(b);
    let mut out = vec![T::zero(); nb * cols];
    for blk in 0..nb {
        let (lo, hi) = (blk * b, ((blk + 1) * b).min(rows));
        let dst = &mut out[blk * cols..(blk + 1) * cols];
        for r in lo..hi {
            for (d, v) in dst.iter_mut().zip(x.row(r)) {
                *d += *v;
            }
        }
        let inv = T::of_f64(1.0 / (hi - lo) as f64);
        for d in dst {
            *d *= inv;
        }
    }
    Tensor::from_vec(&[nb, cols], out)
}

/// Lower-triangular dot products of query-block and key-block vectors,
/// negative values clamped to zero.
pub fn scores_from_embeddings<T: Element>(eq: &Tensor<T>, ek: &Tensor<T>, grid: BlockGrid) -> Result<BlockScoreMatrix> {
    ensure!(eq.cols() == ek.cols(), Contract, "predictor output dims differ: {} vs {}", eq.cols(), ek.cols());
    let nb = grid.n_blocks();
    ensure!(eq.rows() == nb && ek.rows() == nb, Dimension, "{} and {} block vectors for {nb} blocks", eq.rows(), ek.rows());
    let full = matmul_nt(eq.data(), ek.data(), nb, eq.cols(), nb);
    let mut packed = Vec::with_capacity(nb * (nb + 1) / 2);
    for m in 0..nb {
        for n in 0..=m {
            packed.push(full[m * nb + n].as_f64().max(0.0));
        }
    }
    BlockScoreMatrix::from_packed(grid, packed)
}

/// `Î(B^S_mn) = Î(B^Q_m)·Î(B^K_n)` from block embeddings `x_blocks`.
pub fn predict_scores<T: Element>(pq: &Predictor<T>, pk: &Predictor<T>, x_blocks: &Tensor<T>, grid: BlockGrid) -> Result<BlockScoreMatrix> {
    ensure!(pq.d_pred() == pk.d_pred(), Contract, "predictor output dims differ: {} vs {}", pq.d_pred(), pk.d_pred());
    let nb = x_blocks.rows();
    let eq = Tensor::from_vec(&[nb, pq.d_pred()], pq.forward(x_blocks.data(), nb)?)?;
    let ek = Tensor::from_vec(&[nb, pk.d_pred()], pk.forward(x_blocks.data(), nb)?)?;
    scores_from_embeddings(&eq, &ek, grid)
}

/// Increments `p`'s zero counters over the rows of `x`.
pub fn track_zero_frequency<T: Element>(p: &mut Predictor<T>, x: &Tensor<T>) -> Result<()> {
    let im = p.intermediates(x.data(), x.rows())?;
    p.observe(&im);
    Ok(())
}

/// What elastic pruning aims for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PruneTarget {
    /// Share of intermediate neurons left active.
    ActiveFraction(f64),
    /// Share of the unpruned parameter count left.
    ParamFraction(f64),
}

impl PruneTarget {
    fn fraction(&self) -> f64 {
        match *self {
            PruneTarget::ActiveFraction(f) | PruneTarget::ParamFraction(f) => f,
        }
    }

    fn met<T: Element>(&self, p: &Predictor<T>) -> bool {
        match *self {
            PruneTarget::ActiveFraction(f) => {
                let (a1, a2) = p.active_counts();
                (a1 + a2) as f64 <= f * (p.r1() + p.r2()) as f64 + 1e-9
            }
            PruneTarget::ParamFraction(f) => p.param_count() as f64 <= f * p.full_param_count() as f64 + 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    /// `(stage, neuron)` in removal order; stage 0 feeds `W2`, stage 1 feeds `W3`.
    pub removed: Vec<(usize, usize)>,
    pub params_before: usize,
    pub params_after: usize,
}

/// Greedily masks the neuron with the highest zero frequency (ties: first
/// stage, then lower index) until `target` holds or `max_removals` is used.
pub fn prune_neurons<T: Element>(p: &mut Predictor<T>, target: PruneTarget, max_removals: usize) -> Result<PruneOutcome> {
    let f = target.fraction();
    ensure!((0.0..=1.0).contains(&f), Contract, "prune fraction must lie in [0, 1], got {f}");
    let floor = match target {
        PruneTarget::ActiveFraction(_) => 2.0 / (p.r1() + p.r2()) as f64,
        PruneTarget::ParamFraction(_) => (p.hidden() + 1 + p.d_pred()) as f64 / p.full_param_count() as f64,
    };
    ensure!(
        f + 1e-9 >= floor,
        Contract,
        "prune target {f} would remove every neuron of a stage (minimum {floor:.4})"
    );
    let before = p.param_count();
    let mut removed = Vec::new();
    while !target.met(p) && removed.len() < max_removals {
        let (a1, a2) = p.active_counts();
        let mut best: Option<(usize, usize, f64)> = None;
        for (stage, active, count) in [(0, &p.active1, a1), (1, &p.active2, a2)] {
            if count <= 1 {
                continue;
            }
            for (j, _) in active.iter().enumerate().filter(|(_, a)| **a) {
                let rate = p.zero_rate(stage, j);
                if best.is_none_or(|(_, _, r)| rate > r) {
                    best = Some((stage, j, rate));
                }
            }
        }
        let Some((stage, j, _)) = best else {
            return Err(Error::Contract("pruning target unreachable without emptying a stage".into()));
        };
        p.remove(stage, j);
        removed.push((stage, j));
    }
    Ok(PruneOutcome { removed, params_before: before, params_after: p.param_count() })
}

/// Prunes `p` until `target` is reached.
pub fn elastic_prune<T: Element>(p: &mut Predictor<T>, target: PruneTarget) -> Result<PruneOutcome> {
    prune_neurons(p, target, usize::MAX)
}

/// The query/key predictor pair of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorPair<T> {
    pub q: Predictor<T>,
    pub k: Predictor<T>,
}

impl<T: Element> PredictorPair<T> {
    pub fn param_count(&self) -> usize {
        self.q.param_count() + self.k.param_count()
    }

    /// Predicted block scores in the training (log1p) scale.
    pub fn raw_scores(&self, x: &Tensor<T>, grid: BlockGrid, pooling: Pooling) -> Result<BlockScoreMatrix> {
        ensure!(x.rows() == grid.seq_len, Dimension, "{} rows for a grid of {} tokens", x.rows(), grid.seq_len);
        let eq = self.q.embed_blocks(x, grid.block_size, pooling)?;
        let ek = self.k.embed_blocks(x, grid.block_size, pooling)?;
        scores_from_embeddings(&eq, &ek, grid)
    }

    /// Predicted block scores mapped back to the exact-score scale.
    pub fn scores(&self, x: &Tensor<T>, grid: BlockGrid, pooling: Pooling) -> Result<BlockScoreMatrix> {
        Ok(self.raw_scores(x, grid, pooling)?.map(f64::exp_m1))
    }
}

/// Predictor pairs for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSet<T> {
    pub config: PredictorConfig,
    pub layers: Vec<PredictorPair<T>>,
}

impl<T: Element> PredictorSet<T> {
    pub fn new<R: Rng + ?Sized>(n_layers: usize, hidden: usize, config: PredictorConfig, rng: &mut R) -> Self {
        let layers = (0..n_layers)
            .map(|l| PredictorPair {
                q: Predictor::new(Role::Query, l, hidden, &config, rng),
                k: Predictor::new(Role::Key, l, hidden, &config, rng),
            })
            .collect();
        PredictorSet { config, layers }
    }

    /// Pairs that compute rank-`rank` linear maps `x·A·B·C` exactly, each
    /// linear unit carried by a `(+, -)` pair of ReLU neurons. Used as a
    /// realisable teacher; needs `r1, r2 >= 2·rank`.
    pub fn linear<R: Rng + ?Sized>(n_layers: usize, hidden: usize, config: PredictorConfig, rank: usize, rng: &mut R) -> Result<Self> {
        ensure!(
            rank > 0 && config.r1 >= 2 * rank && config.r2 >= 2 * rank,
            Contract,
            "rank {rank} needs r1, r2 >= {}, got {}x{}",
            2 * rank,
            config.r1,
            config.r2
        );
        let mut side = |role, layer| -> Result<Predictor<T>> {
            let (r1, r2, d) = (config.r1, config.r2, config.d_pred);
            let (o1, o2) = (r1 / 2, r2 / 2);
            let a = Tensor::<T>::randn(&[hidden, rank], 1.0 / (hidden as f64).sqrt(), rng);
            let b = Tensor::<T>::randn(&[rank, rank], 1.0 / (rank as f64).sqrt(), rng);
            let c = Tensor::<T>::randn(&[rank, d], 1.0 / (rank as f64).sqrt(), rng);
            let mut w1 = Tensor::zeros(&[hidden, r1]);
            let mut w2 = Tensor::zeros(&[r1, r2]);
            let mut w3 = Tensor::zeros(&[r2, d]);
            for i in 0..hidden {
                for j in 0..rank {
                    let v = a.data()[i * rank + j];
                    w1.data_mut()[i * r1 + j] = v;
                    w1.data_mut()[i * r1 + o1 + j] = -v;
                }
            }
            for i in 0..rank {
                for j in 0..rank {
                    let v = b.data()[i * rank + j];
                    w2.data_mut()[i * r2 + j] = v;
                    w2.data_mut()[i * r2 + o2 + j] = -v;
                    w2.data_mut()[(o1 + i) * r2 + j] = -v;
                    w2.data_mut()[(o1 + i) * r2 + o2 + j] = v;
                }
                for j in 0..d {
                    let v = c.data()[i * d + j];
                    w3.data_mut()[i * d + j] = v;
                    w3.data_mut()[(o2 + i) * d + j] = -v;
                }
            }
            Predictor::from_weights(role, layer, w1, w2, w3)
        };
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            layers.push(PredictorPair { q: side(Role::Query, l)?, k: side(Role::Key, l)? });
        }
        Ok(PredictorSet { config, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(PredictorPair::param_count).sum()
    }

    pub fn full_param_count(&self) -> usize {
        self.layers.iter().map(|p| p.q.full_param_count() + p.k.full_param_count()).sum()
    }

    /// Every weight tensor with a stable name, layer by layer.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, pair) in self.layers.iter().enumerate() {
            for (side, p) in [("q", &pair.q), ("k", &pair.k)] {
                for (w, t) in [("w1", &p.w1), ("w2", &p.w2), ("w3", &p.w3)] {
                    out.push((format!("predictor.{l}.{side}.{w}"), t));
                }
            }
        }
        out
    }

    /// Predicted token-block scores of layer `layer` for input `x`.
    pub fn token_block_scores(&self, layer: usize, x: &Tensor<T>, grid: BlockGrid) -> Result<Vec<f64>> {
        let pair = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Index(format!("no predictor for layer {layer}")))?;
        Ok(token_block_scores(&pair.scores(x, grid, self.config.pooling)?))
    }
}

/// Exact-score training example for one layer.
#[derive(Debug, Clone)]
pub struct TeacherSample<T> {
    pub layer: usize,
    /// Layer input, `s×h`.
    pub x: Tensor<T>,
    /// Exact attention block scores.
    pub scores: BlockScoreMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub target: PruneTarget,
    /// Prune after every `every` epochs.
    pub every: usize,
    /// Share of the remaining active neurons removed per event.
    pub step_fraction: f64,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule { target: PruneTarget::ParamFraction(0.5), every: 20, step_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Teacher samples per update; an epoch is one shuffled pass.
    pub batch_size: usize,
    pub seed: u64,
    pub prune: Option<PruneSchedule>,
    /// Evaluate recall every `eval_every` epochs (and after the last).
    pub eval_every: usize,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        PredictorTrainConfig { epochs: 400, lr: 3e-3, batch_size: 4, seed: 0, prune: None, eval_every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainingRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Validation recall; `None` on epochs without evaluation.
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub param_count: usize,
}

/// `|predicted ∩ exact| / |exact|`; 1 when `exact` keeps nothing.
pub fn recall(predicted: &SparsityPattern, exact: &SparsityPattern) -> Result<f64> {
    let (hit, total) = overlap(predicted, exact)?;
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

/// `|predicted ∩ exact| / |predicted|`; 1 when `predicted` keeps nothing.
pub fn precision(predicted: &SparsityPattern, exact: &SparsityPattern) -> Result<f64> {
    let (hit, _) = overlap(predicted, exact)?;
    let n = predicted.blocks().len();
    Ok(if n == 0 { 1.0 } else { hit as f64 / n as f64 })
}

fn overlap(predicted: &SparsityPattern, exact: &SparsityPattern) -> Result<(usize, usize)> {
    ensure!(
        predicted.grid == exact.grid,
        Contract,
        "patterns over different grids: {:?} vs {:?}",
        predicted.grid,
        exact.grid
    );
    let hit = exact.blocks().iter().filter(|b| predicted.contains_block(**b)).count();
    Ok((hit, exact.blocks().len()))
}

/// Mean exact token-block score per layer over `samples` (threshold step 1).
pub fn exact_thresholds<T: Element>(samples: &[TeacherSample<T>]) -> Result<ThresholdSet> {
    let mats: Vec<BlockScoreMatrix> = samples.iter().map(|s| s.scores.clone().with_tag(s.layer, Component::Attention)).collect();
    crate::sparsity::init_thresholds(&mats)
}

/// Threshold step 1 applied to predicted scores.
pub fn predicted_thresholds<T: Element>(set: &PredictorSet<T>, samples: &[TeacherSample<T>]) -> Result<ThresholdSet> {
    let mats = samples
        .iter()
        .map(|s| Ok(set.layers[s.layer].scores(&s.x, s.scores.grid, set.config.pooling)?.with_tag(s.layer, Component::Attention)))
        .collect::<Result<Vec<_>>>()?;
    crate::sparsity::init_thresholds(&mats)
}

/// Carries threshold tuning over to predicted scores: each predicted
/// attention threshold is scaled by `tuned / init` of its exact counterpart.
/// MLP entries are copied from `tuned`, since MLP patterns stay exact.
pub fn transfer_thresholds(predicted_init: &ThresholdSet, exact_init: &ThresholdSet, tuned: &ThresholdSet) -> Result<ThresholdSet> {
    let mut out = tuned.clone();
    for e in predicted_init.entries().iter().filter(|e| e.component == Component::Attention) {
        let t0 = exact_init
            .get(e.layer, Component::Attention)
            .ok_or_else(|| Error::Contract(format!("no initial attention threshold for layer {}", e.layer)))?;
        let t1 = tuned
            .get(e.layer, Component::Attention)
            .ok_or_else(|| Error::Contract(format!("no tuned attention threshold for layer {}", e.layer)))?;
        let v = if t0 == 0.0 { e.value } else { e.value * (t1 / t0) };
        out.set(e.layer, Component::Attention, v);
    }
    Ok(out)
}

/// Micro-averaged recall and precision of predicted against exact patterns,
/// each side thresholded with its own per-layer threshold.
pub fn evaluate_recall<T: Element>(
    set: &PredictorSet<T>,
    samples: &[TeacherSample<T>],
    exact_t: &ThresholdSet,
    pred_t: &ThresholdSet,
) -> Result<(f64, f64)> {
    let (mut hit, mut exact_n, mut pred_n) = (0usize, 0usize, 0usize);
    for s in samples {
        let grid = s.scores.grid;
        let te = exact_t.get(s.layer, Component::Attention).unwrap_or(f64::NEG_INFINITY);
        let tp = pred_t.get(s.layer, Component::Attention).unwrap_or(f64::NEG_INFINITY);
        let exact = eliminate(&token_block_scores(&s.scores), te, grid, &[])?;
        let pred = eliminate(&set.token_block_scores(s.layer, &s.x, grid)?, tp, grid, &[])?;
        hit += overlap(&pred, &exact)?.0;
        exact_n += exact.blocks().len();
        pred_n += pred.blocks().len();
    }
    let r = if exact_n == 0 { 1.0 } else { hit as f64 / exact_n as f64 };
    let p = if pred_n == 0 { 1.0 } else { hit as f64 / pred_n as f64 };
    Ok((r, p))
}

struct PairVars {
    q: [Var; 3],
    k: [Var; 3],
}

fn embed_on_tape<T: Element>(tape: &mut Tape<T>, w: &[Var; 3], x: Var, block: usize, pooling: Pooling) -> Result<(Var, Var, Var)> {
    let h1 = match pooling {
        Pooling::BlockMean => {
            let xb = tape.block_mean(x, block)?;
            let a = tape.matmul(xb, w[0])?;
            tape.relu(a)
        }
        Pooling::TokenThenMean => {
            let a = tape.matmul(x, w[0])?;
            tape.relu(a)
        }
    };
    let a2 = tape.matmul(h1, w[1])?;
    let h2 = tape.relu(a2);
    let pooled = match pooling {
        Pooling::BlockMean => h2,
        Pooling::TokenThenMean => tape.block_mean(h2, block)?,
    };
    Ok((tape.matmul(pooled, w[2])?, h1, h2))
}

fn lower_tri_target<T: Element>(m: &BlockScoreMatrix) -> Vec<T> {
    let nb = m.n_blocks();
    let mut t = vec![T::zero(); nb * nb];
    for i in 0..nb {
        for j in 0..=i {
            t[i * nb + j] = T::of_f64(m.get(i, j).ln_1p());
        }
    }
    t
}

/// One update of a layer's pair on `samples`; returns their mean loss.
fn layer_step<T: Element>(pair: &mut PredictorPair<T>, samples: &[&TeacherSample<T>], pooling: Pooling, opt: &mut Adam<T>) -> Result<f64> {
    let mut tape = Tape::<T>::new();
    let vars = PairVars {
        q: [tape.param(&pair.q.w1), tape.param(&pair.q.w2), tape.param(&pair.q.w3)],
        k: [tape.param(&pair.k.w1), tape.param(&pair.k.w2), tape.param(&pair.k.w3)],
    };
    let mut total: Option<Var> = None;
    for s in samples {
        let b = s.scores.grid.block_size;
        let x = tape.leaf(&s.x.clone().with_requires_grad(false));
        let (eq, h1q, h2q) = embed_on_tape(&mut tape, &vars.q, x, b, pooling)?;
        let (ek, h1k, h2k) = embed_on_tape(&mut tape, &vars.k, x, b, pooling)?;
        for (p, h1, h2) in [(&mut pair.q, h1q, h2q), (&mut pair.k, h1k, h2k)] {
            let rows = tape.shape(h1)[0];
            p.observe(&Intermediates { h1: tape.value(h1).to_vec(), h2: tape.value(h2).to_vec(), rows });
        }
        let pred = tape.matmul_nt(eq, ek)?;
        let loss = tape.mse_lower_tri(pred, &lower_tri_target(&s.scores), true)?;
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("no teacher samples for this layer".into()))?;
    let mean = tape.scale(total, 1.0 / samples.len() as f64);
    let value = tape.scalar(mean).as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("predictor loss diverged at layer {}", pair.q.layer)));
    }
    tape.backward(mean)?;
    let grads: Vec<Option<Vec<T>>> = vars.q.iter().chain(&vars.k).map(|v| tape.grad(*v).map(<[T]>::to_vec)).collect();
    let grad_refs: Vec<Option<&[T]>> = grads.iter().map(|g| g.as_deref()).collect();
    {
        let PredictorPair { q, k } = pair;
        let mut params = [&mut q.w1, &mut q.w2, &mut q.w3, &mut k.w1, &mut k.w2, &mut k.w3];
        opt.step(&mut params, &grad_refs)?;
    }
    pair.q.apply_masks();
    pair.k.apply_masks();
    Ok(value)
}

/// Trains every layer's pair on `train` (MSE against log1p exact scores over
/// the lower triangle), pruning on `cfg.prune`'s cadence and reporting
/// recall on `val`.
pub fn train_predictors<T: Element>(
    set: &mut PredictorSet<T>,
    train: &[TeacherSample<T>],
    val: &[TeacherSample<T>],
    cfg: &PredictorTrainConfig,
) -> Result<Vec<PredictorTrainingRecord>> {
    ensure!(!train.is_empty(), Contract, "predictor training needs teacher samples");
    for s in train.iter().chain(val) {
        ensure!(s.layer < set.layers.len(), Index, "teacher sample for layer {} of {}", s.layer, set.layers.len());
    }
    ensure!(cfg.batch_size > 0, Contract, "predictor batch size must be positive");
    let mut by_layer: Vec<Vec<&TeacherSample<T>>> =
        (0..set.layers.len()).map(|l| train.iter().filter(|s| s.layer == l).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opts: Vec<Adam<T>> = (0..set.layers.len()).map(|_| Adam::new(cfg.lr)).collect();
    let exact_t = exact_thresholds(train)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut loss = 0.0;
        let mut trained = 0;
        for (l, samples) in by_layer.iter_mut().enumerate() {
            if samples.is_empty() {
                continue;
            }
            samples.shuffle(&mut rng);
            let batches = samples.chunks(cfg.batch_size);
            let n = batches.len();
            let mut layer_loss = 0.0;
            for batch in batches {
                layer_loss += layer_step(&mut set.layers[l], batch, set.config.pooling, &mut opts[l])?;
            }
            loss += layer_loss / n as f64;
            trained += 1;
        }
        loss /= trained as f64;
        if let Some(sched) = cfg.prune {
            if sched.every > 0 && epoch % sched.every == 0 {
                for pair in &mut set.layers {
                    for p in [&mut pair.q, &mut pair.k] {
                        let (a1, a2) = p.active_counts();
                        let n = (((a1 + a2) as f64 * sched.step_fraction).ceil() as usize).max(1);
                        prune_neurons(p, sched.target, n)?;
                    }
                }
            }
        }
        let eval = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let (recall, precision) = if eval && !val.is_empty() {
            let pred_t = predicted_thresholds(set, train)?;
            let (r, p) = evaluate_recall(set, val, &exact_t, &pred_t)?;
            (Some(r), Some(p))
        } else {
            (None, None)
        };
        history.push(PredictorTrainingRecord { epoch, loss, recall, precision, param_count: set.param_count() });
    }
    Ok(history)
}

/// Samples whose labels come from a hidden predictor pair, so a predictor of
/// the same shape can fit them exactly. Each block's tokens share a random
/// latent vector plus per-token noise; about a quarter of the blocks are
/// salient, with ten times the magnitude of the rest.
pub fn synthetic_teacher<T: Element, R: Rng + ?Sized>(
    hidden: &PredictorSet<T>,
    n_samples: usize,
    seq_len: usize,
    block: usize,
    rng: &mut R,
) -> Result<Vec<TeacherSample<T>>> {
    let h = hidden.layers.first().map(|p| p.q.hidden()).ok_or_else(|| Error::Contract("empty predictor set".into()))?;
    let grid = BlockGrid::new(seq_len, block)?;
    let mut out = Vec::new();
    for _ in 0..n_samples {
        for (l, pair) in hidden.layers.iter().enumerate() {
            let scale: Vec<f64> = (0..grid.n_blocks()).map(|_| if rng.random_bool(0.25) { 0.4 } else { 0.04 }).collect();
            let latent = Tensor::<T>::randn(&[grid.n_blocks(), h], 1.0, rng);
            let mut x = Tensor::<T>::randn(&[seq_len, h], 0.3, rng);
            for (i, row) in x.data_mut().chunks_mut(h).enumerate() {
                let c = T::of_f64(scale[i / block]);
                for (v, m) in row.iter_mut().zip(latent.row(i / block)) {
                    *v = (*v + *m) * c;
                }
            }
            let scores = pair.scores(&x, grid, hidden.config.pooling)?.with_tag(l, Component::Attention);
            out.push(TeacherSample { layer: l, x, scores });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transfer_scales_attention_and_copies_mlp() {
        let mut init = ThresholdSet::new();
        let mut tuned = ThresholdSet::new();
        let mut pred = ThresholdSet::new();
        for l in 0..2 {
            init.set(l, Component::Attention, 10.0);
            init.set(l, Component::Mlp, 1.0);
            tuned.set(l, Component::Attention, 9.0 + l as f64 * 2.0);
            tuned.set(l, Component::Mlp, 1.5);
            pred.set(l, Component::Attention, 4.0);
        }
        let t = transfer_thresholds(&pred, &init, &tuned).unwrap();
        assert_eq!(t.get(0, Component::Attention), Some(4.0 * 0.9));
        assert_eq!(t.get(1, Component::Attention), Some(4.0 * 1.1));
        assert_eq!(t.get(1, Component::Mlp), Some(1.5));
        assert!(transfer_thresholds(&pred, &ThresholdSet::new(), &tuned).is_err());
    }

    #[test]
    fn block_embed_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[6, 3], 1.0, &mut rng);
        assert_eq!(block_embed(&x, 1).unwrap(), x);
        let c = Tensor::<f64>::full(&[4, 2], 0.25);
        assert_eq!(block_embed(&c, 4).unwrap().data(), &[0.25, 0.25]);
    }

    #[test]
    fn zero_weights_predict_zero() {
        let z = |r, c| Tensor::<f64>::zeros(&[r, c]);
        let p = Predictor::from_weights(Role::Query, 0, z(4, 2), z(2, 2), z(2, 3)).unwrap();
        let grid = BlockGrid::new(8, 2).unwrap();
        let xb = Tensor::<f64>::full(&[4, 4], 1.0);
        let m = predict_scores(&p, &p, &xb, grid).unwrap();
        assert!(m.packed().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mismatched_output_dims_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Predictor::<f64>::new(Role::Query, 0, 4, &PredictorConfig { r1: 2, r2: 2, d_pred: 3, pooling: Pooling::BlockMean }, &mut rng);
        let b = Predictor::<f64>::new(Role::Key, 0, 4, &PredictorConfig { r1: 2, r2: 2, d_pred: 2, pooling: Pooling::BlockMean }, &mut rng);
        let grid = BlockGrid::new(4, 2).unwrap();
        assert!(matches!(predict_scores(&a, &b, &Tensor::zeros(&[2, 4]), grid), Err(Error::Contract(_))));
    }

    #[test]
    fn recall_set_arithmetic() {
        let grid = BlockGrid::new(16, 4).unwrap();
        let exact = SparsityPattern::from_blocks(grid, vec![0, 2, 3]).unwrap();
        let pred = SparsityPattern::from_blocks(grid, vec![0, 3]).unwrap();
        assert!((recall(&pred, &exact).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(precision(&pred, &exact).unwrap(), 1.0);
        assert_eq!(recall(&SparsityPattern::all(grid), &exact).unwrap(), 1.0);
        assert_eq!(recall(&pred, &SparsityPattern::none(grid)).unwrap(), 1.0);
        let other = SparsityPattern::all(BlockGrid::new(16, 8).unwrap());
        assert!(recall(&other, &exact).is_err());
    }

    #[test]
    fn zero_counters_follow_signs() {
        let w1 = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
        let w2 = Tensor::<f64>::identity(2);
        let w3 = Tensor::<f64>::full(&[2, 1], 1.0);
        let mut p = Predictor::from_weights(Role::Key, 0, w1, w2, w3).unwrap();
        let x = Tensor::from_vec(&[3, 1], vec![2.0, -1.0, 0.5]).unwrap();
        track_zero_frequency(&mut p, &x).unwrap();
        let (z1, z2, n) = p.zero_counts();
        assert_eq!(n, 3);
        assert_eq!(z1, &[1, 2]);
        assert_eq!(z2, &[1, 2]);
    }

    #[test]
    fn full_fraction_prunes_nothing_and_empty_stage_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = PredictorConfig { r1: 4, r2: 4, d_pred: 2, pooling: Pooling::BlockMean };
        let mut p = Predictor::<f64>::new(Role::Query, 0, 8, &cfg, &mut rng);
        let before = p.clone();
        let out = elastic_prune(&mut p, PruneTarget::ActiveFraction(1.0)).unwrap();
        assert!(out.removed.is_empty());
        assert_eq!(p, before);
        assert!(matches!(elastic_prune(&mut p, PruneTarget::ActiveFraction(0.1)), Err(Error::Contract(_))));
        assert!(matches!(elastic_prune(&mut p, PruneTarget::ParamFraction(0.0)), Err(Error::Contract(_))));
    }
}
