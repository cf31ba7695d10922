//! Timing and allocation comparison of the sparse-attention variants and
//! the segmented loss.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::Result;
use crate::kernels::attention::{sparse_attention, AttentionWeights, GatherPlan, KernelVariant};
use crate::kernels::loss::{segmented_loss_and_grad, SegmentPlan};
use crate::ledger::Ledger;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kernel: String,
    pub s: usize,
    /// Retained rows for attention kernels, segment count for the loss.
    pub k_or_n: usize,
    /// Fastest of the timed repetitions.
    pub wall_ns: u64,
    pub transient_bytes: usize,
    pub peak_bytes: usize,
    /// Reference time over this row's time (reference rows report 1).
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub seq_lens: Vec<usize>,
    /// Retained share of rows per attention cell.
    pub fractions: Vec<f64>,
    pub segments: Vec<usize>,
    pub seed: u64,
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { seq_lens: vec![128, 256, 512, 1024], fractions: vec![0.25, 0.5, 1.0], segments: vec![1, 2, 4, 8], seed: 0, reps: 5 }
    }
}

/// A sorted random subset of `k` rows out of `s`.
pub fn random_plan(s: usize, k: usize, rng: &mut ChaCha8Rng) -> GatherPlan {
    let mut idx = sample(rng, s, k).into_vec();
    idx.sort_unstable();
    GatherPlan::new(idx, s).expect("sampled indices are distinct and in range")
}

fn time_min(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<u64> {
    f()?;
    let mut best = u64::MAX;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_nanos() as u64);
    }
    Ok(best)
}

/// One row per (sequence length, retained count, variant) for layer 0 of
/// `model`, then one row per (sequence length, segment count) for the loss.
pub fn bench_kernels<T: Element>(model: &Model<T>, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = AttentionWeights::from_model(model, 0);
    let h = model.config.hidden;
    let mut rows = Vec::new();
    for &s in &cfg.seq_lens {
        let x = Tensor::<T>::randn(&[s, h], 1.0, &mut rng);
        for &f in &cfg.fractions {
            let k = ((s as f64 * f).round() as usize).min(s);
            let plan = random_plan(s, k, &mut rng);
            let mut naive_ns = 0;
            for v in KernelVariant::ALL {
                let mut ledger = Ledger::new().without_event_log();
                let (_, stats) = sparse_attention(v, x.clone(), &plan, &w, &mut ledger)?;
                let wall = time_min(cfg.reps, || {
                    sparse_attention(v, x.clone(), &plan, &w, &mut Ledger::disabled()).map(|_| ())
                })?;
                if v == KernelVariant::Naive {
                    naive_ns = wall;
                }
                rows.push(BenchRow {
                    kernel: v.name().to_string(),
                    s,
                    k_or_n: k,
                    wall_ns: wall,
                    transient_bytes: stats.transient_bytes,
                    peak_bytes: ledger.peak_bytes(),
                    speedup: naive_ns as f64 / wall.max(1) as f64,
                });
            }
        }
        let hidden = Tensor::<T>::randn(&[s, h], 1.0, &mut rng);
        let targets: Vec<usize> = (0..s).map(|i| (i * 31 + 7) % model.config.vocab).collect();
        let mut base_ns = 0;
        for &n in cfg.segments.iter().filter(|n| **n <= s) {
            let plan = SegmentPlan::new(s, n)?;
            let run = |ledger: &mut Ledger| {
                segmented_loss_and_grad(
                    hidden.data(),
                    s,
                    model.lm_head.data(),
                    h,
                    model.config.vocab,
                    &targets,
                    &plan,
                    true,
                    ledger,
                )
                .map(|_| ())
            };
            let mut ledger = Ledger::new().without_event_log();
            run(&mut ledger)?;
            let wall = time_min(cfg.reps, || run(&mut Ledger::disabled()))?;
            if n == 1 || base_ns == 0 {
                base_ns = wall;
            }
            rows.push(BenchRow {
                kernel: "segmented_loss".to_string(),
                s,
                k_or_n: n,
                wall_ns: wall,
                transient_bytes: ledger.peak_bytes(),
                peak_bytes: ledger.peak_bytes(),
                speedup: base_ns as f64 / wall.max(1) as f64,
            });
        }
    }
    Ok(rows)
}
