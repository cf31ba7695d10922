//! Token-sparse attention block outside the tape, in three data-movement
//! variants: a naive gather/compute/pad/add pipeline, one that adds the
//! attention rows straight into the residual stream, and one that also
//! reads the selected rows through the index list during normalisation.

use serde::{Deserialize, Serialize};

use crate::element::{matmul, Element};
use crate::error::{ensure, Result};
use crate::ledger::{AllocId, Category, Ledger};
use crate::model::{Model, Positions};
use crate::ops::{attention_forward, rmsnorm_row_into, rope_row};
use crate::sparsity::SparsityPattern;
use crate::tensor::Tensor;

/// Sorted row indices selected from a sequence of `seq_len` rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatherPlan {
    indices: Vec<usize>,
    seq_len: usize,
}

impl GatherPlan {
    pub fn new(indices: Vec<usize>, seq_len: usize) -> Result<Self> {
        for w in indices.windows(2) {
            ensure!(w[0] < w[1], Contract, "gather indices must be strictly increasing");
        }
        if let Some(&last) = indices.last() {
            ensure!(last < seq_len, Index, "gather index {last} outside {seq_len} rows");
        }
        Ok(GatherPlan { indices, seq_len })
    }

    pub fn full(seq_len: usize) -> Self {
        GatherPlan { indices: (0..seq_len).collect(), seq_len }
    }

    pub fn from_pattern(p: &SparsityPattern) -> Self {
        GatherPlan { indices: p.tokens().to_vec(), seq_len: p.grid.seq_len }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
}

/// Borrowed weights of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a, T> {
    pub hidden: usize,
    pub n_heads: usize,
    pub norm: &'a [T],
    pub eps: f64,
    pub wq: &'a [T],
    pub wk: &'a [T],
    pub wv: &'a [T],
    pub wo: &'a [T],
    /// `(A, B, rank, scaling)`
    pub lora_q: Option<(&'a [T], &'a [T], usize, f64)>,
    pub lora_v: Option<(&'a [T], &'a [T], usize, f64)>,
    pub rope_base: Option<f64>,
}

impl<'a, T: Element> AttentionWeights<'a, T> {
    pub fn from_model(model: &'a Model<T>, layer: usize) -> Self {
        let l = &model.layers[layer];
        let c = &model.config;
        let ad = |a: &'a Option<crate::model::LoraAdapter<T>>| a.as_ref().map(|a| (a.a.data(), a.b.data(), a.a.cols(), a.scaling));
        AttentionWeights {
            hidden: c.hidden,
            n_heads: c.n_heads,
            norm: &l.attn_norm,
            eps: c.norm_eps,
            wq: l.wq.data(),
            wk: l.wk.data(),
            wv: l.wv.data(),
            wo: l.wo.data(),
            lora_q: ad(&l.lora_q),
            lora_v: ad(&l.lora_v),
            rope_base: (c.positions == Positions::Rope).then_some(c.rope_base),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelVariant {
    Naive,
    /// Gathered input, attention rows added in place.
    AttentionFused,
    /// No gathered input and no padded output.
    ProjectionFused,
}

impl KernelVariant {
    pub const ALL: [KernelVariant; 3] = [KernelVariant::Naive, KernelVariant::AttentionFused, KernelVariant::ProjectionFused];

    pub fn name(self) -> &'static str {
        match self {
            KernelVariant::Naive => "naive",
            KernelVariant::AttentionFused => "attention_fused",
            KernelVariant::ProjectionFused => "fused",
        }
    }
}

/// Transient allocations made by one call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelStats {
    pub transient_allocs: usize,
    pub transient_bytes: usize,
    /// Buffers whose length scales with `s` or `k` rows.
    pub row_buffers: usize,
}

struct Scratch<'l> {
    ledger: &'l mut Ledger,
    stats: KernelStats,
    live: Vec<AllocId>,
}

impl Scratch<'_> {
    fn alloc<T: Element>(&mut self, len: usize, op: &'static str, row_sized: bool) -> Vec<T> {
        let bytes = T::bytes(len);
        self.live.push(self.ledger.alloc(bytes, Category::Transient, op));
        self.stats.transient_allocs += 1;
        self.stats.transient_bytes += bytes;
        if row_sized {
            self.stats.row_buffers += 1;
        }
        vec![T::zero(); len]
    }

    /// Records an already computed buffer as one of this call's transients.
    fn adopt<T: Element>(&mut self, v: Vec<T>, op: &'static str, row_sized: bool) -> Vec<T> {
        let bytes = T::bytes(v.len());
        self.live.push(self.ledger.alloc(bytes, Category::Transient, op));
        self.stats.transient_allocs += 1;
        self.stats.transient_bytes += bytes;
        if row_sized {
            self.stats.row_buffers += 1;
        }
        v
    }

    fn finish(self) -> Result<KernelStats> {
        for id in self.live {
            self.ledger.free(id)?;
        }
        Ok(self.stats)
    }
}

fn project<T: Element>(sc: &mut Scratch<'_>, xn: &[T], k: usize, h: usize, w: &[T], lora: Option<(&[T], &[T], usize, f64)>, op: &'static str) -> Vec<T> {
    let mut y = sc.adopt(matmul(xn, w, k, h, h), op, true);
    if let Some((a, b, r, s)) = lora {
        let t = sc.adopt(matmul(xn, a, k, h, r), "lora_tmp", true);
        let d = matmul(&t, b, k, r, h);
        let s = T::of_f64(s);
        for (o, v) in y.iter_mut().zip(&d) {
            *o += *v * s;
        }
    }
    y
}

/// Runs one attention block with a residual over the rows in `plan`,
/// returning the updated residual stream.
pub fn sparse_attention<T: Element>(
    variant: KernelVariant,
    x: Tensor<T>,
    plan: &GatherPlan,
    w: &AttentionWeights<'_, T>,
    ledger: &mut Ledger,
) -> Result<(Tensor<T>, KernelStats)> {
    let h = w.hidden;
    ensure!(x.shape() == [plan.seq_len(), h], Dimension, "input {:?} for plan over {} rows of width {h}", x.shape(), plan.seq_len());
    ensure!(h.is_multiple_of(w.n_heads), Dimension, "width {h} not divisible by {} heads", w.n_heads);
    let k = plan.k();
    if k == 0 {
        return Ok((x, KernelStats::default()));
    }
    let idx = plan.indices();
    let mut x = x;
    let mut sc = Scratch { ledger, stats: KernelStats::default(), live: Vec::new() };

    let mut xn = sc.alloc::<T>(k * h, "normed", true);
    match variant {
        KernelVariant::Naive | KernelVariant::AttentionFused => {
            let mut gathered = sc.alloc::<T>(k * h, "gathered", true);
            for (i, &r) in idx.iter().enumerate() {
                gathered[i * h..(i + 1) * h].copy_from_slice(x.row(r));
            }
            for i in 0..k {
                rmsnorm_row_into(&gathered[i * h..(i + 1) * h], w.norm, w.eps, &mut xn[i * h..(i + 1) * h]);
            }
        }
        KernelVariant::ProjectionFused => {
            for (i, &r) in idx.iter().enumerate() {
                rmsnorm_row_into(x.row(r), w.norm, w.eps, &mut xn[i * h..(i + 1) * h]);
            }
        }
    }

    let mut q = project(&mut sc, &xn, k, h, w.wq, w.lora_q, "q");
    let mut kk = project(&mut sc, &xn, k, h, w.wk, None, "k");
    let v = project(&mut sc, &xn, k, h, w.wv, w.lora_v, "v");
    if let Some(base) = w.rope_base {
        let hd = h / w.n_heads;
        for (i, &p) in idx.iter().enumerate() {
            rope_row(&mut q[i * h..(i + 1) * h], p, w.n_heads, hd, base, 1.0);
            rope_row(&mut kk[i * h..(i + 1) * h], p, w.n_heads, hd, base, 1.0);
        }
    }
    let mut ctx = sc.alloc::<T>(k * h, "context", true);
    let mut lse = sc.alloc::<T>(w.n_heads * k, "lse", true);
    let mut scores = sc.alloc::<T>(k * k, "attention_scores", true);
    attention_forward(&q, &kk, &v, k, h, w.n_heads, &mut ctx, &mut lse, &mut scores);
    let o = sc.adopt(matmul(&ctx, w.wo, k, h, h), "attn_out", true);

    match variant {
        KernelVariant::Naive => {
            let mut padded = sc.alloc::<T>(plan.seq_len() * h, "padded", true);
            for (i, &r) in idx.iter().enumerate() {
                padded[r * h..(r + 1) * h].copy_from_slice(&o[i * h..(i + 1) * h]);
            }
            for (d, s) in x.data_mut().iter_mut().zip(&padded) {
                *d += *s;
            }
        }
        KernelVariant::AttentionFused | KernelVariant::ProjectionFused => {
            let xd = x.data_mut();
            for (i, &r) in idx.iter().enumerate() {
                for (d, s) in xd[r * h..(r + 1) * h].iter_mut().zip(&o[i * h..(i + 1) * h]) {
                    *d += *s;
                }
            }
        }
    }
    let stats = sc.finish()?;
    Ok((x, stats))
}

/// Gather, attend, pad, add.
pub fn sparse_attention_naive<T: Element>(x: Tensor<T>, plan: &GatherPlan, w: &AttentionWeights<'_, T>, ledger: &mut Ledger) -> Result<(Tensor<T>, KernelStats)> {
    sparse_attention(KernelVariant::Naive, x, plan, w, ledger)
}

/// Index-driven reads and in-place residual accumulation.
pub fn sparse_attention_fused<T: Element>(x: Tensor<T>, plan: &GatherPlan, w: &AttentionWeights<'_, T>, ledger: &mut Ledger) -> Result<(Tensor<T>, KernelStats)> {
    sparse_attention(KernelVariant::ProjectionFused, x, plan, w, ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plans_are_validated() {
        assert!(GatherPlan::new(vec![0, 2, 5], 6).is_ok());
        assert!(GatherPlan::new(vec![2, 1], 6).is_err());
        assert!(GatherPlan::new(vec![1, 1], 6).is_err());
        assert!(GatherPlan::new(vec![6], 6).is_err());
    }

    #[test]
    fn empty_plan_is_identity_without_allocations() {
        let cfg = ModelConfig { n_layers: 1, hidden: 8, n_heads: 2, vocab: 8, d_ff: 8, ..Default::default() };
        let m = Model::<f32>::new(cfg, 0).unwrap();
        let w = AttentionWeights::from_model(&m, 0);
        let x = Tensor::randn(&[5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let mut ledger = Ledger::new();
        for v in KernelVariant::ALL {
            let (y, st) = sparse_attention(v, x.clone(), &GatherPlan::new(vec![], 5).unwrap(), &w, &mut ledger).unwrap();
            assert_eq!(y, x);
            assert_eq!(st, KernelStats::default());
        }
        assert!(ledger.events().is_empty());
    }
}
