//! Decoder-only transformer with LoRA adapters and token-sparse blocks.
//!
//! Every block is pre-norm with a residual connection. A block given a
//! [`SparsityPattern`] computes only the retained rows: retained tokens keep
//! their original positions and attend causally among themselves, and the
//! rows of eliminated tokens are carried unchanged by the residual path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::element::{matmul, Element};
use crate::error::{ensure, Error, Result};
use crate::kernels::loss::SegmentPlan;
use crate::ledger::{ScopeTag, POST_FORWARD};
use crate::ops::{rmsnorm_rows, rope_row};
use crate::predictor::PredictorSet;
use crate::sparsity::{
    eliminate, exact_block_scores, mlp_block_scores, mlp_token_informativeness, token_block_scores, BlockGrid,
    BlockScoreMatrix, Component, HeadsView, SparsityPattern, ThresholdSet,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpVariant {
    /// `down(relu(up(x)))`
    Relu,
    /// `down(silu(gate(x)) ⊙ up(x))`
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    Rope,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub d_ff: usize,
    pub mlp: MlpVariant,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub block_size: usize,
    pub positions: Positions,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            hidden: 64,
            n_heads: 4,
            vocab: 256,
            max_seq_len: 2048,
            d_ff: 256,
            mlp: MlpVariant::Silu,
            lora_rank: 8,
            lora_alpha: 16.0,
            block_size: 16,
            positions: Positions::Rope,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_layers > 0 && self.hidden > 0 && self.vocab > 0, Contract, "model dimensions must be positive");
        ensure!(
            self.n_heads > 0 && self.hidden.is_multiple_of(self.n_heads),
            Contract,
            "hidden {} is not a multiple of {} heads",
            self.hidden,
            self.n_heads
        );
        ensure!(
            self.positions != Positions::Rope || self.head_dim().is_multiple_of(2),
            Contract,
            "rotary positions need an even head dim, got {}",
            self.head_dim()
        );
        ensure!(self.block_size > 0, Contract, "block size must be positive");
        ensure!(self.d_ff > 0 && self.max_seq_len > 0, Contract, "d_ff and max_seq_len must be positive");
        Ok(())
    }
}

/// `W + scaling · A·B`; `B` starts at zero so the adapted weight equals `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub scaling: f64,
}

impl<T: Element> LoraAdapter<T> {
    pub fn new(hidden: usize, out: usize, rank: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Self {
        LoraAdapter {
            a: Tensor::randn(&[hidden, rank], 1.0 / (hidden as f64).sqrt(), rng).with_requires_grad(true),
            b: Tensor::zeros(&[rank, out]).with_requires_grad(true),
            scaling: alpha / rank as f64,
        }
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    pub attn_norm: Vec<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub lora_q: Option<LoraAdapter<T>>,
    pub lora_v: Option<LoraAdapter<T>>,
    pub mlp_norm: Vec<T>,
    pub w_gate: Option<Tensor<T>>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub embed: Tensor<T>,
    pub pos_embed: Option<Tensor<T>>,
    pub layers: Vec<LayerState<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Tensor<T>,
    pub predictors: Option<PredictorSet<T>>,
}

/// Attention and MLP patterns of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPatterns {
    pub attention: SparsityPattern,
    pub mlp: SparsityPattern,
}

impl LayerPatterns {
    pub fn all(grid: BlockGrid, layer: usize) -> Self {
        LayerPatterns {
            attention: SparsityPattern::all(grid).with_tag(layer, Component::Attention),
            mlp: SparsityPattern::all(grid).with_tag(layer, Component::Mlp),
        }
    }
}

/// How each layer's patterns are chosen during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum PatternPolicy<'a, T> {
    /// No elimination; blocks run on the full sequence without index lists.
    Dense,
    /// Given patterns, one pair per layer.
    Fixed(&'a [LayerPatterns]),
    /// Exact scores from the layer's own queries/keys (attention) and inner
    /// activations (MLP), compared with `thresholds`.
    Exact { thresholds: &'a ThresholdSet, sinks: &'a [usize], mlp: bool },
    /// Attention patterns from predictor scores; MLP patterns as in `Exact`.
    Predicted { predictors: &'a PredictorSet<T>, thresholds: &'a ThresholdSet, sinks: &'a [usize], mlp: bool },
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Read retained rows through the index list and add results in place.
    pub fused: bool,
    /// LM-loss segment count; `None` uses [`SegmentPlan::default_for`].
    pub segments: Option<usize>,
    /// Treat every parameter as frozen (no tape nodes are recorded).
    pub no_grad: bool,
    /// Record each layer's input and exact scores.
    pub capture: bool,
    /// Drop values backward does not need after each layer.
    pub release: bool,
}

#[derive(Debug, Clone)]
pub struct LayerCapture<T> {
    pub layer: usize,
    pub input: Tensor<T>,
    pub attention_scores: BlockScoreMatrix,
    pub mlp_scores: BlockScoreMatrix,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub lora_q: Option<(Var, Var)>,
    pub lora_v: Option<(Var, Var)>,
    pub w_gate: Option<Var>,
    pub w_up: Var,
    pub w_down: Var,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embed: Var,
    pub pos_embed: Option<Var>,
    pub layers: Vec<LayerVars>,
    pub lm_head: Var,
}

impl ModelVars {
    /// Adapter vars in [`Model::adapters_mut`] order.
    pub fn adapters(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            for (a, b) in [l.lora_q, l.lora_v].into_iter().flatten() {
                out.push(a);
                out.push(b);
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct ForwardOutput<T> {
    pub loss: Option<Var>,
    /// Final-normed hidden states, `s×h`.
    pub hidden: Var,
    pub vars: ModelVars,
    pub patterns: Vec<LayerPatterns>,
    pub captures: Vec<LayerCapture<T>>,
}

/// Which rows a block computes.
#[derive(Clone, Copy)]
enum Rows<'a> {
    All,
    Some(&'a [usize]),
}

impl<T: Element> Model<T> {
    /// Seeded random frozen weights, unit norms, zero-initialised `B`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, f, v) = (config.hidden, config.d_ff, config.vocab);
        let sh = 1.0 / (h as f64).sqrt();
        let embed = Tensor::randn(&[v, h], 1.0, &mut rng);
        let pos_embed = match config.positions {
            Positions::Learned => Some(Tensor::randn(&[config.max_seq_len, h], 0.5, &mut rng)),
            Positions::Rope => None,
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let wq = Tensor::randn(&[h, h], sh, &mut rng);
            let wk = Tensor::randn(&[h, h], sh, &mut rng);
            let wv = Tensor::randn(&[h, h], sh, &mut rng);
            let wo = Tensor::randn(&[h, h], sh, &mut rng);
            let w_gate = (config.mlp == MlpVariant::Silu).then(|| Tensor::randn(&[h, f], sh, &mut rng));
            let w_up = Tensor::randn(&[h, f], sh, &mut rng);
            let w_down = Tensor::randn(&[f, h], 1.0 / (f as f64).sqrt(), &mut rng);
            let (lora_q, lora_v) = if config.lora_rank > 0 {
                (
                    Some(LoraAdapter::new(h, h, config.lora_rank, config.lora_alpha, &mut rng)),
                    Some(LoraAdapter::new(h, h, config.lora_rank, config.lora_alpha, &mut rng)),
                )
            } else {
                (None, None)
            };
            layers.push(LayerState {
                attn_norm: vec![T::one(); h],
                wq,
                wk,
                wv,
                wo,
                lora_q,
                lora_v,
                mlp_norm: vec![T::one(); h],
                w_gate,
                w_up,
                w_down,
            });
        }
        let lm_head = Tensor::randn(&[h, v], sh, &mut rng);
        Ok(Model { config, embed, pos_embed, layers, final_norm: vec![T::one(); h], lm_head, predictors: None })
    }

    pub fn grid(&self, seq_len: usize) -> Result<BlockGrid> {
        BlockGrid::new(seq_len, self.config.block_size)
    }

    /// Adapter and predictor tensors, the only trainable state.
    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, ad) in [("lora_q", &layer.lora_q), ("lora_v", &layer.lora_v)] {
                if let Some(ad) = ad {
                    out.push((format!("layers.{l}.{name}.a"), &ad.a));
                    out.push((format!("layers.{l}.{name}.b"), &ad.b));
                }
            }
        }
        if let Some(p) = &self.predictors {
            out.extend(p.named_tensors());
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| [&l.lora_q, &l.lora_v])
            .flatten()
            .map(LoraAdapter::param_count)
            .sum::<usize>()
            + self.predictors.as_ref().map_or(0, PredictorSet::param_count)
    }

    /// Adapter tensors in the order of [`ModelVars::adapters`].
    pub fn adapters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for ad in [&mut layer.lora_q, &mut layer.lora_v].into_iter().flatten() {
                out.push(&mut ad.a);
                out.push(&mut ad.b);
            }
        }
        out
    }

    /// Every tensor with a stable name and shape, frozen and trainable.
    pub fn state(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let h = self.config.hidden;
        let mut out: Vec<(String, Vec<usize>, &[T])> = vec![("embed".into(), self.embed.shape().to_vec(), self.embed.data())];
        if let Some(p) = &self.pos_embed {
            out.push(("pos_embed".into(), p.shape().to_vec(), p.data()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            fn t<'a, T: Element>(l: usize, n: &str, t: &'a Tensor<T>) -> (String, Vec<usize>, &'a [T]) {
                (format!("layers.{l}.{n}"), t.shape().to_vec(), t.data())
            }
            out.push((format!("layers.{l}.attn_norm"), vec![h], &layer.attn_norm));
            out.push(t(l, "wq", &layer.wq));
            out.push(t(l, "wk", &layer.wk));
            out.push(t(l, "wv", &layer.wv));
            out.push(t(l, "wo", &layer.wo));
            for (n, ad) in [("lora_q", &layer.lora_q), ("lora_v", &layer.lora_v)] {
                if let Some(ad) = ad {
                    out.push((format!("layers.{l}.{n}.a"), ad.a.shape().to_vec(), ad.a.data()));
                    out.push((format!("layers.{l}.{n}.b"), ad.b.shape().to_vec(), ad.b.data()));
                }
            }
            out.push((format!("layers.{l}.mlp_norm"), vec![h], &layer.mlp_norm));
            if let Some(g) = &layer.w_gate {
                out.push(t(l, "w_gate", g));
            }
            out.push(t(l, "w_up", &layer.w_up));
            out.push(t(l, "w_down", &layer.w_down));
        }
        out.push(("final_norm".into(), vec![h], &self.final_norm));
        out.push(("lm_head".into(), self.lm_head.shape().to_vec(), self.lm_head.data()));
        out
    }

    /// Mutable view of [`Model::state`], same names and order.
    pub fn state_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = vec![("embed".into(), self.embed.data_mut())];
        if let Some(p) = &mut self.pos_embed {
            out.push(("pos_embed".into(), p.data_mut()));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &mut layer.attn_norm));
            out.push((format!("layers.{l}.wq"), layer.wq.data_mut()));
            out.push((format!("layers.{l}.wk"), layer.wk.data_mut()));
            out.push((format!("layers.{l}.wv"), layer.wv.data_mut()));
            out.push((format!("layers.{l}.wo"), layer.wo.data_mut()));
            for (n, ad) in [("lora_q", &mut layer.lora_q), ("lora_v", &mut layer.lora_v)] {
                if let Some(ad) = ad {
                    out.push((format!("layers.{l}.{n}.a"), ad.a.data_mut()));
                    out.push((format!("layers.{l}.{n}.b"), ad.b.data_mut()));
                }
            }
            out.push((format!("layers.{l}.mlp_norm"), &mut layer.mlp_norm));
            if let Some(g) = &mut layer.w_gate {
                out.push((format!("layers.{l}.w_gate"), g.data_mut()));
            }
            out.push((format!("layers.{l}.w_up"), layer.w_up.data_mut()));
            out.push((format!("layers.{l}.w_down"), layer.w_down.data_mut()));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("lm_head".into(), self.lm_head.data_mut()));
        out
    }

    /// Frozen parameter count.
    pub fn frozen_count(&self) -> usize {
        let mut n = self.embed.numel() + self.lm_head.numel() + self.final_norm.len();
        n += self.pos_embed.as_ref().map_or(0, Tensor::numel);
        for l in &self.layers {
            n += l.attn_norm.len() + l.mlp_norm.len() + l.wq.numel() + l.wk.numel() + l.wv.numel() + l.wo.numel();
            n += l.w_gate.as_ref().map_or(0, Tensor::numel) + l.w_up.numel() + l.w_down.numel();
        }
        n
    }

    /// Puts every parameter on `tape`; frozen weights never require grad.
    pub fn bind(&self, tape: &mut Tape<T>, no_grad: bool) -> ModelVars {
        let train = |t: &Tensor<T>| t.requires_grad() && !no_grad;
        let embed = tape.param_as(&self.embed, train(&self.embed));
        let pos_embed = self.pos_embed.as_ref().map(|p| tape.param_as(p, false));
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut ad = |a: &Option<LoraAdapter<T>>| {
                    a.as_ref().map(|a| (tape.param_as(&a.a, train(&a.a)), tape.param_as(&a.b, train(&a.b))))
                };
                let lora_q = ad(&l.lora_q);
                let lora_v = ad(&l.lora_v);
                LayerVars {
                    wq: tape.param_as(&l.wq, false),
                    wk: tape.param_as(&l.wk, false),
                    wv: tape.param_as(&l.wv, false),
                    wo: tape.param_as(&l.wo, false),
                    lora_q,
                    lora_v,
                    w_gate: l.w_gate.as_ref().map(|w| tape.param_as(w, false)),
                    w_up: tape.param_as(&l.w_up, false),
                    w_down: tape.param_as(&l.w_down, false),
                }
            })
            .collect();
        let lm_head = tape.param_as(&self.lm_head, false);
        ModelVars { embed, pos_embed, layers, lm_head }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        ensure!(!tokens.is_empty(), Contract, "empty token sequence");
        ensure!(
            tokens.len() <= self.config.max_seq_len,
            Contract,
            "{} tokens exceed the maximum sequence length {}",
            tokens.len(),
            self.config.max_seq_len
        );
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", self.config.vocab)));
        }
        Ok(())
    }

    /// Input rows to the first layer.
    pub fn embed_tokens(&self, tape: &mut Tape<T>, vars: &ModelVars, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let x = tape.embedding(vars.embed, tokens)?;
        match vars.pos_embed {
            Some(p) => {
                let positions: Vec<usize> = (0..tokens.len()).collect();
                let pe = tape.embedding(p, &positions)?;
                tape.add(x, pe)
            }
            None => Ok(x),
        }
    }

    fn project(&self, tape: &mut Tape<T>, xn: Var, w: Var, lora: Option<(Var, Var)>, scaling: f64) -> Result<Var> {
        let y = tape.matmul(xn, w)?;
        match lora {
            None => Ok(y),
            Some((a, b)) => {
                let t = tape.matmul(xn, a)?;
                let t = tape.matmul(t, b)?;
                let t = tape.scale(t, scaling);
                tape.add(y, t)
            }
        }
    }

    fn lora_scaling(ad: &Option<LoraAdapter<T>>) -> f64 {
        ad.as_ref().map_or(0.0, |a| a.scaling)
    }

    fn normed(&self, tape: &mut Tape<T>, x: Var, norm: &[T], rows: Rows<'_>, fused: bool) -> Result<Var> {
        let eps = self.config.norm_eps;
        match rows {
            Rows::All => tape.rmsnorm(x, norm, eps),
            Rows::Some(idx) if fused => tape.gather_rmsnorm(x, idx, norm, eps),
            Rows::Some(idx) => {
                let g = tape.gather_rows(x, idx)?;
                tape.rmsnorm(g, norm, eps)
            }
        }
    }

    fn residual(&self, tape: &mut Tape<T>, x: Var, out: Var, rows: Rows<'_>, fused: bool) -> Result<Var> {
        match rows {
            Rows::All => tape.add(x, out),
            Rows::Some(idx) if fused => tape.scatter_add_inplace(x, out, idx),
            Rows::Some(idx) => {
                let n = tape.shape(x)[0];
                let p = tape.pad_rows(out, idx, n)?;
                tape.add(x, p)
            }
        }
    }

    /// Attention output rows (before residual) for the selected rows.
    fn attention_rows(&self, tape: &mut Tape<T>, lv: &LayerVars, l: usize, x: Var, rows: Rows<'_>, fused: bool) -> Result<Var> {
        let layer = &self.layers[l];
        let xn = self.normed(tape, x, &layer.attn_norm, rows, fused)?;
        let q = self.project(tape, xn, lv.wq, lv.lora_q, Self::lora_scaling(&layer.lora_q))?;
        let k = tape.matmul(xn, lv.wk)?;
        let v = self.project(tape, xn, lv.wv, lv.lora_v, Self::lora_scaling(&layer.lora_v))?;
        let (q, k) = match self.config.positions {
            Positions::Rope => {
                let positions: Vec<usize> = match rows {
                    Rows::All => (0..tape.shape(x)[0]).collect(),
                    Rows::Some(idx) => idx.to_vec(),
                };
                let q = tape.rope(q, &positions, self.config.n_heads, self.config.rope_base)?;
                let k = tape.rope(k, &positions, self.config.n_heads, self.config.rope_base)?;
                (q, k)
            }
            Positions::Learned => (q, k),
        };
        let a = tape.causal_attention(q, k, v, self.config.n_heads)?;
        tape.matmul(a, lv.wo)
    }

    fn mlp_rows(&self, tape: &mut Tape<T>, lv: &LayerVars, l: usize, x: Var, rows: Rows<'_>, fused: bool) -> Result<Var> {
        let layer = &self.layers[l];
        let xn = self.normed(tape, x, &layer.mlp_norm, rows, fused)?;
        let inner = match (self.config.mlp, lv.w_gate) {
            (MlpVariant::Silu, Some(wg)) => {
                let g = tape.matmul(xn, wg)?;
                let g = tape.silu(g);
                let u = tape.matmul(xn, lv.w_up)?;
                tape.mul(g, u)?
            }
            (MlpVariant::Relu, _) => {
                let u = tape.matmul(xn, lv.w_up)?;
                tape.relu(u)
            }
            (MlpVariant::Silu, None) => return Err(Error::Contract(format!("layer {l} has no gate projection"))),
        };
        tape.matmul(inner, lv.w_down)
    }

    fn rows_of(pattern: Option<&SparsityPattern>) -> Result<Option<Rows<'_>>> {
        match pattern {
            None => Ok(Some(Rows::All)),
            Some(p) if p.is_empty() => Ok(None),
            Some(p) => Ok(Some(Rows::Some(p.tokens()))),
        }
    }

    /// Attention block plus residual on the tape. `None` runs the dense path.
    pub fn attention_block(
        &self,
        tape: &mut Tape<T>,
        lv: &LayerVars,
        l: usize,
        x: Var,
        pattern: Option<&SparsityPattern>,
        fused: bool,
    ) -> Result<Var> {
        let Some(rows) = Self::rows_of(pattern)? else { return Ok(x) };
        let out = self.attention_rows(tape, lv, l, x, rows, fused)?;
        self.residual(tape, x, out, rows, fused)
    }

    /// MLP block plus residual on the tape. `None` runs the dense path.
    pub fn mlp_block(
        &self,
        tape: &mut Tape<T>,
        lv: &LayerVars,
        l: usize,
        x: Var,
        pattern: Option<&SparsityPattern>,
        fused: bool,
    ) -> Result<Var> {
        let Some(rows) = Self::rows_of(pattern)? else { return Ok(x) };
        let out = self.mlp_rows(tape, lv, l, x, rows, fused)?;
        self.residual(tape, x, out, rows, fused)
    }

    fn block_output(&self, l: usize, x: &Tensor<T>, pattern: &SparsityPattern, mlp: bool) -> Result<Tensor<T>> {
        ensure!(l < self.layers.len(), Index, "layer {l} of {}", self.layers.len());
        ensure!(x.shape().len() == 2 && x.cols() == self.config.hidden, Dimension, "block input {:?}", x.shape());
        ensure!(pattern.grid.seq_len == x.rows(), Dimension, "pattern over {} tokens for {} rows", pattern.grid.seq_len, x.rows());
        let n = x.rows();
        if pattern.is_empty() {
            return Ok(Tensor::zeros(&[n, self.config.hidden]));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true);
        let xv = tape.leaf(x);
        let rows = Rows::Some(pattern.tokens());
        let out = if mlp {
            self.mlp_rows(&mut tape, &vars.layers[l], l, xv, rows, false)?
        } else {
            self.attention_rows(&mut tape, &vars.layers[l], l, xv, rows, false)?
        };
        let p = tape.pad_rows(out, pattern.tokens(), n)?;
        Ok(tape.tensor(p))
    }

    /// Attention output of layer `l` before the residual; eliminated rows are zero.
    pub fn attention_block_forward(&self, l: usize, x: &Tensor<T>, pattern: &SparsityPattern) -> Result<Tensor<T>> {
        self.block_output(l, x, pattern, false)
    }

    /// MLP output of layer `l` before the residual; eliminated rows are zero.
    pub fn mlp_block_forward(&self, l: usize, x: &Tensor<T>, pattern: &SparsityPattern) -> Result<Tensor<T>> {
        self.block_output(l, x, pattern, true)
    }

    /// Queries and keys of layer `l` for every row of `x`, positions applied.
    pub fn queries_keys(&self, l: usize, x: &[T], n: usize) -> (Vec<T>, Vec<T>) {
        let (h, layer) = (self.config.hidden, &self.layers[l]);
        let xn = rmsnorm_rows(x, n, h, &layer.attn_norm, self.config.norm_eps);
        let mut q = matmul(&xn, layer.wq.data(), n, h, h);
        if let Some(ad) = &layer.lora_q {
            let r = ad.a.cols();
            let t = matmul(&xn, ad.a.data(), n, h, r);
            let t = matmul(&t, ad.b.data(), n, r, h);
            let s = T::of_f64(ad.scaling);
            for (a, b) in q.iter_mut().zip(&t) {
                *a += *b * s;
            }
        }
        let mut k = matmul(&xn, layer.wk.data(), n, h, h);
        if self.config.positions == Positions::Rope {
            let (nh, hd) = (self.config.n_heads, self.config.head_dim());
            for i in 0..n {
                rope_row(&mut q[i * h..(i + 1) * h], i, nh, hd, self.config.rope_base, 1.0);
                rope_row(&mut k[i * h..(i + 1) * h], i, nh, hd, self.config.rope_base, 1.0);
            }
        }
        (q, k)
    }

    /// MLP inner activations of layer `l` for every row of `x` (`n×d_ff`).
    pub fn mlp_inner(&self, l: usize, x: &[T], n: usize) -> Vec<T> {
        let (h, f, layer) = (self.config.hidden, self.config.d_ff, &self.layers[l]);
        let xn = rmsnorm_rows(x, n, h, &layer.mlp_norm, self.config.norm_eps);
        let mut u = matmul(&xn, layer.w_up.data(), n, h, f);
        match (&layer.w_gate, self.config.mlp) {
            (Some(wg), MlpVariant::Silu) => {
                let g = matmul(&xn, wg.data(), n, h, f);
                for (a, &b) in u.iter_mut().zip(&g) {
                    *a *= b / (T::one() + (-b).exp());
                }
            }
            _ => {
                for a in &mut u {
                    *a = a.max(T::zero());
                }
            }
        }
        u
    }

    fn exact_attention_scores(&self, tape: &mut Tape<T>, l: usize, x: &[T], grid: BlockGrid) -> Result<BlockScoreMatrix> {
        let n = grid.seq_len;
        let (q, k) = self.queries_keys(l, x, n);
        let (nh, hd) = (self.config.n_heads, self.config.head_dim());
        let m = exact_block_scores(
            HeadsView::interleaved(&q, n, nh, hd)?,
            HeadsView::interleaved(&k, n, nh, hd)?,
            grid.block_size.min(n),
            tape.ledger_mut(),
        )?;
        // A block larger than the sequence collapses to one block over all tokens.
        let m = if grid.block_size > n { BlockScoreMatrix::from_packed(grid, m.packed().to_vec())? } else { m };
        Ok(m.with_tag(l, Component::Attention))
    }

    fn exact_mlp_scores(&self, l: usize, x: &[T], grid: BlockGrid) -> Result<BlockScoreMatrix> {
        let inner = self.mlp_inner(l, x, grid.seq_len);
        let tok = mlp_token_informativeness(&inner, grid.seq_len, self.config.d_ff)?;
        Ok(mlp_block_scores(&tok, grid)?.with_tag(l, Component::Mlp))
    }

    fn threshold(t: &ThresholdSet, l: usize, c: Component) -> Result<f64> {
        t.get(l, c).ok_or_else(|| Error::Contract(format!("no threshold for layer {l} {c}")))
    }

    /// Full forward pass: embeddings, every layer under `policy`, final norm
    /// and (with `targets`) the segmented LM loss.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        targets: Option<&[usize]>,
        policy: PatternPolicy<'_, T>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput<T>> {
        self.check_tokens(tokens)?;
        let vars = self.bind(tape, opts.no_grad);
        self.forward_with(tape, vars, tokens, targets, policy, opts)
    }

    /// [`Model::forward`] on parameters already placed on the tape.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        vars: ModelVars,
        tokens: &[usize],
        targets: Option<&[usize]>,
        policy: PatternPolicy<'_, T>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput<T>> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let grid = self.grid(n)?;
        if let PatternPolicy::Fixed(p) = policy {
            ensure!(p.len() == self.layers.len(), Contract, "{} pattern pairs for {} layers", p.len(), self.layers.len());
            for lp in p {
                ensure!(
                    lp.attention.grid.seq_len == n && lp.mlp.grid.seq_len == n,
                    Contract,
                    "pattern over {} tokens for a sequence of {n}",
                    lp.attention.grid.seq_len
                );
            }
        }
        let mut x = self.embed_tokens(tape, &vars, tokens)?;
        let mut patterns = Vec::with_capacity(self.layers.len());
        let mut captures = Vec::new();
        for l in 0..self.layers.len() {
            tape.push_scope(ScopeTag::new(format!("layer{l}")).layer(l));
            tape.push_scope(ScopeTag::new("scoring"));
            let need_exact_attn = opts.capture || matches!(policy, PatternPolicy::Exact { .. });
            let need_exact_mlp = opts.capture
                || matches!(policy, PatternPolicy::Exact { mlp: true, .. } | PatternPolicy::Predicted { mlp: true, .. });
            let need_input = need_exact_attn || need_exact_mlp || matches!(policy, PatternPolicy::Predicted { .. });
            let xin = if need_input { tape.value(x).to_vec() } else { Vec::new() };
            let attn_scores = if need_exact_attn { Some(self.exact_attention_scores(tape, l, &xin, grid)?) } else { None };
            let mlp_scores = if need_exact_mlp { Some(self.exact_mlp_scores(l, &xin, grid)?) } else { None };
            let lp = match policy {
                PatternPolicy::Dense => None,
                PatternPolicy::Fixed(p) => Some(p[l].clone()),
                PatternPolicy::Exact { thresholds, sinks, mlp } => {
                    let s = token_block_scores(attn_scores.as_ref().expect("computed above"));
                    let attention = eliminate(&s, Self::threshold(thresholds, l, Component::Attention)?, grid, sinks)?;
                    let mlp = match (&mlp_scores, mlp) {
                        (Some(m), true) => eliminate(&token_block_scores(m), Self::threshold(thresholds, l, Component::Mlp)?, grid, sinks)?,
                        _ => SparsityPattern::all(grid),
                    };
                    Some(LayerPatterns { attention: attention.with_tag(l, Component::Attention), mlp: mlp.with_tag(l, Component::Mlp) })
                }
                PatternPolicy::Predicted { predictors, thresholds, sinks, mlp } => {
                    let xt = Tensor::from_vec(&[n, self.config.hidden], xin.clone())?;
                    let s = predictors.token_block_scores(l, &xt, grid)?;
                    let attention = eliminate(&s, Self::threshold(thresholds, l, Component::Attention)?, grid, sinks)?;
                    let mlp = match (&mlp_scores, mlp) {
                        (Some(m), true) => eliminate(&token_block_scores(m), Self::threshold(thresholds, l, Component::Mlp)?, grid, sinks)?,
                        _ => SparsityPattern::all(grid),
                    };
                    Some(LayerPatterns { attention: attention.with_tag(l, Component::Attention), mlp: mlp.with_tag(l, Component::Mlp) })
                }
            };
            tape.pop_scope();
            if opts.capture {
                captures.push(LayerCapture {
                    layer: l,
                    input: Tensor::from_vec(&[n, self.config.hidden], xin)?,
                    attention_scores: attn_scores.expect("captured"),
                    mlp_scores: mlp_scores.expect("captured"),
                });
            }
            let lv = vars.layers[l];
            tape.push_scope(ScopeTag::new("attention").component(Component::Attention));
            x = self.attention_block(tape, &lv, l, x, lp.as_ref().map(|p| &p.attention), opts.fused)?;
            tape.pop_scope();
            tape.push_scope(ScopeTag::new("mlp").component(Component::Mlp));
            x = self.mlp_block(tape, &lv, l, x, lp.as_ref().map(|p| &p.mlp), opts.fused)?;
            tape.pop_scope();
            tape.pop_scope();
            patterns.push(lp.unwrap_or_else(|| LayerPatterns::all(grid, l)));
            if opts.release {
                tape.release_unsaved(&[x]);
            }
        }
        tape.push_scope(ScopeTag::new("head"));
        let hidden = tape.rmsnorm(x, &self.final_norm, self.config.norm_eps)?;
        let loss = match targets {
            Some(t) => {
                ensure!(t.len() == n, Dimension, "{} targets for {n} tokens", t.len());
                let plan = match opts.segments {
                    Some(k) => SegmentPlan::new(n, k.min(n))?,
                    None => SegmentPlan::default_for(n),
                };
                Some(tape.lm_head_loss(hidden, vars.lm_head, t, &plan)?)
            }
            None => None,
        };
        tape.pop_scope();
        tape.ledger_mut().mark(POST_FORWARD);
        Ok(ForwardOutput { loss, hidden, vars, patterns, captures })
    }

    /// Loss without gradients.
    pub fn eval_loss(&self, tokens: &[usize], targets: &[usize], policy: PatternPolicy<'_, T>, opts: &ForwardOptions) -> Result<f64> {
        let mut tape = Tape::new();
        let o = ForwardOptions { no_grad: true, release: true, capture: false, ..opts.clone() };
        let out = self.forward(&mut tape, tokens, Some(targets), policy, &o)?;
        Ok(tape.scalar(out.loss.expect("targets given")).as_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { n_layers: 2, hidden: 16, n_heads: 2, vocab: 32, max_seq_len: 64, d_ff: 32, block_size: 4, ..Default::default() }
    }

    #[test]
    fn adapter_count_from_config() {
        let m = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.trainable_count(), 8192);
        assert_eq!(m.trainable_parameters().len(), 16);
        let m = Model::<f32>::new(ModelConfig { lora_rank: 0, ..ModelConfig::default() }, 0).unwrap();
        assert_eq!(m.trainable_count(), 0);
        assert!(m.trainable_parameters().is_empty());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Model::<f32>::new(ModelConfig { n_heads: 3, ..small() }, 0).is_err());
        assert!(Model::<f32>::new(ModelConfig { hidden: 6, n_heads: 2, ..small() }, 0).is_err());
    }

    #[test]
    fn out_of_vocab_token_is_an_index_error() {
        let m = Model::<f64>::new(small(), 0).unwrap();
        let r = m.eval_loss(&[1, 40], &[2, 3], PatternPolicy::Dense, &ForwardOptions::default());
        assert!(matches!(r, Err(Error::Index(_))));
    }

    #[test]
    fn empty_pattern_returns_zeros() {
        let m = Model::<f64>::new(small(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[8, 16], 1.0, &mut rng);
        let grid = m.grid(8).unwrap();
        let out = m.attention_block_forward(0, &x, &SparsityPattern::none(grid)).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
        let out = m.mlp_block_forward(1, &x, &SparsityPattern::none(grid)).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }
}
