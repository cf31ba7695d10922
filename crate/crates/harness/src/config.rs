//! Run configuration.
//!
//! Every field has a default, so an empty file is a valid config. The
//! defaults, in one place:
//!
//! | key                              | default                          |
//! |----------------------------------|----------------------------------|
//! | `model.*`                        | 4 layers, h=64, 4 heads, V=256, d_ff=256, SiLU MLP, LoRA r=8 α=16 on q/v, b=16, RoPE |
//! | `model.block_size`               | 16 (the token-block size `b`)    |
//! | `sparsity.thresholds_file`       | unset: use `thresholds.json` from `tune-thresholds` |
//! | `sparsity.sink_blocks`           | 0 (number of leading blocks never eliminated) |
//! | `sparsity.mlp`                   | true (MLP blocks are scored and eliminated) |
//! | `sparsity.profile_sequences`     | 8                                |
//! | `sparsity.tune_sequences`        | 4                                |
//! | `sparsity.tune`                  | ε = 0.05·\|T\| + 1e-3, η = 1, 1 round, steps clamped to 10% of \|T\| |
//! | `predictor.enabled`              | true                             |
//! | `predictor.r1`, `r2`, `d_pred`   | h/4, h/4, 16                     |
//! | `predictor.pooling`              | `block_mean`                     |
//! | `predictor.train_sequences`      | 64                               |
//! | `predictor.val_sequences`        | 16                               |
//! | `predictor.epochs`               | 200                              |
//! | `predictor.lr`                   | 3e-3                             |
//! | `predictor.batch_size`           | 4                                |
//! | `predictor.eval_every`           | 20                               |
//! | `predictor.prune`                | keep 50% of parameters, 10% of active neurons every 20 epochs (`every = 0` disables) |
//! | `kernel.fused`                   | true                             |
//! | `kernel.segments`                | unset: one segment per 128 tokens |
//! | `training.lr`                    | 1e-3                             |
//! | `training.steps`                 | 500                              |
//! | `training.seq_len`               | 512                              |
//! | `training.seed`                  | 0                                |
//! | `training.eval_every`            | 100                              |
//! | `training.eval_sequences`        | 8                                |
//! | `training.warmup_steps`          | 0 (dense LoRA steps before profiling) |
//! | `training.init`                  | `random`                         |
//! | `paths.corpus`                   | unset (required by every data-reading step) |
//! | `paths.tokenizer`                | `bytes`                          |
//! | `paths.out`                      | `runs/default`                   |
//! | `paths.checkpoints`              | unset: `<out>/checkpoints`       |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sparsetune_core::model::ModelConfig;
use sparsetune_core::predictor::{Pooling, PredictorConfig, PruneSchedule};
use sparsetune_core::sparsity::TuneParams;

use crate::corpus::TokenizerKind;
use crate::error::{format_err, io, HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sparsity: SparsitySettings,
    pub predictor: PredictorSettings,
    pub kernel: KernelSettings,
    pub training: TrainingSettings,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsitySettings {
    pub thresholds_file: Option<PathBuf>,
    pub sink_blocks: usize,
    pub mlp: bool,
    pub profile_sequences: usize,
    pub tune_sequences: usize,
    pub tune: TuneParams,
}

impl Default for SparsitySettings {
    fn default() -> Self {
        SparsitySettings {
            thresholds_file: None,
            sink_blocks: 0,
            mlp: true,
            profile_sequences: 8,
            tune_sequences: 4,
            tune: TuneParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSettings {
    pub enabled: bool,
    pub r1: Option<usize>,
    pub r2: Option<usize>,
    pub d_pred: Option<usize>,
    pub pooling: Pooling,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    /// `every = 0` disables pruning.
    pub prune: PruneSchedule,
}

impl Default for PredictorSettings {
    fn default() -> Self {
        PredictorSettings {
            enabled: true,
            r1: None,
            r2: None,
            d_pred: None,
            pooling: Pooling::BlockMean,
            train_sequences: 64,
            val_sequences: 16,
            epochs: 200,
            lr: 3e-3,
            batch_size: 4,
            eval_every: 20,
            prune: PruneSchedule::default(),
        }
    }
}

impl PredictorSettings {
    pub fn predictor_config(&self, hidden: usize) -> PredictorConfig {
        let d = PredictorConfig::for_hidden(hidden);
        PredictorConfig {
            r1: self.r1.unwrap_or(d.r1),
            r2: self.r2.unwrap_or(d.r2),
            d_pred: self.d_pred.unwrap_or(d.d_pred),
            pooling: self.pooling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSettings {
    pub fused: bool,
    pub segments: Option<usize>,
}

impl Default for KernelSettings {
    fn default() -> Self {
        KernelSettings { fused: true, segments: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    Random,
    /// Every weight zero; used to check the degenerate profile.
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    pub lr: f64,
    pub steps: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_sequences: usize,
    pub warmup_steps: usize,
    pub init: Init,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        TrainingSettings { lr: 1e-3, steps: 500, seq_len: 512, seed: 0, eval_every: 100, eval_sequences: 8, warmup_steps: 0, init: Init::Random }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub tokenizer: TokenizerKind,
    pub out: PathBuf,
    pub checkpoints: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { corpus: None, tokenizer: TokenizerKind::Bytes, out: PathBuf::from("runs/default"), checkpoints: None }
    }
}

/// The part of a config that shapes the base model and its profiles.
/// Artifacts derived from the base model carry its hash.
#[derive(Serialize)]
struct ArtifactKey<'a> {
    model: &'a ModelConfig,
    seed: u64,
    seq_len: usize,
    warmup_steps: usize,
    warmup_lr: f64,
    init: Init,
    corpus: &'a Option<PathBuf>,
    tokenizer: TokenizerKind,
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(12).map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io(path, std::fs::read_to_string(path))?;
        Self::from_toml(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| format_err("config", e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.training;
        let bad = |m: String| Err(HarnessError::Config(m));
        if t.seq_len == 0 || t.seq_len > self.model.max_seq_len {
            return bad(format!("training.seq_len {} must lie in 1..={}", t.seq_len, self.model.max_seq_len));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(self.predictor.lr > 0.0 && self.predictor.lr.is_finite()) {
            return bad("learning rates must be positive and finite".into());
        }
        if t.eval_sequences == 0 {
            return bad("training.eval_sequences must be positive".into());
        }
        if self.predictor.batch_size == 0 {
            return bad("predictor.batch_size must be positive".into());
        }
        if self.sparsity.profile_sequences == 0 || self.sparsity.tune_sequences == 0 {
            return bad("sparsity.profile_sequences and sparsity.tune_sequences must be positive".into());
        }
        if self.kernel.segments == Some(0) {
            return bad("kernel.segments must be positive".into());
        }
        Ok(())
    }

    /// Hash of everything in the config.
    pub fn config_hash(&self) -> String {
        sha_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Hash of the settings that determine the base model and its scores.
    pub fn artifact_hash(&self) -> String {
        let key = ArtifactKey {
            model: &self.model,
            seed: self.training.seed,
            seq_len: self.training.seq_len,
            warmup_steps: self.training.warmup_steps,
            warmup_lr: self.training.lr,
            init: self.training.init,
            corpus: &self.paths.corpus,
            tokenizer: self.paths.tokenizer,
        };
        sha_hex(serde_json::to_string(&key).expect("key serializes").as_bytes())
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths.checkpoints.clone().unwrap_or_else(|| self.paths.out.join("checkpoints"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_config() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.model.block_size = 8;
        c.predictor.prune.every = 0;
        c.kernel.segments = Some(4);
        c.paths.corpus = Some("data/text.txt".into());
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let c = RunConfig::from_toml("[training]\nsteps = 7\n[model]\nblock_size = 8\n").unwrap();
        assert_eq!(c.training.steps, 7);
        assert_eq!(c.training.seq_len, 512);
        assert_eq!(c.model.block_size, 8);
        assert_eq!(c.model.hidden, 64);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("[training]\nstepz = 1\n").is_err());
        assert!(RunConfig::from_toml("[training]\nseq_len = 4096\n").is_err());
        assert!(RunConfig::from_toml("[predictor]\nbatch_size = 0\n").is_err());
    }

    #[test]
    fn artifact_hash_tracks_block_size_not_step_count() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.training.steps = 3;
        assert_eq!(a.artifact_hash(), b.artifact_hash());
        assert_ne!(a.config_hash(), b.config_hash());
        b.model.block_size = 8;
        assert_ne!(a.artifact_hash(), b.artifact_hash());
    }
}
