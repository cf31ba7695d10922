//! The pipeline steps, each reading and writing fixed names under the run
//! directory.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sparsetune_core::kernels::bench::{bench_kernels, BenchConfig, BenchRow};
use sparsetune_core::model::{ForwardOptions, Model, PatternPolicy};
use sparsetune_core::predictor::{
    evaluate_recall, predicted_thresholds, train_predictors, transfer_thresholds, PredictorSet, PredictorTrainConfig,
};
use sparsetune_core::sparsity::{init_thresholds, sparsity_ratio, token_block_scores, tune_thresholds, TuneRecord};
use sparsetune_core::train::{collect_teacher, evaluate, profile_scores, Trainer};
use sparsetune_core::{BlockGrid, BlockScoreMatrix, Component, ThresholdSet};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Container, NamedTensor, TensorData};
use crate::config::{Init, RunConfig};
use crate::corpus::{chunk, load_corpus, split, Sequence, Splits};
use crate::error::{io, HarnessError, Result};
use crate::metrics::{write_csv, write_json, LedgerRow, MetricsRecord, MetricsWriter, SeriesRow};

pub const CONFIG_FILE: &str = "config.toml";
pub const BASE_CKPT: &str = "base.ckpt";
pub const PREDICTOR_CKPT: &str = "predictors.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const THRESHOLDS_FILE: &str = "thresholds.json";
pub const PROFILE_DUMP: &str = "profiles/block_scores.tspk";
pub const PREDICTOR_CURVE: &str = "predictor_curve.csv";

/// Ratio cut-offs (share of the maximum) for the sparsity-ratio table.
pub const RATIO_FRACTIONS: [f64; 2] = [0.01, 0.1];

const WARMUP_STREAM: u64 = 0x5741_524d;
const FINETUNE_STREAM: u64 = 0x4649_4e45;
const PREDICTOR_STREAM: u64 = 0x5052_4544;

type M = Model<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Predicted (or exact, with the predictor disabled) patterns under the
    /// tuned thresholds.
    Sparse,
    /// The LoRA baseline: no elimination.
    Dense,
    /// The sparse code path with every block retained.
    RetainAll,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdArtifact {
    pub artifact_hash: String,
    pub block_size: usize,
    pub seq_len: usize,
    pub init: ThresholdSet,
    pub tuned: ThresholdSet,
    pub records: Vec<TuneRecord>,
    pub acc_init: f64,
    pub acc_tuned: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub name: String,
    pub layer: usize,
    pub component: Component,
    pub batch: usize,
    pub n_blocks: usize,
    pub block_size: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub layer: usize,
    pub component: Component,
    pub frac: f64,
    pub ratio: Option<f64>,
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScoreRow {
    pub layer: usize,
    pub component: Component,
    pub mean_block_score: f64,
    pub max_block_score: f64,
    pub mean_token_block_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub batches: usize,
    pub records: usize,
    pub undefined_rows: usize,
    pub ratios: Vec<RatioRow>,
    pub layers: Vec<LayerScoreRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorSummary {
    pub train_samples: usize,
    pub val_samples: usize,
    pub final_recall: Option<f64>,
    pub final_precision: Option<f64>,
    /// Recall at the tuned operating thresholds.
    pub operating_recall: f64,
    pub param_count: usize,
    pub full_param_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub mode: FinetuneMode,
    pub steps: usize,
    pub final_loss: f64,
    pub final_eval_loss: f64,
    pub final_eval_loss_sparse: f64,
    pub final_eval_ppl: f64,
    pub mean_retained_attention: f64,
    pub mean_retained_mlp: f64,
    pub max_peak_activation: usize,
    pub mean_wall_ms: f64,
}

/// A configured run bound to its output directory.
pub struct Run {
    pub cfg: RunConfig,
}

/// Training sequence indices for `steps` steps: a fresh shuffle each pass.
pub fn sequence_order(n: usize, steps: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(steps);
    let mut perm: Vec<usize> = (0..n).collect();
    while out.len() < steps && n > 0 {
        perm.shuffle(&mut rng);
        out.extend(perm.iter().take(steps - out.len()));
    }
    out
}

impl Run {
    /// Validates `cfg`, creates the directory layout and writes the config
    /// snapshot.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let run = Run { cfg };
        for d in [run.out().to_path_buf(), run.out().join("profiles"), run.cfg.checkpoint_dir()] {
            io(&d, std::fs::create_dir_all(&d))?;
        }
        let snapshot = run.out().join(CONFIG_FILE);
        io(&snapshot, std::fs::write(&snapshot, run.cfg.to_toml()?))?;
        Ok(run)
    }

    pub fn out(&self) -> &Path {
        &self.cfg.paths.out
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.cfg.checkpoint_dir().join(name)
    }

    fn forward_options(&self) -> ForwardOptions {
        ForwardOptions { fused: self.cfg.kernel.fused, segments: self.cfg.kernel.segments, ..Default::default() }
    }

    fn sinks(&self) -> Vec<usize> {
        (0..self.cfg.sparsity.sink_blocks).collect()
    }

    pub fn data(&self) -> Result<Splits> {
        let path = self.cfg.paths.corpus.as_ref().ok_or_else(|| HarnessError::Config("paths.corpus is not set".into()))?;
        let tokens = load_corpus(path, self.cfg.paths.tokenizer, self.cfg.model.vocab)?;
        split(chunk(&tokens, self.cfg.training.seq_len)?, self.cfg.training.eval_sequences)
    }

    fn check_hash(&self, artifact: &Path, hash: &str, block_size: Option<usize>) -> Result<()> {
        if let Some(b) = block_size {
            if b != self.cfg.model.block_size {
                return Err(HarnessError::Stale {
                    artifact: artifact.to_path_buf(),
                    detail: format!("block size b = {b}, current config has b = {}", self.cfg.model.block_size),
                });
            }
        }
        let want = self.cfg.artifact_hash();
        if hash != want {
            return Err(HarnessError::Stale { artifact: artifact.to_path_buf(), detail: format!("config hash {hash}, current {want}") });
        }
        Ok(())
    }

    /// The frozen model with its initial adapters, after the configured
    /// dense warmup. Built once and cached as a checkpoint; `rebuild`
    /// replaces the cached copy.
    pub fn base_model(&self, data: &Splits, rebuild: bool) -> Result<M> {
        let path = self.checkpoint(BASE_CKPT);
        if path.exists() && !rebuild {
            let ck = load_checkpoint::<f32>(&path)?;
            self.check_hash(&path, &ck.meta.artifact_hash, Some(ck.meta.config.model.block_size))?;
            return ck.model.ok_or_else(|| HarnessError::Checkpoint { path, msg: "holds no model".into() });
        }
        let t = &self.cfg.training;
        let mut model = M::new(self.cfg.model.clone(), t.seed)?;
        if t.init == Init::Zeros {
            for (_, v) in model.state_mut() {
                v.fill(0.0);
            }
        }
        if t.warmup_steps > 0 {
            let mut trainer = Trainer::<f32>::new(t.lr);
            let opts = self.forward_options();
            for i in sequence_order(data.train.len(), t.warmup_steps, t.seed ^ WARMUP_STREAM) {
                let (tokens, targets) = data.train[i].pair();
                trainer.step(&mut model, &tokens, &targets, PatternPolicy::Dense, &opts)?;
            }
        }
        save_checkpoint(&path, &self.cfg, Some(&model), None, None, json!({ "stage": "base", "warmup_steps": t.warmup_steps }))?;
        Ok(model)
    }

    fn require(&self, path: PathBuf, step: &'static str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(HarnessError::Dependency { step, artifact: path })
        }
    }

    /// Exact scores over a shard: score dumps, the sparsity-ratio table and
    /// per-layer score profile.
    pub fn profile(&self) -> Result<ProfileSummary> {
        let data = self.data()?;
        let model = self.base_model(&data, true)?;
        let n = self.cfg.sparsity.profile_sequences.min(data.train.len());
        let mut records = Vec::new();
        let mut tensors = Vec::new();
        let mut mats = Vec::new();
        for (batch, seq) in data.train[..n].iter().enumerate() {
            for m in profile_scores(&model, &seq.tokens)? {
                let name = format!("l{}.{}.batch{batch}", m.layer, m.component);
                records.push(ProfileRecord {
                    name: name.clone(),
                    layer: m.layer,
                    component: m.component,
                    batch,
                    n_blocks: m.n_blocks(),
                    block_size: m.grid.block_size,
                    seq_len: m.grid.seq_len,
                });
                tensors.push(NamedTensor { name, shape: vec![m.packed().len()], data: TensorData::F64(m.packed().to_vec()) });
                mats.push(m);
            }
        }
        let metadata = json!({ "artifact_hash": self.cfg.artifact_hash(), "records": records });
        Container { metadata, tensors }.save(&self.out().join(PROFILE_DUMP))?;
        let summary = summarize_profile(&mats, n)?;
        let dir = self.out().join("profiles");
        write_csv(&dir.join("sparsity_ratio.csv"), &summary.ratios)?;
        write_csv(&dir.join("layer_scores.csv"), &summary.layers)?;
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    }

    /// Score matrices from the profile dump.
    pub fn load_profile(&self) -> Result<Vec<BlockScoreMatrix>> {
        let path = self.require(self.out().join(PROFILE_DUMP), "profile")?;
        let c = Container::load(&path)?;
        let hash = c.metadata["artifact_hash"].as_str().unwrap_or_default().to_string();
        self.check_hash(&path, &hash, None)?;
        let records: Vec<ProfileRecord> = serde_json::from_value(c.metadata["records"].clone())
            .map_err(|e| HarnessError::Checkpoint { path: path.clone(), msg: format!("unreadable profile records: {e}") })?;
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            let t = c.get(&r.name).ok_or_else(|| HarnessError::Checkpoint { path: path.clone(), msg: format!("missing {}", r.name) })?;
            let TensorData::F64(v) = &t.data else {
                return Err(HarnessError::Checkpoint { path: path.clone(), msg: format!("{} is not f64", r.name) });
            };
            let grid = BlockGrid::new(r.seq_len, r.block_size)?;
            out.push(BlockScoreMatrix::from_packed(grid, v.clone())?.with_tag(r.layer, r.component));
        }
        Ok(out)
    }

    fn tune_batches(&self, data: &Splits) -> Vec<(Vec<usize>, Vec<usize>)> {
        let n = self.cfg.sparsity.tune_sequences.min(data.train.len());
        data.train[data.train.len() - n..].iter().map(Sequence::pair).collect()
    }

    /// Threshold initialisation from the profile, then finite-difference
    /// tuning against held-out loss.
    pub fn tune_thresholds(&self) -> Result<ThresholdArtifact> {
        let mats = self.load_profile()?;
        let data = self.data()?;
        let model = self.base_model(&data, false)?;
        let init = init_thresholds(&mats)?;
        let batches = self.tune_batches(&data);
        let opts = self.forward_options();
        let sinks = self.sinks();
        let mlp = self.cfg.sparsity.mlp;
        let acc = |t: &ThresholdSet| -> sparsetune_core::Result<f64> {
            Ok(-evaluate(&model, &batches, PatternPolicy::Exact { thresholds: t, sinks: &sinks, mlp }, &opts)?)
        };
        let acc_init = acc(&init)?;
        let (tuned, records) = tune_thresholds(acc, &init, &self.cfg.sparsity.tune)?;
        let acc_tuned = acc(&tuned)?;
        let art = ThresholdArtifact {
            artifact_hash: self.cfg.artifact_hash(),
            block_size: self.cfg.model.block_size,
            seq_len: self.cfg.training.seq_len,
            init,
            tuned,
            records,
            acc_init,
            acc_tuned,
        };
        write_json(&self.out().join(THRESHOLDS_FILE), &art)?;
        Ok(art)
    }

    /// The tuned thresholds this run should use.
    pub fn thresholds(&self) -> Result<ThresholdArtifact> {
        let path = match &self.cfg.sparsity.thresholds_file {
            Some(p) => p.clone(),
            None => self.require(self.out().join(THRESHOLDS_FILE), "tune-thresholds")?,
        };
        let art: ThresholdArtifact = crate::metrics::read_json(&path)?;
        self.check_hash(&path, &art.artifact_hash, Some(art.block_size))?;
        Ok(art)
    }

    /// Teacher labels from the base model, predictor training with elastic
    /// pruning, and the predicted-score thresholds.
    pub fn train_predictors(&self) -> Result<PredictorSummary> {
        let art = self.thresholds()?;
        let data = self.data()?;
        let model = self.base_model(&data, false)?;
        let p = &self.cfg.predictor;
        let n_val = p.val_sequences.min(data.train.len() / 2).max(1);
        let n_train = p.train_sequences.min(data.train.len() - n_val);
        if n_train == 0 {
            return Err(HarnessError::Contract("not enough training sequences for predictor training".into()));
        }
        let seqs = |r: std::ops::Range<usize>| data.train[r].iter().map(|s| s.tokens.clone()).collect::<Vec<_>>();
        let train = collect_teacher(&model, &seqs(0..n_train))?;
        let val = collect_teacher(&model, &seqs(n_train..n_train + n_val))?;
        let seed = self.cfg.training.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PREDICTOR_STREAM);
        let mut set = PredictorSet::<f32>::new(self.cfg.model.n_layers, self.cfg.model.hidden, p.predictor_config(self.cfg.model.hidden), &mut rng);
        let tcfg = PredictorTrainConfig { epochs: p.epochs, lr: p.lr, batch_size: p.batch_size, seed, prune: Some(p.prune), eval_every: p.eval_every };
        let history = train_predictors(&mut set, &train, &val, &tcfg)?;
        let pred_init = predicted_thresholds(&set, &train)?;
        let operating = transfer_thresholds(&pred_init, &art.init, &art.tuned)?;
        let (operating_recall, _) = evaluate_recall(&set, &val, &art.tuned, &operating)?;
        let last = history.iter().rev().find(|r| r.recall.is_some());
        let summary = PredictorSummary {
            train_samples: train.len(),
            val_samples: val.len(),
            final_recall: last.and_then(|r| r.recall),
            final_precision: last.and_then(|r| r.precision),
            operating_recall,
            param_count: set.param_count(),
            full_param_count: set.full_param_count(),
        };
        save_checkpoint(&self.checkpoint(PREDICTOR_CKPT), &self.cfg, None, Some(&set), Some(&operating), json!({ "stage": "predictors" }))?;
        write_csv(&self.out().join(PREDICTOR_CURVE), &history)?;
        write_json(&self.out().join("predictor_summary.json"), &summary)?;
        Ok(summary)
    }

    fn predictors(&self) -> Result<(PredictorSet<f32>, ThresholdSet)> {
        let path = self.require(self.checkpoint(PREDICTOR_CKPT), "train-predictors")?;
        let ck = load_checkpoint::<f32>(&path)?;
        self.check_hash(&path, &ck.meta.artifact_hash, Some(ck.meta.config.model.block_size))?;
        let bad = |msg: &str| HarnessError::Checkpoint { path: path.clone(), msg: msg.into() };
        let set = ck.predictors.ok_or_else(|| bad("holds no predictors"))?;
        let t = ck.meta.thresholds.ok_or_else(|| bad("holds no thresholds"))?;
        Ok((set, t))
    }

    /// LoRA fine-tuning with per-step metrics, the ledger export and a final
    /// checkpoint.
    pub fn finetune(&self, mode: FinetuneMode) -> Result<FinetuneSummary> {
        let (exact_t, predicted) = match mode {
            FinetuneMode::Dense => (None, None),
            FinetuneMode::RetainAll => (Some(ThresholdSet::uniform(self.cfg.model.n_layers, f64::NEG_INFINITY)), None),
            FinetuneMode::Sparse => {
                let art = self.thresholds()?;
                if self.cfg.predictor.enabled {
                    (Some(art.tuned), Some(self.predictors()?))
                } else {
                    (Some(art.tuned), None)
                }
            }
        };
        let data = self.data()?;
        let mut model = self.base_model(&data, false)?;
        let sinks = self.sinks();
        let mlp = self.cfg.sparsity.mlp;
        let policy: PatternPolicy<'_, f32> = match (&exact_t, &predicted) {
            (None, _) => PatternPolicy::Dense,
            (Some(t), None) => PatternPolicy::Exact { thresholds: t, sinks: &sinks, mlp },
            (Some(_), Some((set, t))) => PatternPolicy::Predicted { predictors: set, thresholds: t, sinks: &sinks, mlp },
        };
        let t = &self.cfg.training;
        let opts = self.forward_options();
        let eval: Vec<_> = data.eval.iter().map(Sequence::pair).collect();
        let eval_seqs: Vec<Vec<usize>> = data.eval.iter().map(|s| s.tokens.clone()).collect();
        let mut trainer = Trainer::<f32>::new(t.lr);
        let mut metrics = MetricsWriter::create(self.out(), self.cfg.model.n_layers)?;
        let mut ledger_rows = Vec::with_capacity(t.steps);
        let mut series = Vec::new();
        let order = sequence_order(data.train.len(), t.steps, t.seed ^ FINETUNE_STREAM);
        for (i, &seq) in order.iter().enumerate() {
            let last = i + 1 == t.steps;
            let (tokens, targets) = data.train[seq].pair();
            let (stats, ledger) = trainer.step_with_report(&mut model, &tokens, &targets, policy, &opts, last)?;
            if last {
                series = ledger.report().series.iter().map(|p| SeriesRow { step: stats.step, timestamp: p.timestamp, live_bytes: p.live_bytes }).collect();
            }
            ledger_rows.push(LedgerRow::from_stats(&stats));
            let mut rec = MetricsRecord::from_stats(&stats);
            if last || (t.eval_every > 0 && (i + 1) % t.eval_every == 0) {
                let dense = evaluate(&model, &eval, PatternPolicy::Dense, &opts)?;
                rec.eval_loss = Some(dense);
                rec.eval_ppl = Some(dense.exp());
                rec.eval_loss_sparse = Some(match policy {
                    PatternPolicy::Dense => dense,
                    p => evaluate(&model, &eval, p, &opts)?,
                });
                if let (Some((set, pt)), Some(et)) = (&predicted, &exact_t) {
                    let teacher = collect_teacher(&model, &eval_seqs)?;
                    rec.predictor_recall = Some(evaluate_recall(set, &teacher, et, pt)?.0);
                }
            }
            metrics.push(rec)?;
        }
        let records = metrics.finish()?;
        write_csv(&self.out().join("ledger.csv"), &ledger_rows)?;
        write_csv(&self.out().join("ledger_series.csv"), &series)?;
        let thresholds = predicted.as_ref().map(|p| &p.1).or(exact_t.as_ref());
        save_checkpoint(
            &self.checkpoint(FINAL_CKPT),
            &self.cfg,
            Some(&model),
            predicted.as_ref().map(|p| &p.0),
            thresholds,
            json!({ "stage": "final", "mode": mode }),
        )?;
        let summary = finetune_summary(mode, &records)?;
        write_json(&self.out().join("summary.json"), &summary)?;
        Ok(summary)
    }

    /// Kernel benchmark at a quarter, half and the full configured length.
    pub fn bench(&self, reps: usize) -> Result<Vec<BenchRow>> {
        let model = M::new(self.cfg.model.clone(), self.cfg.training.seed)?;
        let s = self.cfg.training.seq_len;
        let mut seq_lens: Vec<usize> = [s / 4, s / 2, s].into_iter().filter(|&x| x > 0).collect();
        seq_lens.dedup();
        let segments = match self.cfg.kernel.segments {
            Some(n) if n > 1 => vec![1, n],
            _ => BenchConfig::default().segments,
        };
        let bc = BenchConfig { seq_lens, segments, seed: self.cfg.training.seed, reps, ..Default::default() };
        let rows = bench_kernels(&model, &bc)?;
        write_csv(&self.out().join("bench.csv"), &rows)?;
        write_json(&self.out().join("bench.json"), &rows)?;
        Ok(rows)
    }
}

fn summarize_profile(mats: &[BlockScoreMatrix], batches: usize) -> Result<ProfileSummary> {
    let mut keys: Vec<(usize, Component)> = mats.iter().map(|m| (m.layer, m.component)).collect();
    keys.sort();
    keys.dedup();
    let mut ratios = Vec::new();
    let mut layers = Vec::new();
    for (layer, component) in keys {
        let group: Vec<&BlockScoreMatrix> = mats.iter().filter(|m| m.layer == layer && m.component == component).collect();
        let values: Vec<f64> = group.iter().flat_map(|m| m.packed().iter().copied()).collect();
        for frac in RATIO_FRACTIONS {
            let ratio = sparsity_ratio(&values, None, frac)?;
            ratios.push(RatioRow { layer, component, frac, ratio, undefined: ratio.is_none() });
        }
        let tb: Vec<f64> = group.iter().flat_map(|m| token_block_scores(m)).collect();
        layers.push(LayerScoreRow {
            layer,
            component,
            mean_block_score: values.iter().sum::<f64>() / values.len().max(1) as f64,
            max_block_score: values.iter().copied().fold(0.0, f64::max),
            mean_token_block_score: tb.iter().sum::<f64>() / tb.len().max(1) as f64,
        });
    }
    let undefined_rows = ratios.iter().filter(|r| r.undefined).count();
    Ok(ProfileSummary { batches, records: mats.len(), undefined_rows, ratios, layers })
}

fn finetune_summary(mode: FinetuneMode, records: &[MetricsRecord]) -> Result<FinetuneSummary> {
    let last = records.last().ok_or_else(|| HarnessError::Contract("fine-tuning ran no steps".into()))?;
    let n = records.len() as f64;
    let mean_over = |f: &dyn Fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let layer_mean = |r: &MetricsRecord, a: bool| {
        r.retained.iter().map(|x| if a { x.attention } else { x.mlp }).sum::<f64>() / r.retained.len().max(1) as f64
    };
    Ok(FinetuneSummary {
        mode,
        steps: records.len(),
        final_loss: last.loss,
        final_eval_loss: last.eval_loss.unwrap_or(f64::NAN),
        final_eval_loss_sparse: last.eval_loss_sparse.unwrap_or(f64::NAN),
        final_eval_ppl: last.eval_ppl.unwrap_or(f64::NAN),
        mean_retained_attention: mean_over(&|r| layer_mean(r, true)),
        mean_retained_mlp: mean_over(&|r| layer_mean(r, false)),
        max_peak_activation: records.iter().map(|r| r.peak_activation).max().unwrap_or(0),
        mean_wall_ms: mean_over(&|r| r.wall_ms),
    })
}
