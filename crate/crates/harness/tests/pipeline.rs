//! The run pipeline on a tiny model: artifacts, dependencies, checkpoints,
//! degenerate inputs and the report.

use std::path::Path;

use proptest::prelude::*;
use serde_json::json;
use sparsetune::checkpoint::{load_checkpoint, save_checkpoint, Container, NamedTensor, TensorData};
use sparsetune::config::{Init, RunConfig};
use sparsetune::corpus::{chunk, generate_text, tokenize_bytes};
use sparsetune::metrics::{read_csv, read_json, MetricsRecord};
use sparsetune::pipeline::{RatioRow, FINAL_CKPT, PREDICTOR_CKPT};
use sparsetune::{FinetuneMode, HarnessError, Run};
use sparsetune_core::model::{ForwardOptions, PatternPolicy};
use sparsetune_core::train::shifted_targets;

fn tiny(dir: &Path) -> RunConfig {
    let corpus = dir.join("corpus.txt");
    if !corpus.exists() {
        std::fs::write(&corpus, generate_text(64 * 40, 3)).unwrap();
    }
    let mut c = RunConfig::default();
    c.model.n_layers = 2;
    c.model.hidden = 16;
    c.model.n_heads = 2;
    c.model.d_ff = 32;
    c.model.block_size = 4;
    c.model.lora_rank = 2;
    c.model.lora_alpha = 4.0;
    c.model.max_seq_len = 64;
    c.training.seq_len = 64;
    c.training.steps = 6;
    c.training.eval_every = 3;
    c.training.eval_sequences = 2;
    c.sparsity.profile_sequences = 2;
    c.sparsity.tune_sequences = 2;
    c.predictor.train_sequences = 8;
    c.predictor.val_sequences = 4;
    c.predictor.epochs = 10;
    c.predictor.eval_every = 5;
    c.predictor.prune.every = 5;
    c.paths.corpus = Some(corpus);
    c.paths.out = dir.join("run");
    c
}

fn full_pipeline(cfg: RunConfig) -> Run {
    let run = Run::new(cfg).unwrap();
    run.profile().unwrap();
    run.tune_thresholds().unwrap();
    run.train_predictors().unwrap();
    run
}

#[test]
fn ten_windows_of_text_give_ten_sequences() {
    let s = 128;
    let text = generate_text(10 * s, 0);
    assert_eq!(text.len(), 10 * s);
    let seqs = chunk(&tokenize_bytes(text.as_bytes()), s).unwrap();
    assert_eq!(seqs.len(), 10);
    assert!(seqs.iter().all(|q| q.tokens.len() == s && q.mask.iter().all(|m| *m)));
}

proptest! {
    #[test]
    fn chunks_are_consecutive_windows(n in 1usize..2000, s in 1usize..300) {
        let stream: Vec<usize> = (0..n).map(|i| i % 256).collect();
        let seqs = chunk(&stream, s).unwrap();
        if n < s {
            prop_assert_eq!(seqs.len(), 1);
            prop_assert_eq!(seqs[0].mask.iter().filter(|m| **m).count(), n);
        } else {
            prop_assert_eq!(seqs.len(), n / s);
            let joined: Vec<usize> = seqs.iter().flat_map(|q| q.tokens.clone()).collect();
            prop_assert_eq!(&joined[..], &stream[..joined.len()]);
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_loss_and_pruned_predictors() {
    let dir = tempfile::tempdir().unwrap();
    let run = full_pipeline(tiny(dir.path()));
    run.finetune(FinetuneMode::Sparse).unwrap();
    let ck = load_checkpoint::<f32>(&run.checkpoint(FINAL_CKPT)).unwrap();
    let model = ck.model.unwrap();
    let set = ck.predictors.unwrap();
    assert!(set.param_count() < set.full_param_count(), "pruning should have removed neurons");

    let again = dir.path().join("again.ckpt");
    save_checkpoint(&again, &ck.meta.config, Some(&model), Some(&set), ck.meta.thresholds.as_ref(), json!({})).unwrap();
    let back = load_checkpoint::<f32>(&again).unwrap();
    let (m2, s2) = (back.model.unwrap(), back.predictors.unwrap());
    assert_eq!(s2.param_count(), set.param_count());

    let tokens = tokenize_bytes(generate_text(64, 9).as_bytes());
    let targets = shifted_targets(&tokens);
    let opts = ForwardOptions::default();
    let t = ck.meta.thresholds.unwrap();
    let policy = |p| PatternPolicy::Predicted { predictors: p, thresholds: &t, sinks: &[0], mlp: true };
    assert_eq!(
        model.eval_loss(&tokens, &targets, policy(&set), &opts).unwrap().to_bits(),
        m2.eval_loss(&tokens, &targets, policy(&s2), &opts).unwrap().to_bits()
    );
}

fn two_tensor_bytes() -> Vec<u8> {
    let c = Container {
        metadata: json!({ "k": 1 }),
        tensors: vec![
            NamedTensor { name: "a".into(), shape: vec![4], data: TensorData::F32(vec![1.0, 2.0, 3.0, 4.0]) },
            NamedTensor { name: "b".into(), shape: vec![2], data: TensorData::F64(vec![5.0, 6.0]) },
        ],
    };
    c.to_bytes().unwrap()
}

/// Replaces the JSON header and fixes up its length field.
fn with_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let hlen = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[24..24 + hlen]).unwrap();
    edit(&mut header);
    let h = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..16].to_vec();
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&bytes[24 + hlen..]);
    out
}

#[test]
fn overlapping_and_foreign_containers_are_rejected() {
    let p = Path::new("x.ckpt");
    let bytes = two_tensor_bytes();
    assert!(Container::from_bytes(&with_header(&bytes, |_| {}), p).is_ok());
    let overlap = with_header(&bytes, |h| h["tensors"][1]["offset"] = json!(8));
    let err = Container::from_bytes(&overlap, p).unwrap_err().to_string();
    assert!(err.contains("overlaps"), "{err}");
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Container::from_bytes(&magic, p).unwrap_err().to_string().contains("magic"));
}

#[test]
fn retain_all_tracks_dense_step_for_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.paths.out = dir.path().join("dense");
    let dense = Run::new(cfg.clone()).unwrap();
    dense.finetune(FinetuneMode::Dense).unwrap();
    cfg.paths.out = dir.path().join("all");
    let all = Run::new(cfg).unwrap();
    all.finetune(FinetuneMode::RetainAll).unwrap();
    let a: Vec<MetricsRecord> = read_json(&dense.out().join("metrics.json")).unwrap();
    let b: Vec<MetricsRecord> = read_json(&all.out().join("metrics.json")).unwrap();
    assert_eq!(a.len(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert!((x.loss - y.loss).abs() <= 1e-6, "step {}: {} vs {}", x.step, x.loss, y.loss);
        assert!(y.retained.iter().all(|r| r.attention == 1.0 && r.mlp == 1.0));
    }
}

#[test]
fn zero_initialised_model_profiles_to_undefined_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.training.init = Init::Zeros;
    let run = Run::new(cfg).unwrap();
    let summary = run.profile().unwrap();
    assert!(run.load_profile().unwrap().iter().all(|m| m.packed().iter().all(|v| *v == 0.0)));
    assert_eq!(summary.undefined_rows, summary.ratios.len());
    let rows: Vec<RatioRow> = read_csv(&run.out().join("profiles/sparsity_ratio.csv")).unwrap();
    assert!(!rows.is_empty() && rows.iter().all(|r| r.undefined && r.ratio.is_none()));
}

#[test]
fn missing_inputs_name_the_step_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(tiny(dir.path())).unwrap();
    let err = run.tune_thresholds().unwrap_err();
    assert!(matches!(err, HarnessError::Dependency { step: "profile", .. }), "{err}");
    assert!(err.to_string().contains("run `profile` first"));
    let err = run.finetune(FinetuneMode::Sparse).unwrap_err();
    assert!(matches!(err, HarnessError::Dependency { step: "tune-thresholds", .. }), "{err}");
    run.profile().unwrap();
    run.tune_thresholds().unwrap();
    let err = run.finetune(FinetuneMode::Sparse).unwrap_err();
    assert!(matches!(err, HarnessError::Dependency { step: "train-predictors", .. }), "{err}");
    assert!(run.finetune(FinetuneMode::Dense).is_ok());
}

#[test]
fn artifacts_from_another_block_size_are_stale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run = full_pipeline(cfg.clone());
    assert!(run.checkpoint(PREDICTOR_CKPT).exists());
    let mut other = cfg;
    other.model.block_size = 8;
    let run = Run::new(other).unwrap();
    let err = run.tune_thresholds().unwrap_err();
    assert!(matches!(err, HarnessError::Stale { .. }), "{err}");
    let err = run.finetune(FinetuneMode::Sparse).unwrap_err();
    assert!(matches!(err, HarnessError::Stale { .. }), "{err}");
    assert!(err.to_string().contains("block size"), "{err}");
}

#[test]
fn report_rebuilds_from_the_directory_alone() {
    let dir = tempfile::tempdir().unwrap();
    let run = full_pipeline(tiny(dir.path()));
    run.finetune(FinetuneMode::Sparse).unwrap();
    let out = run.out().to_path_buf();
    drop(run);
    let rep = sparsetune::report::report(&out).unwrap();
    let t = rep.training.unwrap();
    assert_eq!(t.steps, 6);
    assert!(t.final_eval_loss.is_some());
    assert_eq!(rep.thresholds.unwrap().len(), 4);
    assert!(rep.predictor.is_some());
    for f in ["loss_curve.csv", "retained.csv", "memory.csv", "thresholds.csv", "summary.json"] {
        assert!(out.join("report").join(f).exists(), "{f}");
    }
    assert!(sparsetune::report::report(dir.path()).is_err());
}
