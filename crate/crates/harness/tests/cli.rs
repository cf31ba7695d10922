//! The binary: flag handling, exit codes and error text.

use std::process::Command;

fn sparsetune(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sparsetune")).args(args).output().unwrap()
}

#[test]
fn gen_corpus_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let path = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    for (name, seed) in [("a", "1"), ("b", "1"), ("c", "2")] {
        assert!(sparsetune(&["--seed", seed, "gen-corpus", "--bytes", "5000", "--output", &path(name)]).status.success());
    }
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a").len(), 5000);
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn missing_dependency_fails_with_the_step_name() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    std::fs::write(&corpus, "word ".repeat(4000)).unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, format!("[paths]\ncorpus = {:?}\n[training]\nseq_len = 64\n", corpus.to_str().unwrap())).unwrap();
    let out = dir.path().join("out");
    let o = sparsetune(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "tune-thresholds"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("run `profile` first"), "{err}");
    // The run directory remembers the config.
    let o = sparsetune(&["--out", out.to_str().unwrap(), "train-predictors"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("run `tune-thresholds` first"));
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[training]\nstepz = 3\n").unwrap();
    let o = sparsetune(&["--config", cfg.to_str().unwrap(), "profile"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid configuration"));
    let o = sparsetune(&["finetune", "--dense", "--retain-all"]);
    assert!(!o.status.success());
}
