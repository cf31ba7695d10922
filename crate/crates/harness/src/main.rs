use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sparsetune::pipeline::CONFIG_FILE;
use sparsetune::{FinetuneMode, Run, RunConfig};

#[derive(Parser)]
#[command(name = "sparsetune", version, about = "Token-sparse LoRA fine-tuning pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults to `<out>/config.toml` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seq_len: Option<usize>,
    /// LM-loss segments.
    #[arg(long, global = true)]
    segments: Option<usize>,
    #[arg(long, global = true, overrides_with = "no_fused")]
    fused: bool,
    #[arg(long, global = true, overrides_with = "fused")]
    no_fused: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Exact block scores over a shard; writes profiles/.
    Profile,
    /// Threshold initialisation and tuning; writes thresholds.json.
    TuneThresholds,
    /// Pattern-predictor training with elastic pruning.
    TrainPredictors,
    /// LoRA fine-tuning with per-step metrics.
    Finetune {
        /// Dense LoRA baseline.
        #[arg(long, conflicts_with = "retain_all")]
        dense: bool,
        /// Sparse path with every block retained.
        #[arg(long)]
        retain_all: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Kernel benchmark.
    Bench {
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Summaries and plot data from a run directory.
    Report { dir: Option<PathBuf> },
    /// Writes a synthetic text corpus.
    GenCorpus {
        #[arg(long)]
        bytes: usize,
        #[arg(long)]
        output: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match (&c.config, &c.out) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(out)) if out.join(CONFIG_FILE).exists() => RunConfig::load(&out.join(CONFIG_FILE))?,
        _ => RunConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.paths.out = out.clone();
    }
    if let Some(s) = c.seed {
        cfg.training.seed = s;
    }
    if let Some(s) = c.seq_len {
        cfg.training.seq_len = s;
        cfg.model.max_seq_len = cfg.model.max_seq_len.max(s);
    }
    if let Some(n) = c.segments {
        cfg.kernel.segments = Some(n);
    }
    if c.fused {
        cfg.kernel.fused = true;
    }
    if c.no_fused {
        cfg.kernel.fused = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenCorpus { bytes, output } => {
            if bytes == 0 {
                bail!("--bytes must be positive");
            }
            let seed = cli.common.seed.unwrap_or(0);
            std::fs::write(&output, sparsetune::corpus::generate_text(bytes, seed)).with_context(|| output.display().to_string())?;
        }
        Command::Report { dir } => {
            let dir = dir.or(cli.common.out.clone()).unwrap_or_else(|| RunConfig::default().paths.out);
            let rep = sparsetune::report::report(&dir)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
        }
        command => {
            let mut cfg = load_config(&cli.common)?;
            if let Command::Finetune { steps: Some(n), .. } = command {
                cfg.training.steps = n;
            }
            let run = Run::new(cfg)?;
            match command {
                Command::Profile => {
                    let s = run.profile()?;
                    println!("profiled {} sequences, {} score matrices, {} undefined ratio rows", s.batches, s.records, s.undefined_rows);
                }
                Command::TuneThresholds => {
                    let a = run.tune_thresholds()?;
                    println!("tuned {} thresholds; acc {:.6} -> {:.6}", a.tuned.len(), a.acc_init, a.acc_tuned);
                }
                Command::TrainPredictors => {
                    let s = run.train_predictors()?;
                    println!(
                        "predictors: recall {:?}, operating recall {:.4}, {} of {} parameters",
                        s.final_recall, s.operating_recall, s.param_count, s.full_param_count
                    );
                }
                Command::Finetune { dense, retain_all, .. } => {
                    let mode = if dense {
                        FinetuneMode::Dense
                    } else if retain_all {
                        FinetuneMode::RetainAll
                    } else {
                        FinetuneMode::Sparse
                    };
                    let s = run.finetune(mode)?;
                    println!(
                        "{} steps: final loss {:.4}, eval loss {:.4} (under the run's patterns {:.4}), retained attention {:.3}, mlp {:.3}",
                        s.steps, s.final_loss, s.final_eval_loss, s.final_eval_loss_sparse, s.mean_retained_attention, s.mean_retained_mlp
                    );
                }
                Command::Bench { reps } => {
                    for r in run.bench(reps)? {
                        println!("{:<16} s={:<5} k/N={:<5} {:>12} ns  x{:.2}  transient {} B", r.kernel, r.s, r.k_or_n, r.wall_ns, r.speedup, r.transient_bytes);
                    }
                }
                Command::Report { .. } | Command::GenCorpus { .. } => unreachable!("handled above"),
            }
        }
    }
    Ok(())
}
