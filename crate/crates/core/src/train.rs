//! Fine-tuning steps, evaluation and teacher-sample collection.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::ledger::{Category, Ledger, LedgerReport};
use crate::model::{ForwardOptions, Model, PatternPolicy};
use crate::optim::Adam;
use crate::predictor::TeacherSample;
use crate::sparsity::{BlockScoreMatrix, Component};
use crate::tape::Tape;

/// Next-token targets for `tokens`: shifted by one, the last row ignored.
pub fn shifted_targets(tokens: &[usize]) -> Vec<usize> {
    let mut t: Vec<usize> = tokens.iter().skip(1).copied().collect();
    t.push(crate::kernels::loss::IGNORE_INDEX);
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    /// Retained token share per layer, attention then MLP.
    pub retained: Vec<(f64, f64)>,
    pub peak_total: usize,
    pub peak_activation: usize,
    pub peak_transient: usize,
    pub activation_attention: usize,
    pub activation_mlp: usize,
    /// Live bytes right after the forward pass.
    pub post_forward_live: usize,
    pub leaked: usize,
    pub wall_ns: u64,
}

/// Adam over the model's adapters.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub opt: Adam<T>,
    step: u64,
}

impl<T: Element> Trainer<T> {
    pub fn new(lr: f64) -> Self {
        Trainer { opt: Adam::new(lr), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One forward/backward/update. `policy` must not borrow `model`.
    pub fn step(
        &mut self,
        model: &mut Model<T>,
        tokens: &[usize],
        targets: &[usize],
        policy: PatternPolicy<'_, T>,
        opts: &ForwardOptions,
    ) -> Result<StepStats> {
        let (stats, _) = self.step_with_report(model, tokens, targets, policy, opts, false)?;
        Ok(stats)
    }

    /// As [`Trainer::step`], also returning the full ledger report.
    pub fn step_with_report(
        &mut self,
        model: &mut Model<T>,
        tokens: &[usize],
        targets: &[usize],
        policy: PatternPolicy<'_, T>,
        opts: &ForwardOptions,
        keep_events: bool,
    ) -> Result<(StepStats, Ledger)> {
        let start = Instant::now();
        let mut ledger = if keep_events { Ledger::new() } else { Ledger::new().without_event_log() };
        let adapter_bytes: usize = model.adapters_mut().iter().map(|t| t.bytes()).sum();
        let opt_mem = ledger.alloc(2 * adapter_bytes, Category::Optimizer, "adam_state");
        let mut tape = Tape::with_ledger(ledger);
        let opts = ForwardOptions { no_grad: false, capture: false, ..opts.clone() };
        let out = model.forward(&mut tape, tokens, Some(targets), policy, &opts)?;
        let loss_var = out.loss.expect("targets given");
        let loss = tape.scalar(loss_var).as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss} at step {}", self.step)));
        }
        tape.backward(loss_var)?;
        let grads: Vec<Option<Vec<T>>> = out.vars.adapters().iter().map(|v| tape.grad(*v).map(<[T]>::to_vec)).collect();
        let mut ledger = tape.finish();
        let leaked = ledger.end_step();
        ledger.free(opt_mem)?;
        let report = ledger.report();
        let refs: Vec<Option<&[T]>> = grads.iter().map(|g| g.as_deref()).collect();
        self.opt.step(&mut model.adapters_mut(), &refs)?;
        self.step += 1;
        let stats = summarize(self.step, loss, &out.patterns, &report, leaked.len(), start.elapsed().as_nanos() as u64);
        Ok((stats, ledger))
    }
}

fn summarize(
    step: u64,
    loss: f64,
    patterns: &[crate::model::LayerPatterns],
    report: &LedgerReport,
    leaked: usize,
    wall_ns: u64,
) -> StepStats {
    StepStats {
        step,
        loss,
        retained: patterns.iter().map(|p| (p.attention.retained_fraction(), p.mlp.retained_fraction())).collect(),
        peak_total: report.peak_total,
        peak_activation: report.peak_by_category[&Category::Activation],
        peak_transient: report.peak_by_category[&Category::Transient],
        activation_attention: report.activation_bytes_for(Component::Attention),
        activation_mlp: report.activation_bytes_for(Component::Mlp),
        post_forward_live: report.post_forward.as_ref().map_or(0, |s| s.live_total),
        leaked,
        wall_ns,
    }
}

/// Mean loss over `(tokens, targets)` pairs without gradients.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    batches: &[(Vec<usize>, Vec<usize>)],
    policy: PatternPolicy<'_, T>,
    opts: &ForwardOptions,
) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let mut total = 0.0;
    for (tokens, targets) in batches {
        let l = model.eval_loss(tokens, targets, policy, opts)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("evaluation loss {l}")));
        }
        total += l;
    }
    Ok(total / batches.len() as f64)
}

/// Dense forward pass recording each layer's input and exact scores.
pub fn profile<T: Element>(model: &Model<T>, tokens: &[usize]) -> Result<Vec<crate::model::LayerCapture<T>>> {
    let mut tape = Tape::new();
    let opts = ForwardOptions { no_grad: true, capture: true, release: true, ..Default::default() };
    Ok(model.forward(&mut tape, tokens, None, PatternPolicy::Dense, &opts)?.captures)
}

/// Attention and MLP score matrices for every layer of one sequence.
pub fn profile_scores<T: Element>(model: &Model<T>, tokens: &[usize]) -> Result<Vec<BlockScoreMatrix>> {
    let mut out = Vec::new();
    for c in profile(model, tokens)? {
        out.push(c.attention_scores);
        out.push(c.mlp_scores);
    }
    Ok(out)
}

/// One teacher sample per layer of each sequence.
pub fn collect_teacher<T: Element>(model: &Model<T>, sequences: &[Vec<usize>]) -> Result<Vec<TeacherSample<T>>> {
    let mut out = Vec::new();
    for tokens in sequences {
        for c in profile(model, tokens)? {
            out.push(TeacherSample { layer: c.layer, x: c.input, scores: c.attention_scores });
        }
    }
    Ok(out)
}
