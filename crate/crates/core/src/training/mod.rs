//! Cross-entropy training with analytic gradients, Adam under a warmup then
//! inverse-square-root schedule, last-k checkpoint averaging and per-epoch
//! loss logging.

mod adam;
mod average;
mod backward;
mod gradcheck;
mod loss;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use average::{average_checkpoints, average_models};
pub use backward::{batch_loss, loss_and_gradients, Batch, Gradients};
pub use gradcheck::{gradcheck, relative_error, GradcheckReport, TensorCheck, REL_ERROR_FLOOR};
pub use loss::{cross_entropy, cross_entropy_smoothed};

use crate::attention::core::Dropout;
use crate::data::Pair;
use crate::error::{Error, Result};
use crate::model::{decoder_target, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    /// Cap on source plus target tokens per batch.
    pub batch_tokens: usize,
    pub epochs: usize,
    pub label_smoothing: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_avg_last: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 400,
            peak_lr: 0.003,
            batch_tokens: 512,
            epochs: 30,
            label_smoothing: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            checkpoint_avg_last: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 8000 warmup steps to a 0.0007 peak, 4096-token batches.
    pub fn full_scale() -> Self {
        Self { warmup_steps: 8000, peak_lr: 0.0007, batch_tokens: 4096, ..Self::default() }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.warmup_steps == 0 {
            return fail("warmup_steps must be at least 1");
        }
        // zero is accepted for frozen runs
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return fail("peak_lr must be finite and non-negative");
        }
        if self.batch_tokens == 0 || self.epochs == 0 || self.checkpoint_avg_last == 0 {
            return fail("batch_tokens, epochs and checkpoint_avg_last must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label_smoothing must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return fail("invalid Adam hyperparameters");
        }
        Ok(())
    }
}

/// `peak_lr * min(step / warmup, sqrt(warmup / step))` for `step >= 1`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let s = step.max(1) as f64;
    let w = cfg.warmup_steps as f64;
    cfg.peak_lr * (s / w).min((w / s).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub lr: f64,
    pub tokens_per_sec: f64,
}

pub fn write_loss_csv(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "valid_loss", "lr", "tokens_per_sec"])?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.valid_loss.map(|v| v.to_string()).unwrap_or_default(),
            e.lr.to_string(),
            e.tokens_per_sec.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Groups pair indices into batches of at most `cap` source+target tokens
/// (a single oversized pair forms its own batch).
pub fn make_batches(pairs: &[Pair], order: &[usize], cap: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut tokens = 0;
    for &i in order {
        let n = pairs[i].src.len() + pairs[i].tgt.len() + 1;
        if !cur.is_empty() && tokens + n > cap {
            out.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        cur.push(i);
        tokens += n;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn batch_of(pairs: &[Pair], idx: &[usize]) -> Batch {
    Batch::new(idx.iter().map(|&i| (pairs[i].src.as_slice(), pairs[i].tgt.as_slice())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub token_accuracy: f64,
    /// Fraction of sentences with every teacher-forced position correct.
    pub sentence_accuracy: f64,
    pub tokens: usize,
}

/// Teacher-forced loss and argmax accuracy over `tgt + EOS` positions.
pub fn evaluate(model: &Model, pairs: &[Pair], batch_tokens: usize) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let order: Vec<usize> = (0..pairs.len()).collect();
    let (mut loss_sum, mut correct, mut tokens, mut sent_ok) = (0.0, 0usize, 0usize, 0usize);
    for idx in make_batches(pairs, &order, batch_tokens.max(1)) {
        let batch = batch_of(pairs, &idx);
        let tape = model.forward_tape(batch.src.clone(), batch.tgt_in.clone(), None)?;
        let (loss, _) = cross_entropy(&tape.logits, &batch.tgt_out)?;
        loss_sum += loss * batch.target_tokens() as f64;
        tokens += batch.target_tokens();
        for (seg, &i) in batch.tgt_in.segs.iter().zip(&idx) {
            let want = decoder_target(&pairs[i].tgt);
            let mut all = true;
            for (r, &w) in seg.clone().zip(&want) {
                let ok = crate::inference::argmax(tape.logits.row(r)) == w as usize;
                correct += ok as usize;
                all &= ok;
            }
            sent_ok += all as usize;
        }
    }
    Ok(EvalReport {
        loss: loss_sum / tokens as f64,
        token_accuracy: correct as f64 / tokens as f64,
        sentence_accuracy: sent_ok as f64 / pairs.len() as f64,
        tokens,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Mean of the last `checkpoint_avg_last` epoch snapshots.
    pub averaged: Model,
    /// Parameters after the final epoch.
    pub last: Model,
    pub log: Vec<EpochLog>,
    pub steps: u64,
}

pub fn train(model: Model, train_set: &[Pair], valid_set: &[Pair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train_set, valid_set, cfg, &mut |_, _| Ok(()))
}

/// [`train`] with a hook called after every epoch with its log row and snapshot.
pub fn train_with(
    mut model: Model,
    train_set: &[Pair],
    valid_set: &[Pair],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout = Dropout::new(model.config().dropout, cfg.seed ^ 0xd20b_0u64);
    let mut opt = Adam::new(model.params(), cfg.adam());
    let mut snapshots: Vec<Model> = Vec::with_capacity(cfg.checkpoint_avg_last);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let start = Instant::now();
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        let mut lr = 0.0;
        for idx in make_batches(train_set, &order, cfg.batch_tokens) {
            let batch = batch_of(train_set, &idx);
            let (loss, grads) = loss_and_gradients(&model, &batch, cfg.label_smoothing, Some(&mut dropout))?;
            step += 1;
            lr = lr_at(step, cfg);
            opt.step(model.params_mut(), &grads, lr)?;
            loss_sum += loss * batch.target_tokens() as f64;
            tokens += batch.target_tokens();
        }
        let secs = start.elapsed().as_secs_f64();
        let valid_loss = if valid_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, valid_set, cfg.batch_tokens)?.loss)
        };
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / tokens as f64,
            valid_loss,
            lr,
            tokens_per_sec: tokens as f64 / secs.max(1e-9),
        };
        if !row.train_loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        on_epoch(&row, &model)?;
        log.push(row);
        if snapshots.len() == cfg.checkpoint_avg_last {
            snapshots.remove(0);
        }
        snapshots.push(model.clone());
    }
    Ok(TrainOutcome { averaged: average_models(&snapshots)?, last: model, log, steps: step })
}
