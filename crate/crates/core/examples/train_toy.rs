//! Trains a small model on a synthetic transduction task and reports
//! teacher-forced accuracy on held-out pairs.
//!
//! cargo run --release --example train_toy -- [task] [variant] [epochs]

use std::time::Instant;

use can_core::data::{gen_data, Task, TaskSpec};
use can_core::training::{evaluate, train_with, TrainConfig};
use can_core::{DecoderVariant, Model, ModelConfig};

fn main() -> can_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let task: Task = args.first().map_or(Ok(Task::Reverse), |s| s.parse())?;
    let variant: DecoderVariant = args.get(1).map_or(Ok(DecoderVariant::Compressed), |s| s.parse())?;
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);

    let spec = TaskSpec { task, vocab: 16, min_len: 1, max_len: 12, n_train: 3000, n_valid: 200, n_test: 200, seed: 1 };
    let data = gen_data(&spec)?;
    let model = Model::new(ModelConfig::new(32, 4, 3, 1, spec.vocab, variant).with_seed(7))?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };

    let start = Instant::now();
    let out = train_with(model, &data.train, &data.valid, &cfg, &mut |log, _| {
        println!(
            "epoch {:>3}  train {:.4}  valid {:.4}  lr {:.5}  {:.0} tok/s",
            log.epoch,
            log.train_loss,
            log.valid_loss.unwrap_or(f64::NAN),
            log.lr,
            log.tokens_per_sec
        );
        Ok(())
    })?;
    let report = evaluate(&out.averaged, &data.test, 4096)?;
    println!(
        "{task:?} {variant}: token accuracy {:.4}, sentence accuracy {:.4} after {} steps in {:.1}s",
        report.token_accuracy,
        report.sentence_accuracy,
        out.steps,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
