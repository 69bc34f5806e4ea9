//! Saves a checkpoint after every epoch, averages the last five from disk and
//! compares held-out loss of the last and averaged models.
//!
//! cargo run --release --example checkpoint_average -- [epochs]

use can_core::data::{gen_data, Task, TaskSpec};
use can_core::model::checkpoint;
use can_core::training::{average_checkpoints, evaluate, train_with, TrainConfig};
use can_core::{DecoderVariant, Model, ModelConfig};

fn main() -> can_core::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let spec = TaskSpec { task: Task::MappedLexicon, vocab: 16, min_len: 1, max_len: 12, n_train: 2000, n_valid: 0, n_test: 200, seed: 1 };
    let data = gen_data(&spec)?;
    let model = Model::new(ModelConfig::new(32, 4, 3, 1, spec.vocab, DecoderVariant::Compressed).with_seed(7))?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };

    let dir = std::env::temp_dir().join(format!("can-avg-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let mut paths = Vec::new();
    let out = train_with(model, &data.train, &[], &cfg, &mut |log, m| {
        let path = dir.join(format!("epoch{:02}.ckpt", log.epoch));
        checkpoint::save(m, &path)?;
        paths.push(path);
        Ok(())
    })?;

    let averaged = average_checkpoints(&paths[paths.len().saturating_sub(5)..])?;
    let last = evaluate(&out.last, &data.test, 4096)?;
    let avg = evaluate(&averaged, &data.test, 4096)?;
    println!("last epoch: loss {:.4} token accuracy {:.4}", last.loss, last.token_accuracy);
    println!("average of last {}: loss {:.4} token accuracy {:.4}", paths.len().min(5), avg.loss, avg.token_accuracy);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
