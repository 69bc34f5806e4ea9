//! Cosine similarity between the self-attention and cross-attention inputs
//! of every decoder layer pair in a trained standard model.
//!
//! cargo run --release --example similarity_probe -- [epochs]

use can_core::bench::{diagonal_stats, render_heatmap, similarity_matrix, Pooling, SublayerPair};
use can_core::data::{gen_data, Task, TaskSpec};
use can_core::training::{train_with, TrainConfig};
use can_core::{DecoderVariant, Model, ModelConfig};

fn main() -> can_core::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let spec = TaskSpec { task: Task::Reverse, vocab: 16, min_len: 1, max_len: 12, n_train: 3000, n_valid: 200, n_test: 0, seed: 1 };
    let data = gen_data(&spec)?;
    let model = Model::new(ModelConfig::new(32, 4, 3, 3, spec.vocab, DecoderVariant::Standard).with_seed(7))?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let model = train_with(model, &data.train, &[], &cfg, &mut |_, _| Ok(()))?.averaged;

    for pair in [SublayerPair::SelfCross, SublayerPair::CrossFfn] {
        let m = similarity_matrix(&model, &data.valid, pair, Pooling::SentenceMean)?;
        let (diag, off) = diagonal_stats(&m);
        let (rows, cols) = match pair {
            SublayerPair::SelfCross => ("self-attention", "cross-attention"),
            SublayerPair::CrossFfn => ("cross-attention", "feed-forward"),
        };
        print!("{}", render_heatmap(&m, rows, cols));
        println!("diagonal mean {diag:.4}, off-diagonal mean {:.4}\n", off.unwrap_or(f64::NAN));
    }
    Ok(())
}
