//! Trains a compressed model briefly on the reversal task, then decodes
//! held-out sources greedily and with beam search.
//!
//! cargo run --release --example decode -- [epochs] [beam]

use can_core::data::{format_line, gen_data, Task, TaskSpec};
use can_core::inference::{beam_search, greedy_decode};
use can_core::model::EOS;
use can_core::training::{train_with, TrainConfig};
use can_core::{DecoderVariant, Model, ModelConfig};

fn main() -> can_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(15);
    let beam: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);

    let spec = TaskSpec { task: Task::Reverse, vocab: 16, min_len: 1, max_len: 12, n_train: 3000, n_valid: 0, n_test: 10, seed: 1 };
    let data = gen_data(&spec)?;
    let model = Model::new(ModelConfig::new(32, 4, 3, 1, spec.vocab, DecoderVariant::Compressed).with_seed(7))?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let model = train_with(model, &data.train, &[], &cfg, &mut |_, _| Ok(()))?.averaged;

    let mut exact = 0;
    for p in &data.test {
        let max_len = 2 * p.src.len() + 8;
        let mut greedy = greedy_decode(&model, &p.src, max_len)?;
        if greedy.last() == Some(&EOS) {
            greedy.pop();
        }
        let hyp = beam_search(&model, &p.src, beam, max_len, 1.0)?;
        exact += usize::from(hyp.output() == p.tgt.as_slice());
        println!("src   {}\ngreedy {}\nbeam   {}  (score {:.3})\n", format_line(&p.src), format_line(&greedy), format_line(hyp.output()), hyp.score(1.0));
    }
    println!("{exact}/{} beam outputs match the reference", data.test.len());
    Ok(())
}
