//! Decoding speed of the compressed decoder against the standard one at the
//! same 12/2 depth, batch 1, beam 4, plus per-step stage counts.
//!
//! cargo run --release --example fusion_bench -- [d_model] [sentences]

use can_core::bench::{bench_interleaved, write_results_csv, BenchOptions, DecodeLength};
use can_core::data::{gen_data, Task, TaskSpec};
use can_core::{DecoderVariant, Model, ModelConfig};

fn main() -> can_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let d: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(128);
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);

    let spec = TaskSpec { task: Task::Reverse, vocab: 16, min_len: 8, max_len: 16, n_train: n, n_valid: 0, n_test: 0, seed: 3 };
    let sentences: Vec<Vec<u32>> = gen_data(&spec)?.train.into_iter().map(|p| p.src).collect();
    let opts = BenchOptions { beam: 4, length: DecodeLength::MatchSource, ..BenchOptions::default() };

    let config = |v| ModelConfig::new(d, 8, 12, 2, spec.vocab, v).with_seed(5);
    let standard: Model = Model::new(config(DecoderVariant::Standard))?;
    let compressed: Model = Model::new(config(DecoderVariant::Compressed))?;

    let rows = bench_interleaved(&[("standard-12x2", &standard), ("compressed-12x2", &compressed)], &sentences, &opts)?;
    for r in &rows {
        println!(
            "{:<16} {:>9.1} tok/s  stages/layer/step {:.0}  softmaxes/layer/step {:.0}",
            r.run_id,
            r.tokens_per_sec,
            r.counter.stages_per_layer_step(),
            r.counter.softmaxes_per_layer_step()
        );
    }
    println!("speed ratio {:.3}", rows[1].speedup_over(&rows[0]));
    write_results_csv(std::io::stdout(), &rows)
}
