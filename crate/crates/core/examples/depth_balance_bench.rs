//! Greedy batch-1 decoding speed across encoder/decoder depth splits at a
//! fixed width. The first depth pair is the baseline.
//!
//! cargo run --release --example depth_balance_bench -- [d_model] [sentences]

use can_core::bench::{sweep, write_results_csv, BenchOptions, DecodeLength, SweepAxis, DEPTH_GRID};
use can_core::data::{gen_data, Task, TaskSpec};
use can_core::{DecoderVariant, Model, ModelConfig};

fn main() -> can_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let d: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(128);
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);

    let spec = TaskSpec { task: Task::Reverse, vocab: 16, min_len: 8, max_len: 16, n_train: n, n_valid: 0, n_test: 0, seed: 3 };
    let sentences: Vec<Vec<u32>> = gen_data(&spec)?.train.into_iter().map(|p| p.src).collect();

    let models = DEPTH_GRID
        .iter()
        .map(|&(e, dd)| {
            let m: Model = Model::new(ModelConfig::new(d, 8, e, dd, spec.vocab, DecoderVariant::Standard).with_seed(5))?;
            Ok((format!("{e}x{dd}"), m))
        })
        .collect::<can_core::Result<Vec<_>>>()?;
    let named: Vec<(&str, &Model)> = models.iter().map(|(l, m)| (l.as_str(), m)).collect();

    let opts = BenchOptions { length: DecodeLength::MatchSource, ..BenchOptions::default() };
    let rows = sweep(&SweepAxis::Depth, &named, &sentences, &opts)?;
    for r in &rows {
        println!("{:<12} {:>9.1} tok/s  {:+.1}%", r.run_id, r.tokens_per_sec, r.delta_pct_vs_baseline.unwrap_or(0.0));
    }
    write_results_csv(std::io::stdout(), &rows)
}
