use std::io;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Pair;
use crate::error::{Error, Result};
use crate::inference::{beam_search_counted, greedy_decode_batch_counted, SearchOptions, StageCounter};
use crate::model::Model;
use crate::numerics::Scalar;
use crate::training::evaluate;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeLength {
    /// Stop at EOS or `2 * src_len + 8`.
    #[default]
    Natural,
    /// Exactly as many tokens as the source has, EOS suppressed.
    MatchSource,
    /// Exactly this many tokens per sentence, EOS suppressed.
    Fixed(usize),
}

impl DecodeLength {
    fn options(self, src_len: usize) -> SearchOptions {
        match self {
            Self::Natural => SearchOptions::for_source(src_len),
            Self::MatchSource => SearchOptions::forced(src_len),
            Self::Fixed(n) => SearchOptions::forced(n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub beam: usize,
    pub batch: usize,
    /// Timed repeats; the reported time is their median.
    pub repeats: usize,
    /// Untimed passes before the first timed one.
    pub warmup: usize,
    pub length: DecodeLength,
    /// Worker threads over sentences; 1 keeps decoding on the caller.
    pub threads: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { beam: 1, batch: 1, repeats: 5, warmup: 1, length: DecodeLength::Natural, threads: 1 }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 timed repeats, got {}", self.repeats)));
        }
        if self.beam == 0 || self.batch == 0 || self.threads == 0 {
            return Err(Error::InvalidArgument("beam, batch and threads must be at least 1".into()));
        }
        if self.beam > 1 && self.batch > 1 {
            return Err(Error::InvalidArgument("batched decoding is greedy only; use beam 1 with batch > 1".into()));
        }
        if self.length == DecodeLength::Fixed(0) {
            return Err(Error::InvalidArgument("fixed decode length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub run_id: String,
    pub variant: String,
    pub n_enc: usize,
    pub n_dec: usize,
    pub beam: usize,
    pub batch: usize,
    pub threads: usize,
    pub sentences: usize,
    /// Generated tokens per pass, EOS included.
    pub tokens: usize,
    /// Median timed wall time of one pass.
    pub seconds: f64,
    pub tokens_per_sec: f64,
    pub delta_pct_vs_baseline: Option<f64>,
    pub baseline: Option<String>,
    /// Every timed pass, in run order.
    pub samples: Vec<f64>,
    /// Work done inside one timed pass.
    pub counter: StageCounter,
}

impl BenchResult {
    /// Sets the speed delta against `baseline`, in percent.
    pub fn compare_to(&mut self, baseline: &BenchResult) {
        self.delta_pct_vs_baseline = Some((self.tokens_per_sec / baseline.tokens_per_sec - 1.0) * 100.0);
        self.baseline = Some(baseline.run_id.clone());
    }

    /// Speed ratio `self / other` in tokens per second.
    pub fn speedup_over(&self, other: &BenchResult) -> f64 {
        self.tokens_per_sec / other.tokens_per_sec
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn decode_shard<T: Scalar>(model: &Model<T>, sentences: &[Vec<u32>], opts: &BenchOptions) -> Result<(usize, StageCounter)> {
    let mut tokens = 0;
    let mut counter = StageCounter::default();
    if opts.beam > 1 {
        for s in sentences {
            let (hyp, c) = beam_search_counted(model, s, opts.beam, &opts.length.options(s.len()))?;
            tokens += hyp.tokens.len();
            counter.add(&c);
        }
    } else {
        for chunk in sentences.chunks(opts.batch) {
            // Length limits are per batch, taken from its longest source.
            let max_src = chunk.iter().map(Vec::len).max().unwrap_or(0);
            let search = opts.length.options(max_src);
            let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
            let (out, c) = greedy_decode_batch_counted(model, &refs, &search)?;
            tokens += out.iter().map(Vec::len).sum::<usize>();
            counter.add(&c);
        }
    }
    Ok((tokens, counter))
}

fn decode_pass<T: Scalar>(model: &Model<T>, sentences: &[Vec<u32>], opts: &BenchOptions) -> Result<(usize, StageCounter)> {
    if opts.threads == 1 {
        return decode_shard(model, sentences, opts);
    }
    let per = sentences.len().div_ceil(opts.threads);
    let results: Vec<Result<(usize, StageCounter)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sentences
            .chunks(per)
            .map(|shard| scope.spawn(move || decode_shard(model, shard, opts)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    let mut tokens = 0;
    let mut counter = StageCounter::default();
    for r in results {
        let (t, c) = r?;
        tokens += t;
        counter.add(&c);
    }
    Ok((tokens, counter))
}

/// Times full decoding of `sentences`, encoder included: `warmup` untimed
/// passes, then `repeats` timed ones. Model construction and I/O happen
/// before the call and are never timed.
pub fn bench_decode<T: Scalar>(
    model: &Model<T>,
    run_id: &str,
    sentences: &[Vec<u32>],
    opts: &BenchOptions,
) -> Result<BenchResult> {
    Ok(bench_interleaved(&[(run_id, model)], sentences, opts)?.pop().expect("one model"))
}

/// [`bench_decode`] for several models with their timed passes interleaved
/// round-robin, so slow drift in machine speed hits every model alike. The
/// first model is the baseline for the others' deltas.
pub fn bench_interleaved<T: Scalar>(
    models: &[(&str, &Model<T>)],
    sentences: &[Vec<u32>],
    opts: &BenchOptions,
) -> Result<Vec<BenchResult>> {
    opts.validate()?;
    if sentences.is_empty() {
        return Err(Error::InvalidArgument("empty benchmark sentence set".into()));
    }
    for _ in 0..opts.warmup {
        for (_, m) in models {
            decode_pass(m, sentences, opts)?;
        }
    }
    let mut samples = vec![Vec::with_capacity(opts.repeats); models.len()];
    let mut last = vec![(0, StageCounter::default()); models.len()];
    for _ in 0..opts.repeats {
        for (k, (_, m)) in models.iter().enumerate() {
            let start = Instant::now();
            last[k] = decode_pass(m, sentences, opts)?;
            samples[k].push(start.elapsed().as_secs_f64());
        }
    }
    let mut out: Vec<BenchResult> = Vec::with_capacity(models.len());
    for (((run_id, model), samples), (tokens, counter)) in models.iter().zip(samples).zip(last) {
        let seconds = median(&samples);
        let c = model.config();
        let mut r = BenchResult {
            run_id: run_id.to_string(),
            variant: c.decoder_variant.name().to_string(),
            n_enc: c.n_enc_layers,
            n_dec: c.n_dec_layers,
            beam: opts.beam,
            batch: opts.batch,
            threads: opts.threads,
            sentences: sentences.len(),
            tokens,
            seconds,
            tokens_per_sec: tokens as f64 / seconds,
            delta_pct_vs_baseline: None,
            baseline: None,
            samples,
            counter,
        };
        if let Some(base) = out.first() {
            r.compare_to(base);
        }
        out.push(r);
    }
    Ok(out)
}

/// Token accuracy gate applied before speed comparisons.
pub fn quality_gate(model: &Model, pairs: &[Pair], threshold: f64) -> Result<f64> {
    let acc = evaluate(model, pairs, 4096)?.token_accuracy;
    if acc < threshold {
        return Err(Error::NumericCheck(format!(
            "token accuracy {acc:.4} below the {threshold:.4} gate for speed comparison"
        )));
    }
    Ok(acc)
}

pub const RESULT_COLUMNS: [&str; 12] = [
    "run_id",
    "variant",
    "n_enc",
    "n_dec",
    "beam",
    "batch",
    "threads",
    "sentences",
    "tokens",
    "seconds",
    "tokens_per_sec",
    "delta_pct_vs_baseline",
];

pub fn write_results_csv<W: io::Write>(out: W, results: &[BenchResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_COLUMNS)?;
    for r in results {
        w.write_record([
            r.run_id.clone(),
            r.variant.clone(),
            r.n_enc.to_string(),
            r.n_dec.to_string(),
            r.beam.to_string(),
            r.batch.to_string(),
            r.threads.to_string(),
            r.sentences.to_string(),
            r.tokens.to_string(),
            format!("{:.6}", r.seconds),
            format!("{:.3}", r.tokens_per_sec),
            r.delta_pct_vs_baseline.map(|d| format!("{d:.2}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
