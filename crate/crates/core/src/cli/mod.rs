//! The `can` command line: data generation, training, evaluation, decoding,
//! probing, benchmarking and checkpoint utilities.
//!
//! Every failure ends the process with one JSON line on stderr and exit
//! code 2 (config), 3 (numeric check) or 4 (I/O).

mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

pub use config::{apply_override, Paths, RunConfig};

use crate::bench::{
    bench_interleaved, diagonal_stats, quality_gate, render_heatmap, similarity_matrix, sweep, write_matrix_csv,
    write_results_csv, BenchOptions, DecodeLength, Pooling, SublayerPair, SweepAxis,
};
use crate::data::{format_line, gen_data, read_lines, read_pairs, write_dataset, Pair};
use crate::error::{Error, Result};
use crate::inference::{beam_search, greedy_decode};
use crate::model::{checkpoint, DecoderVariant, Model};
use crate::training::{average_checkpoints, evaluate, gradcheck, train_with, write_loss_csv, Batch};

#[derive(Debug, Parser)]
#[command(name = "can", version, about = "Compressed-attention seq2seq toolkit")]
struct Cli {
    /// JSON run config; missing keys take built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.d_model=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for benchmarks; recorded in every manifest.
    #[arg(long, default_value_t = 1, global = true)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train/valid/test splits of the configured synthetic task.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes the averaged and last checkpoints and a loss curve.
    Train(TrainArgs),
    /// Teacher-forced loss and accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Decode a file of source lines.
    Decode(DecodeArgs),
    /// Cosine similarity of adjacent sub-layer inputs across decoder layers.
    Probe(ProbeArgs),
    /// Decoding speed of one or more checkpoints.
    Bench(BenchArgs),
    /// Average the parameters of several checkpoints.
    AvgCkpt {
        /// Output checkpoint; must not be one of the inputs.
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Sentence pairs in the checked batch.
        #[arg(long, default_value_t = 2)]
        pairs: usize,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    variant: Option<DecoderVariant>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Defaults to `<out_dir>/model.ckpt`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Exit with code 3 when token accuracy is below this.
    #[arg(long)]
    min_accuracy: Option<f64>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Source lines; defaults to `<data_dir>/test.src`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Defaults to `<out_dir>/decoded.txt`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "valid")]
    split: String,
    #[arg(long, default_value = "self-cross")]
    pair: SublayerPair,
    #[arg(long, default_value = "sentence-mean")]
    pooling: Pooling,
    /// Use at most this many pairs.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Checkpoints to compare; the first is the baseline.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Source lines; defaults to `<data_dir>/test.src`.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// `natural`, `match-source` or a fixed token count.
    #[arg(long, default_value = "natural")]
    length: String,
    /// Sweep one axis: beam, depth, batch or length.
    #[arg(long)]
    sweep: Option<SweepAxis>,
    /// Run in 32-bit floats.
    #[arg(long)]
    f32: bool,
    /// Token-accuracy gate every model must pass on `--gate-split` first.
    #[arg(long)]
    gate: Option<f64>,
    #[arg(long, default_value = "valid")]
    gate_split: String,
    /// Defaults to `<out_dir>/bench.csv`.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl std::str::FromStr for DecodeLength {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(Self::Natural),
            "match-source" | "match_source" => Ok(Self::MatchSource),
            n => n
                .parse()
                .map(Self::Fixed)
                .map_err(|_| Error::Config(format!("decode length `{s}` is not natural, match-source or a count"))),
        }
    }
}

/// Exit status for a failed run.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Checkpoint(_) | Error::Dataset(_) | Error::Csv(_) => 4,
        Error::NumericCheck(_)
        | Error::NonFinite { .. }
        | Error::ShapeMismatch { .. }
        | Error::LengthMismatch { .. }
        | Error::FullyMaskedRow { .. }
        | Error::ZeroNorm => 3,
        _ => 2,
    }
}

fn error_kind(code: i32) -> &'static str {
    match code {
        3 => "numeric",
        4 => "io",
        _ => "config",
    }
}

fn fail_line(code: i32, message: &str) -> String {
    let one_line = message.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
    json!({ "error": error_kind(code), "code": code, "message": one_line }).to_string()
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<String> = args.into_iter().map(|a| a.into().to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", fail_line(2, &e.to_string()));
            return 2;
        }
    };
    match execute(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", fail_line(code, &e.to_string()));
            code
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: &'a [String],
    config_hash: String,
    seeds: serde_json::Value,
    versions: serde_json::Value,
    threads: usize,
    wall_time_sec: f64,
    artifacts: Vec<PathBuf>,
    summary: serde_json::Value,
    config: &'a RunConfig,
}

struct Run<'a> {
    cfg: RunConfig,
    argv: &'a [String],
    threads: usize,
    start: Instant,
    artifacts: Vec<PathBuf>,
}

impl Run<'_> {
    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.cfg.paths.out_dir.clone();
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    fn finish(self, command: &str, summary: serde_json::Value) -> Result<()> {
        let dir = self.out_dir()?;
        let path = dir.join(format!("{command}.manifest.json"));
        let m = Manifest {
            command,
            argv: self.argv,
            config_hash: self.cfg.hash(),
            seeds: json!({ "model": self.cfg.model.seed, "train": self.cfg.train.seed, "task": self.cfg.task.seed }),
            versions: json!({ "can-core": env!("CARGO_PKG_VERSION"), "checkpoint": "CANCKPT1" }),
            threads: self.threads,
            wall_time_sec: self.start.elapsed().as_secs_f64(),
            artifacts: self.artifacts,
            summary,
            config: &self.cfg,
        };
        std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }

    fn model_path(&self, explicit: Option<PathBuf>) -> PathBuf {
        explicit.unwrap_or_else(|| self.cfg.paths.out_dir.join("model.ckpt"))
    }
}

fn execute(cli: Cli, argv: &[String]) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    let run = Run { cfg, argv, threads: cli.threads, start: Instant::now(), artifacts: Vec::new() };
    match cli.command {
        Command::GenData { out } => cmd_gen_data(run, out),
        Command::Train(a) => cmd_train(run, a),
        Command::Eval(a) => cmd_eval(run, a),
        Command::Decode(a) => cmd_decode(run, a),
        Command::Probe(a) => cmd_probe(run, a),
        Command::Bench(a) => cmd_bench(run, a),
        Command::AvgCkpt { out, inputs } => cmd_avg(run, out, inputs),
        Command::Gradcheck { tol, step, pairs } => cmd_gradcheck(run, tol, step, pairs),
    }
}

fn cmd_gen_data(mut run: Run, out: Option<PathBuf>) -> Result<()> {
    if let Some(o) = out {
        run.cfg.paths.data_dir = o;
    }
    let data = gen_data(&run.cfg.task)?;
    let dir = run.cfg.paths.data_dir.clone();
    write_dataset(&dir, &data)?;
    for split in ["train", "valid", "test"] {
        for ext in ["src", "tgt"] {
            run.artifact(dir.join(format!("{split}.{ext}")));
        }
    }
    println!("wrote {} / {} / {} pairs to {}", data.train.len(), data.valid.len(), data.test.len(), dir.display());
    let summary = json!({ "train": data.train.len(), "valid": data.valid.len(), "test": data.test.len() });
    run.finish("gen-data", summary)
}

fn cmd_train(mut run: Run, a: TrainArgs) -> Result<()> {
    if let Some(d) = a.data {
        run.cfg.paths.data_dir = d;
    }
    if let Some(o) = a.out {
        run.cfg.paths.out_dir = o;
    }
    if let Some(e) = a.epochs {
        run.cfg.train.epochs = e;
    }
    if let Some(v) = a.variant {
        run.cfg.model.decoder_variant = v;
    }
    run.cfg.validate()?;
    let train_set = read_pairs(&run.cfg.paths.data_dir, "train")?;
    let valid_set = read_pairs(&run.cfg.paths.data_dir, "valid")?;
    let model = Model::new(run.cfg.model.clone())?;
    let out = run.out_dir()?;
    let outcome = train_with(model, &train_set, &valid_set, &run.cfg.train, &mut |log, _| {
        let valid = log.valid_loss.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("epoch {:>3}  train {:.4}  valid {valid}  lr {:.6}", log.epoch, log.train_loss, log.lr);
        Ok(())
    })?;
    let (avg, last, loss) = (out.join("model.ckpt"), out.join("last.ckpt"), out.join("loss.csv"));
    checkpoint::save(&outcome.averaged, &avg)?;
    checkpoint::save(&outcome.last, &last)?;
    write_loss_csv(&loss, &outcome.log)?;
    run.artifact(avg);
    run.artifact(last);
    run.artifact(loss);
    let final_log = outcome.log.last().expect("at least one epoch");
    let summary = json!({ "steps": outcome.steps, "final_train_loss": final_log.train_loss, "final_valid_loss": final_log.valid_loss });
    run.finish("train", summary)
}

fn cmd_eval(mut run: Run, a: EvalArgs) -> Result<()> {
    if let Some(d) = a.data {
        run.cfg.paths.data_dir = d;
    }
    let model = load_model(&run.model_path(a.model))?;
    let pairs = read_pairs(&run.cfg.paths.data_dir, &a.split)?;
    let report = evaluate(&model, &pairs, run.cfg.train.batch_tokens.max(1024))?;
    let line = json!({
        "split": a.split,
        "loss": report.loss,
        "token_accuracy": report.token_accuracy,
        "sentence_accuracy": report.sentence_accuracy,
        "tokens": report.tokens,
    });
    println!("{line}");
    let path = run.out_dir()?.join("eval.json");
    std::fs::write(&path, line.to_string() + "\n")?;
    run.artifact(path);
    let gate = a.min_accuracy;
    run.finish("eval", line)?;
    if let Some(min) = gate {
        if report.token_accuracy < min {
            return Err(Error::NumericCheck(format!("token accuracy {:.4} below {min}", report.token_accuracy)));
        }
    }
    Ok(())
}

fn cmd_decode(mut run: Run, a: DecodeArgs) -> Result<()> {
    let model = load_model(&run.model_path(a.model))?;
    let input = a.input.unwrap_or_else(|| run.cfg.paths.data_dir.join("test.src"));
    let output = match a.output {
        Some(p) => p,
        None => run.out_dir()?.join("decoded.txt"),
    };
    if output == input {
        return Err(Error::Config("decode output would overwrite its input".into()));
    }
    let sources = read_lines(&input)?;
    let mut text = String::new();
    let mut tokens = 0;
    for src in &sources {
        let max_len = a.max_len.unwrap_or(2 * src.len() + 8);
        let out = if a.beam <= 1 {
            let mut t = greedy_decode(&model, src, max_len)?;
            if t.last() == Some(&crate::model::EOS) {
                t.pop();
            }
            t
        } else {
            beam_search(&model, src, a.beam, max_len, a.length_penalty)?.output().to_vec()
        };
        tokens += out.len();
        text.push_str(&format_line(&out));
        text.push('\n');
    }
    std::fs::write(&output, text)?;
    println!("decoded {} sentences ({tokens} tokens) to {}", sources.len(), output.display());
    run.artifact(output);
    run.finish("decode", json!({ "sentences": sources.len(), "tokens": tokens, "beam": a.beam }))
}

fn cmd_probe(mut run: Run, a: ProbeArgs) -> Result<()> {
    if let Some(d) = a.data {
        run.cfg.paths.data_dir = d;
    }
    let model = load_model(&run.model_path(a.model))?;
    let mut pairs: Vec<Pair> = read_pairs(&run.cfg.paths.data_dir, &a.split)?;
    if let Some(n) = a.limit {
        pairs.truncate(n);
    }
    let m = similarity_matrix(&model, &pairs, a.pair, a.pooling)?;
    let (rows, cols) = match a.pair {
        SublayerPair::SelfCross => ("self-attention", "cross-attention"),
        SublayerPair::CrossFfn => ("cross-attention", "ffn"),
    };
    let heat = render_heatmap(&m, rows, cols);
    let (diag, off) = diagonal_stats(&m);
    print!("{heat}");
    println!("diagonal mean {diag:.4}  off-diagonal mean {}", off.map_or("-".into(), |o| format!("{o:.4}")));
    let out = run.out_dir()?;
    let tag = match a.pair {
        SublayerPair::SelfCross => "self-cross",
        SublayerPair::CrossFfn => "cross-ffn",
    };
    let csv_path = out.join(format!("similarity-{tag}.csv"));
    write_matrix_csv(std::fs::File::create(&csv_path)?, &m)?;
    let txt_path = out.join(format!("similarity-{tag}.txt"));
    std::fs::write(&txt_path, &heat)?;
    run.artifact(csv_path);
    run.artifact(txt_path);
    run.finish("probe", json!({ "pairs": pairs.len(), "diagonal_mean": diag, "off_diagonal_mean": off }))
}

fn load_model(path: &Path) -> Result<Model> {
    checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", path.display())),
        other => other,
    })
}

fn label_for(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn cmd_bench(mut run: Run, a: BenchArgs) -> Result<()> {
    let models = a.models.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    let mut labels: Vec<String> = a.models.iter().map(|p| label_for(p)).collect();
    for i in 1..labels.len() {
        if labels[..i].contains(&labels[i]) {
            labels[i] = format!("{}#{i}", labels[i]);
        }
    }
    if let Some(threshold) = a.gate {
        let pairs = read_pairs(&run.cfg.paths.data_dir, &a.gate_split)?;
        for (m, l) in models.iter().zip(&labels) {
            let acc = quality_gate(m, &pairs, threshold)
                .map_err(|e| Error::NumericCheck(format!("model `{l}`: {e}")))?;
            println!("{l}: token accuracy {acc:.4} passes the {threshold} gate");
        }
    }
    let input = a.input.unwrap_or_else(|| run.cfg.paths.data_dir.join("test.src"));
    let mut sentences = read_lines(&input)?;
    if let Some(n) = a.limit {
        sentences.truncate(n);
    }
    let opts = BenchOptions {
        beam: a.beam,
        batch: a.batch,
        repeats: a.repeats,
        warmup: a.warmup,
        length: a.length.parse()?,
        threads: run.threads,
    };
    let rows = if a.f32 {
        let cast: Vec<Model<f32>> = models.iter().map(|m| m.cast()).collect();
        bench_rows(&cast, &labels, &sentences, &opts, a.sweep.as_ref())?
    } else {
        bench_rows(&models, &labels, &sentences, &opts, a.sweep.as_ref())?
    };
    for r in &rows {
        let delta = r.delta_pct_vs_baseline.map_or(String::new(), |d| format!("  {d:+.2}% vs {}", r.baseline.as_deref().unwrap_or("")));
        println!("{:<32} {:>10.1} tok/s{delta}", r.run_id, r.tokens_per_sec);
    }
    let output = match a.output {
        Some(p) => p,
        None => run.out_dir()?.join("bench.csv"),
    };
    write_results_csv(std::fs::File::create(&output)?, &rows)?;
    run.artifact(output);
    let summary = json!({
        "rows": rows.len(),
        "dtype": if a.f32 { "f32" } else { "f64" },
        "tokens_per_sec": rows.iter().map(|r| (r.run_id.clone(), r.tokens_per_sec)).collect::<Vec<_>>(),
    });
    run.finish("bench", summary)
}

fn bench_rows<T: crate::numerics::Scalar>(
    models: &[Model<T>],
    labels: &[String],
    sentences: &[Vec<u32>],
    opts: &BenchOptions,
    axis: Option<&SweepAxis>,
) -> Result<Vec<crate::bench::BenchResult>> {
    let named: Vec<(&str, &Model<T>)> = labels.iter().map(String::as_str).zip(models).collect();
    match axis {
        Some(axis) => sweep(axis, &named, sentences, opts),
        None => bench_interleaved(&named, sentences, opts),
    }
}

fn cmd_avg(mut run: Run, out: PathBuf, inputs: Vec<PathBuf>) -> Result<()> {
    let same = |a: &Path, b: &Path| a == b || matches!((a.canonicalize(), b.canonicalize()), (Ok(x), Ok(y)) if x == y);
    if inputs.iter().any(|i| same(i, &out)) {
        return Err(Error::Config("avg-ckpt output must differ from every input".into()));
    }
    let model = average_checkpoints(&inputs)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    checkpoint::save(&model, &out)?;
    println!("averaged {} checkpoints into {}", inputs.len(), out.display());
    run.artifact(out);
    run.finish("avg-ckpt", json!({ "inputs": inputs }))
}

fn cmd_gradcheck(run: Run, tol: f64, step: f64, pairs: usize) -> Result<()> {
    if pairs == 0 || step <= 0.0 {
        return Err(Error::Config("gradcheck needs pairs >= 1 and a positive step".into()));
    }
    let mut spec = run.cfg.task.clone();
    spec.n_train = pairs;
    spec.max_len = spec.max_len.min(6);
    spec.min_len = spec.min_len.min(spec.max_len);
    let data = gen_data(&spec)?;
    let mut model_cfg = run.cfg.model.clone();
    model_cfg.dropout = 0.0;
    let model = Model::new(model_cfg)?;
    let batch = Batch::new(data.train.iter().map(|p| (p.src.as_slice(), p.tgt.as_slice())));
    let report = gradcheck(&model, &batch, step)?;
    println!(
        "max relative error {:.3e} (worst tensor {}) over {} entries",
        report.max_rel_error, report.worst, report.entries
    );
    let summary = json!({ "max_rel_error": report.max_rel_error, "worst": report.worst, "entries": report.entries, "tol": tol });
    let passed = report.passes(tol);
    run.finish("gradcheck", summary)?;
    if !passed {
        return Err(Error::NumericCheck(format!(
            "max relative error {:.3e} in {} exceeds {tol:e}",
            report.max_rel_error, report.worst
        )));
    }
    Ok(())
}
