use std::path::Path;
use std::process::{Command, Output};

fn can(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_can")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_line(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "one error line, got {err:?}");
    serde_json::from_str(lines[0]).expect("error line is JSON")
}

const SMALL: [&str; 8] = [
    "--set", "task.n_train=300", "--set", "task.n_valid=50", "--set", "task.n_test=50", "--set", "task.max_len=6",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&SMALL);
    v
}

#[test]
fn gradcheck_on_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = can(dir.path(), &["gradcheck", "--set", "model.d_model=8", "--set", "model.n_heads=2", "--set", "model.n_enc_layers=1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let err: f64 = out.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(err < 1e-4, "{out}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/gradcheck.manifest.json")).unwrap()).unwrap();
    for key in ["config_hash", "seeds", "versions", "wall_time_sec", "threads", "config"] {
        assert!(manifest.get(key).is_some(), "manifest lacks {key}");
    }
}

#[test]
fn gen_data_is_deterministic_and_task_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for out in ["a", "b"] {
        assert!(can(p, &with_small(&["gen-data", "--out", out, "--set", "task.task=copy"])).status.success());
    }
    assert!(can(p, &with_small(&["gen-data", "--out", "c", "--set", "task.task=copy", "--set", "task.seed=9"])).status.success());
    for f in ["train.src", "train.tgt", "valid.src", "test.tgt"] {
        let a = std::fs::read(p.join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(p.join("b").join(f)).unwrap(), "{f}");
        assert_ne!(a, std::fs::read(p.join("c").join(f)).unwrap(), "{f}");
    }
    assert_eq!(std::fs::read(p.join("a/train.src")).unwrap(), std::fs::read(p.join("a/train.tgt")).unwrap());
}

#[test]
fn train_eval_decode_on_copy_task() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let task = ["--set", "task.task=copy", "--set", "task.n_train=1500", "--set", "task.max_len=8"];
    assert!(can(p, &[&["gen-data"][..], &task].concat()).status.success());
    let src_before = std::fs::read(p.join("data/train.src")).unwrap();
    let o = can(p, &[&["train", "--epochs", "12"][..], &task].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.ckpt", "last.ckpt", "loss.csv", "train.manifest.json"] {
        assert!(p.join("runs").join(f).exists(), "{f}");
    }
    assert_eq!(src_before, std::fs::read(p.join("data/train.src")).unwrap(), "inputs are never rewritten");

    let o = can(p, &[&["eval", "--min-accuracy", "0.99"][..], &task].concat());
    let line: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let acc = line["token_accuracy"].as_f64().unwrap();
    assert!(o.status.success() && acc >= 0.99, "accuracy {acc}");

    let o = can(p, &["decode", "--beam", "3"]);
    assert!(o.status.success());
    let decoded = std::fs::read_to_string(p.join("runs/decoded.txt")).unwrap();
    let gold = std::fs::read_to_string(p.join("data/test.tgt")).unwrap();
    let right = decoded.lines().zip(gold.lines()).filter(|(a, b)| a == b).count();
    assert!(right * 10 >= gold.lines().count() * 9, "{right} exact copies");
}

#[test]
fn training_reproduces_checkpoints_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(can(p, &with_small(&["gen-data"])).status.success());
    for out in ["r1", "r2"] {
        let o = can(p, &with_small(&["train", "--epochs", "2", "--out", out]));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["model.ckpt", "last.ckpt"] {
        assert_eq!(std::fs::read(p.join("r1").join(f)).unwrap(), std::fs::read(p.join("r2").join(f)).unwrap());
    }
}

#[test]
fn bench_two_models_emits_delta_row() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(can(p, &with_small(&["gen-data"])).status.success());
    assert!(can(p, &with_small(&["train", "--epochs", "1", "--out", "a"])).status.success());
    assert!(can(p, &with_small(&["train", "--epochs", "1", "--out", "b", "--variant", "standard"])).status.success());
    let o = can(p, &["bench", "--model", "a/model.ckpt", "--model", "b/model.ckpt", "--limit", "5", "--repeats", "3", "--length", "match-source"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(p.join("runs/bench.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header.join(","),
        "run_id,variant,n_enc,n_dec,beam,batch,threads,sentences,tokens,seconds,tokens_per_sec,delta_pct_vs_baseline"
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][1], "compressed");
    assert_eq!(&rows[1][1], "standard");
    assert!(rows[0][11].is_empty());
    assert!(rows[1][11].parse::<f64>().is_ok());
}

#[test]
fn failures_exit_with_codes_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();

    let o = can(p, &["eval", "--set", "model.unknown=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["code"], 2);

    std::fs::write(p.join("bad.json"), "{ not json").unwrap();
    assert_eq!(can(p, &["--config", "bad.json", "gradcheck"]).status.code(), Some(2));
    assert_eq!(can(p, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(can(p, &["--help"]).status.code(), Some(0));

    let o = can(p, &["eval", "--model", "missing.ckpt"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_line(&o)["error"], "io");

    std::fs::write(p.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(can(p, &["eval", "--model", "junk.ckpt"]).status.code(), Some(4));

    assert!(can(p, &with_small(&["gen-data"])).status.success());
    assert!(can(p, &with_small(&["train", "--epochs", "1"])).status.success());
    let o = can(p, &["eval", "--min-accuracy", "1.01"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["error"], "numeric");

    let o = can(p, &["gradcheck", "--set", "model.d_model=8", "--set", "model.n_heads=2", "--tol", "1e-30"]);
    assert_eq!(o.status.code(), Some(3));

    let before = std::fs::read(p.join("runs/model.ckpt")).unwrap();
    let o = can(p, &["avg-ckpt", "--out", "runs/model.ckpt", "runs/model.ckpt", "runs/last.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(before, std::fs::read(p.join("runs/model.ckpt")).unwrap());
    assert!(can(p, &["avg-ckpt", "--out", "avg/m.ckpt", "runs/model.ckpt", "runs/last.ckpt"]).status.success());
}

#[test]
fn probe_writes_matrix_and_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let std_model = ["--set", "model.decoder_variant=standard", "--set", "model.n_dec_layers=2"];
    assert!(can(p, &with_small(&["gen-data"])).status.success());
    assert!(can(p, &[&with_small(&["train", "--epochs", "1"])[..], &std_model].concat()).status.success());
    let o = can(p, &["probe", "--limit", "10", "--pooling", "per-position"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("diagonal mean"));
    let csv = std::fs::read_to_string(p.join("runs/similarity-self-cross.csv")).unwrap();
    let values: Vec<f64> = csv.lines().flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>()).collect();
    assert_eq!(values.len(), 4);
    assert!(values.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(p.join("runs/similarity-self-cross.txt").exists());
}
