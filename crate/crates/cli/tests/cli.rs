//! Command-level behavior of the `taperkit` binary: flags, exit codes,
//! artifact shapes and reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: &str = r#"
[model]
vocab_size = 32
hidden_dim = 16
num_layers = 1
num_heads = 2
ffn_dim = 32
l_src = 16
l_tgt = 64
num_segment_types = 1
position_offset = 2
ln_order = "ln_then_dropout_in_embeddings"
dropout_prob = 0.1
layer_norm_eps = 1e-12
pad_token_id = 0
sep_token_id = 1
mask_token_id = 2

[corpus]
vocab_size = 32
num_docs = 60
min_doc_len = 16
max_doc_len = 48
period = 4

[training]
steps = 20
batch_size = 4
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_taperkit"));
    c.env_remove("TAPERKIT_THREADS");
    c
}

fn taperkit(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One tiny pretrained source shared by the tests of this file.
fn source() -> &'static Path {
    static DIR: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    &DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let out = dir.path().join("pre");
        let o = taperkit(&["pretrain", "--config", s(&config), "--seed", "1", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let ckpt = out.join("source.ckpt");
        (dir, ckpt)
    })
    .1
}

#[test]
fn help_lists_every_flag_with_defaults_and_exit_codes() {
    let o = taperkit(&["ppl-sweep", "--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for flag in ["--src", "--docs", "--lengths", "--variants", "--seed", "--max-sequences", "--out"] {
        assert!(text.contains(flag), "missing {flag}");
    }
    assert!(text.contains("[default: 64,128,192,256]"));
    assert!(text.contains("[default: vanilla,repeated,taper:1.0,taper:2.0,taper:4.0]"));
    assert!(text.contains("5  verification failed"));

    let o = taperkit(&["transform", "--help"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("[default: 2]") && text.contains("[default: taper]") && text.contains("[default: 100]"));
    let o = taperkit(&["bench-attention", "--help"]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("[default: 128,256,512,1024]"));
}

#[test]
fn pretrain_writes_its_artifacts() {
    let dir = source().parent().unwrap();
    for f in ["source.ckpt", "loss.csv", "eval_docs.txt", "config.toml", "manifest.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let loss = fs::read_to_string(dir.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss\n1,"));
    assert_eq!(loss.lines().count(), 21);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"]["command"], "pretrain");
    assert_eq!(manifest["resolved"]["model"]["l_src"], 16);
    assert_eq!(manifest["resolved"]["training"]["seed"], 1);
    assert_eq!(manifest["seeds"], serde_json::json!([1]));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&taperkit(&["verify", "--bogus"])), 2);
    assert_eq!(code(&taperkit(&["no-such-command"])), 2);
    assert_eq!(code(&taperkit(&["ppl-sweep", "--src", "x", "--lengths", "a,b", "--out", "y"])), 2);
    let o = bin().env("TAPERKIT_THREADS", "many").args(["bench-attention"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn unreadable_input_exits_three() {
    let o = taperkit(&["inspect-taper", "--src", "/nonexistent/source.ckpt"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/source.ckpt"));
}

#[test]
fn invalid_inputs_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&taperkit(&["inspect-taper", "--src", s(&garbage)])), 4);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[training]\nsteps = 10\nwarp = 3\n").unwrap();
    assert_eq!(code(&taperkit(&["pretrain", "--config", s(&bad), "--out", s(dir.path())])), 4);

    let src = source();
    let out = dir.path().join("t");
    assert_eq!(code(&taperkit(&["transform", "--src", s(src), "--variant", "spiral", "--out", s(&out)])), 4);
    // tau·r must exceed r − 1.
    assert_eq!(code(&taperkit(&["inspect-taper", "--src", s(src), "--tau", "0.5"])), 4);
    let csv = dir.path().join("s.csv");
    assert_eq!(code(&taperkit(&["ppl-sweep", "--src", s(src), "--lengths", "16,128", "--out", s(&csv)])), 4);
    assert_eq!(code(&taperkit(&["bench-attention", "--lengths", "100"])), 4);
}

#[test]
fn divergence_exits_six() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("hot.toml");
    fs::write(&config, TINY.replace("steps = 20", "steps = 40\nlr = 1e12\nwarmup_fraction = 0.0")).unwrap();
    let o = taperkit(&["pretrain", "--config", s(&config), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 6, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_failure_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    // A target built from a differently seeded source cannot match.
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let other = dir.path().join("other");
    assert_eq!(code(&taperkit(&["pretrain", "--config", s(&config), "--seed", "2", "--out", s(&other)])), 0);
    let tgt = dir.path().join("tgt");
    let o = taperkit(&["transform", "--src", s(&other.join("source.ckpt")), "--out", s(&tgt)]);
    assert_eq!(code(&o), 0);

    let o = taperkit(&["verify", "--src", s(source()), "--tgt", s(&tgt.join("target.ckpt")), "--samples", "5"]);
    assert_eq!(code(&o), 5);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], false);
    assert_eq!(report["failures"].as_array().unwrap().len(), 5);
}

#[test]
fn fresh_transform_verifies_at_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    for variant in ["taper", "repeated", "vanilla"] {
        let out = dir.path().join(variant);
        let o = taperkit(&["transform", "--src", s(source()), "--variant", variant, "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(report["variant"]["kind"], variant);
        assert_eq!(report["l_tgt"], 64);
        assert_eq!(report["consistency"]["passed"], true);
        let tgt = out.join("target.ckpt");
        let o = taperkit(&["verify", "--src", s(source()), "--tgt", s(&tgt), "--samples", "30", "--precision", "f64", "--tol", "1e-10"]);
        assert_eq!(code(&o), 0);
    }
}

#[test]
fn transform_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(code(&taperkit(&["transform", "--src", s(source()), "--tau", "3", "--out", s(out)])), 0);
    }
    assert_eq!(fs::read(a.join("target.ckpt")).unwrap(), fs::read(b.join("target.ckpt")).unwrap());
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
}

#[test]
fn sweep_has_one_row_per_variant_and_length() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let o = taperkit(&["ppl-sweep", "--src", s(source()), "--lengths", "16,32,48,64", "--variants", "vanilla,taper:2.0,repeated", "--out", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("variant,tau,seq_len,masked_tokens,mean_nll,ppl"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 12);
    assert!(rows[4].starts_with("taper,2,16,"));
    assert!(dir.path().join("sweep.csv.manifest.json").is_file());
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = vec![];
    for threads in ["0", "1", "3"] {
        let csv = dir.path().join(format!("sweep{threads}.csv"));
        let o = bin()
            .env("TAPERKIT_THREADS", threads)
            .args(["ppl-sweep", "--src", s(source()), "--lengths", "16,64", "--out", s(&csv)])
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        outputs.push(fs::read(&csv).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn inspect_taper_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("inspect");
    assert_eq!(code(&taperkit(&["inspect-taper", "--src", s(source()), "--out", s(&out)])), 0);
    assert_eq!(fs::read_to_string(out.join("factors.csv")).unwrap(), "copy,factor\n0,1\n1,0.875\n2,0.75\n3,0.625\n");
    let tapered = fs::read_to_string(out.join("distinguishability.csv")).unwrap();
    let repeated = fs::read_to_string(out.join("distinguishability_repeated.csv")).unwrap();
    assert_eq!(tapered.lines().count(), 7);
    let min_dist = |text: &str| -> Vec<f64> { text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect() };
    assert!(min_dist(&tapered).iter().all(|&d| d > 0.0));
    assert!(min_dist(&repeated).iter().all(|&d| d == 0.0));
}

#[test]
fn bench_reports_attended_fraction() {
    let o = taperkit(&["bench-attention", "--lengths", "64,256"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    // 4 blocks of 16 with one global block and a 3-block window: the global
    // block and the edge blocks cover everything except the far corners.
    assert_eq!(rows[0][0], "64");
    let pairs: usize = rows[0][3].parse().unwrap();
    assert!(pairs <= 64 * 64);
    let frac: f64 = rows[1][4].parse().unwrap();
    assert!(frac < 0.5);
}

#[test]
fn replay_refuses_a_replay_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    fs::write(&m, r#"{"tool":"taperkit","version":"0","command":{"command":"replay","manifest":"x","out":null},"resolved":null,"seeds":[],"inputs":[],"outputs":[],"threads":null}"#).unwrap();
    assert_eq!(code(&taperkit(&["replay", "--manifest", s(&m)])), 4);
    let m2 = dir.path().join("broken.json");
    fs::write(&m2, "{").unwrap();
    assert_eq!(code(&taperkit(&["replay", "--manifest", s(&m2)])), 4);
}
