//! End-to-end tests of the `aolab` binary: every subcommand, the run-dir
//! contract (config echo, manifest, immutability), determinism of train
//! and eval, and the exit-code mapping.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aolab_core::corpus::Vocabulary;
use aolab_core::model::checkpoint::save_checkpoint;
use aolab_core::model::{Family, Injection, ModelConfig, Parameters};
use aolab_core::objectives::trainer::EvalRow;
use sha2::{Digest, Sha256};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_aolab")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("AOLAB_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn sha256_hex(path: &Path) -> String {
    let bytes = fs::read(path).expect("artifact readable");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Deterministic word-salad corpus, no RNG crates needed.
fn write_corpus(dir: &Path) -> PathBuf {
    let words = [
        "the", "cat", "sat", "on", "a", "mat", "dogs", "run", "fast", "and", "slow", "birds",
        "sing", "quiet", "rivers",
    ];
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut text = String::new();
    for _ in 0..5000 {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let pick = (state >> 33) as usize % words.len();
        text.push_str(words[pick]);
        text.push(' ');
    }
    let path = dir.join("corpus.txt");
    fs::write(&path, text).expect("corpus written");
    path
}

fn train_config(dir: &Path, corpus: &Path) -> PathBuf {
    let toml = format!(
        r#"
[model]
family = "decoder_any_order"
n_layers = 2
d_model = 32
n_heads = 2
ctx_len = 32
injection = "add_once"

[train]
learning_rate = 1e-3
batch_tokens = 128
total_steps = 60
eval_interval = 30
eval_blocks = 4
eval_orders = 1
seed = 7

[train.order_policy]
kind = "uniform_random"

[data]
corpus = "{}"
val_frac = 0.1
"#,
        corpus.display()
    );
    let path = dir.join("train.toml");
    fs::write(&path, toml).expect("config written");
    path
}

/// Saves a random-init decoder checkpoint plus matching vocabulary for
/// the corpus in `dir`, without going through training.
fn write_checkpoint(dir: &Path, corpus: &Path) -> (PathBuf, PathBuf) {
    let text = fs::read_to_string(corpus).expect("corpus readable");
    let vocab = Vocabulary::build(&text);
    let cfg = ModelConfig {
        family: Family::DecoderAnyOrder,
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        ctx_len: 32,
        vocab_size: vocab.size(),
        injection: Injection::AddOnce,
        target_pe_dim: 16,
    };
    let params = Parameters::<f32>::init(&cfg, 99);
    let ckpt = dir.join("random.ckpt");
    let vpath = dir.join("vocab.json");
    save_checkpoint(&ckpt, &params, &cfg, &serde_json::json!({"kind": "random"}))
        .expect("checkpoint saved");
    vocab.save(&vpath).expect("vocab saved");
    (ckpt, vpath)
}

fn manifest(run_dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(run_dir.join("manifest.json")).expect("manifest present");
    serde_json::from_str(&text).expect("manifest parses")
}

#[test]
fn help_screens_exit_zero() {
    for args in [
        vec!["--help"],
        vec!["train", "--help"],
        vec!["eval", "--help"],
        vec!["sample", "--help"],
        vec!["bench", "--help"],
        vec!["count", "--help"],
        vec!["probe", "--help"],
    ] {
        let out = run(&args);
        assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
    }
}

#[test]
fn count_confirms_closed_forms_and_seals_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out_root = tmp.path().join("runs");
    let out = run(&[
        "count",
        "--n",
        "3",
        "--enumerate",
        "--out",
        out_root.to_str().unwrap(),
        "--run-name",
        "c3",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("12"), "set-conditioned count for n=3 missing:\n{text}");
    assert!(text.contains("15"), "tuple-conditioned count for n=3 missing:\n{text}");
    assert!(text.contains("ok"), "enumeration cross-check missing:\n{text}");

    let run_dir = out_root.join("c3");
    let m = manifest(&run_dir);
    assert_eq!(m["command"], "count");
    assert_eq!(
        m["config_sha256"].as_str().unwrap(),
        sha256_hex(&run_dir.join("config.toml")),
        "manifest hash must match the echoed config"
    );
    for artifact in m["artifacts"].as_array().unwrap() {
        let rel = artifact.as_str().unwrap();
        assert!(run_dir.join(rel).exists(), "declared artifact {rel} missing");
    }
}

#[test]
fn finished_run_directories_are_immutable() {
    let tmp = tempfile::tempdir().unwrap();
    let out_root = tmp.path().join("runs");
    let args = [
        "count",
        "--n",
        "2",
        "--out",
        out_root.to_str().unwrap(),
        "--run-name",
        "fixed",
    ];
    let first = run(&args);
    assert!(first.status.success());
    let second = run(&args);
    assert_eq!(second.status.code(), Some(2), "{}", stderr(&second));
    assert!(stderr(&second).contains("immutable"));
}

#[test]
fn out_root_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let env_root = tmp.path().join("from-env");
    let out = Command::new(bin())
        .args(["count", "--n", "2", "--run-name", "envy"])
        .env("AOLAB_OUT", &env_root)
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(env_root.join("envy").join("manifest.json").exists());
}

#[test]
fn train_smoke_logs_metrics_and_checkpoints_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path());
    let config = train_config(tmp.path(), &corpus);
    let out_root = tmp.path().join("runs");

    for name in ["a", "b"] {
        let out = run(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_root.to_str().unwrap(),
            "--run-name",
            name,
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }

    let dir = out_root.join("a");
    assert!(dir.join("final.ckpt").exists());
    assert!(dir.join("vocab.json").exists());
    let rows: Vec<EvalRow> = fs::read_to_string(dir.join("metrics.jsonl"))
        .expect("metrics written")
        .lines()
        .map(|l| serde_json::from_str(l).expect("row parses"))
        .collect();
    assert!(rows.len() >= 2, "60 steps at interval 30 should log two rows");
    assert!(rows.iter().all(|r| r.train_loss.is_finite()));
    assert!(
        rows.last().unwrap().val_anyorder_nll < rows.first().unwrap().val_anyorder_nll + 0.5,
        "validation loss should not blow up over a short smoke run"
    );

    assert_eq!(
        sha256_hex(&out_root.join("a").join("final.ckpt")),
        sha256_hex(&out_root.join("b").join("final.ckpt")),
        "identical config and seed must produce identical weights"
    );
}

#[test]
fn probe_passes_and_eval_reports_are_byte_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path());
    let (ckpt, vocab) = write_checkpoint(tmp.path(), &corpus);
    let out_root = tmp.path().join("runs");

    let probe_cfg = tmp.path().join("probe.toml");
    fs::write(
        &probe_cfg,
        format!(
            "checkpoint = \"{}\"\nvocab = \"{}\"\ncorpus = \"{}\"\nbudget = 1500\nblock_len = 16\nmax_blocks = 3\nseed = 11\n",
            ckpt.display(),
            vocab.display(),
            corpus.display()
        ),
    )
    .unwrap();
    let out = run(&[
        "probe",
        "--config",
        probe_cfg.to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
        "--run-name",
        "probe",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS"), "probe should pass on a real model:\n{text}");
    assert!(out_root.join("probe").join("probe.json").exists());

    let eval_cfg = tmp.path().join("eval.toml");
    fs::write(
        &eval_cfg,
        format!(
            "checkpoint = \"{}\"\nvocab = \"{}\"\ncorpus = \"{}\"\nmodes = [\"l2r\", \"any_order\"]\nensemble_sizes = [2]\nnum_orders = 2\nblock_len = 16\nmax_blocks = 3\nseed = 5\n",
            ckpt.display(),
            vocab.display(),
            corpus.display()
        ),
    )
    .unwrap();
    for name in ["e1", "e2"] {
        let out = run(&[
            "eval",
            "--config",
            eval_cfg.to_str().unwrap(),
            "--out",
            out_root.to_str().unwrap(),
            "--run-name",
            name,
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let r1 = fs::read(out_root.join("e1").join("report.csv")).unwrap();
    let r2 = fs::read(out_root.join("e2").join("report.csv")).unwrap();
    assert!(!r1.is_empty());
    assert_eq!(r1, r2, "re-evaluation must be byte-identical");
    let header = String::from_utf8_lossy(&r1);
    assert!(header.starts_with("dataset,mode,model,nll,ppl,stderr,num_tokens"));
}

#[test]
fn sample_writes_text_and_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path());
    let (ckpt, vocab) = write_checkpoint(tmp.path(), &corpus);
    let out_root = tmp.path().join("runs");

    let cfg = tmp.path().join("sample.toml");
    fs::write(
        &cfg,
        format!(
            "checkpoint = \"{}\"\nvocab = \"{}\"\nnum_samples = 2\ntrace = true\n\n[generation]\nseq_len = 16\nnum_steps = 4\nseed = 3\nengine = \"decoder_cached\"\n",
            ckpt.display(),
            vocab.display()
        ),
    )
    .unwrap();
    let out = run(&[
        "sample",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
        "--run-name",
        "s",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let dir = out_root.join("s");
    let samples = fs::read_to_string(dir.join("samples.txt")).unwrap();
    assert_eq!(samples.lines().count(), 2);
    assert!(samples.lines().all(|l| l.chars().count() == 16));
    let trace = fs::read_to_string(dir.join("trace.jsonl")).unwrap();
    // 2 samples x 4 steps, each line tagged with its sample index.
    assert_eq!(trace.lines().count(), 8);
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["sample"].is_u64());
        assert!(v["step"].is_u64());
        assert!(v["decoded_count"].is_u64());
    }
}

#[test]
fn bench_emits_the_slope_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out_root = tmp.path().join("runs");
    let cfg = tmp.path().join("bench.toml");
    fs::write(
        &cfg,
        r#"
seq_lens = [8, 16]
engines = ["decoder_cached", "decoder_full_recompute"]
runs = 2
init_seed = 1

[model]
family = "decoder_any_order"
n_layers = 1
d_model = 32
n_heads = 2
ctx_len = 32
vocab_size = 21
"#,
    )
    .unwrap();
    let out = run(&[
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
        "--run-name",
        "b",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(out_root.join("b").join("bench.csv")).unwrap();
    assert!(csv.starts_with("engine,n,T,median_ms,slope"));
    assert_eq!(csv.lines().count(), 5, "header plus 2 engines x 2 sizes");
    assert!(stdout(&out).contains("speedup"));
}

#[test]
fn order_policy_sweep_trains_one_run_per_entry() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path());
    let base = fs::read_to_string(train_config(tmp.path(), &corpus)).unwrap();
    let sweep = format!(
        "{base}
[[sweep]]
name = \"l2r\"
[sweep.policy]
kind = \"identity\"

[[sweep]]
name = \"fr\"
[sweep.policy]
kind = \"fixed_random\"
seed = 0
"
    );
    let cfg = tmp.path().join("sweep.toml");
    fs::write(&cfg, sweep).unwrap();
    let out_root = tmp.path().join("runs");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
        "--run-name",
        "sw",
        "--steps",
        "30",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["sw-l2r", "sw-fr"] {
        let dir = out_root.join(name);
        assert!(dir.join("metrics.jsonl").exists(), "{name} missing metrics");
        assert!(dir.join("manifest.json").exists(), "{name} missing manifest");
        let echoed = fs::read_to_string(dir.join("config.toml")).unwrap();
        assert!(!echoed.contains("[[sweep]]"), "echo must collapse the sweep");
    }
    let l2r = fs::read_to_string(out_root.join("sw-l2r").join("config.toml")).unwrap();
    assert!(l2r.contains("kind = \"identity\""));
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path());
    let config = train_config(tmp.path(), &corpus);
    let bad = fs::read_to_string(&config).unwrap().replace("[train]", "bogus_key = 1\n[train]");
    let bad_path = tmp.path().join("bad.toml");
    fs::write(&bad_path, bad).unwrap();
    let out = run(&[
        "train",
        "--config",
        bad_path.to_str().unwrap(),
        "--out",
        tmp.path().join("runs").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("bogus_key"));
}

#[test]
fn missing_corpus_exits_four() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path());
    let config = train_config(tmp.path(), &corpus);
    fs::remove_file(&corpus).unwrap();
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        tmp.path().join("runs").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn numerical_blowup_exits_three_without_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path());
    let config = train_config(tmp.path(), &corpus);
    let out_root = tmp.path().join("runs");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
        "--run-name",
        "nan",
        "--lr",
        "1e12",
        "--steps",
        "40",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let dir = out_root.join("nan");
    assert!(dir.join("config.toml").exists(), "config echo must survive the abort");
    assert!(dir.join("metrics.jsonl").exists(), "partial metrics must survive the abort");
    assert!(!dir.join("manifest.json").exists(), "failed runs must not be sealed");
}
