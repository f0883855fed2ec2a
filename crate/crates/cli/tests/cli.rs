//! End-to-end tests of the installed binary: artifacts on disk, exit
//! codes, and byte determinism across worker counts.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_anchorlab"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed (code {:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("binary runs").status.code().expect("exit code")
}

/// Small corpus shared by most tests: pool ids 0..19, test ids 20..25.
fn gen_small_corpus(dir: &Path) {
    run_ok(bin().args([
        "gen-corpus",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "11",
        "--delta",
        "0.7",
        "--n",
        "10",
        "--n-test",
        "3",
        "--min-len",
        "3",
        "--max-len",
        "6",
    ]));
}

const SMALL_MODEL: &[&str] = &[
    "--num-layers",
    "2",
    "--model-dim",
    "16",
    "--num-heads",
    "2",
    "--ff-dim",
    "32",
    "--max-seq-len",
    "256",
    "--init-seed",
    "5",
];

#[test]
fn gen_corpus_is_deterministic_and_creates_missing_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a").join("nested");
    let b = tmp.path().join("b").join("nested");
    for out in [&a, &b] {
        run_ok(bin().args([
            "gen-corpus",
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "7",
            "--delta",
            "0.5",
            "--n",
            "60",
        ]));
    }
    for file in ["corpus.json", "pool.jsonl", "test.jsonl"] {
        let left = std::fs::read(a.join(file)).unwrap();
        let right = std::fs::read(b.join(file)).unwrap();
        assert_eq!(left, right, "{file} differs between identical invocations");
    }
}

#[test]
fn delta_out_of_range_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let code = exit_code(bin().args([
        "gen-corpus",
        "--out",
        tmp.path().join("c").to_str().unwrap(),
        "--delta",
        "1.5",
    ]));
    assert_eq!(code, 2);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(&cfg, "num_layres = 4\n").unwrap();
    let out = bin()
        .args(["run", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_layres"));
}

#[test]
fn demo_pair_cap_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small_corpus(&tmp.path().join("corpus"));
    let mut cmd = bin();
    cmd.args(["run", "--corpus", tmp.path().join("corpus").to_str().unwrap()])
        .args(SMALL_MODEL)
        .args(["--demo-pairs", "5", "--out", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(exit_code(&mut cmd), 2);
}

#[test]
fn missing_corpus_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.args(["retrieve", "--corpus", tmp.path().join("absent").to_str().unwrap()])
        .args(SMALL_MODEL)
        .args(["--test-id", "0"]);
    assert_eq!(exit_code(&mut cmd), 3);
}

#[test]
fn run_writes_reports_and_is_byte_deterministic_across_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_small_corpus(&corpus);
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(
        &cfg,
        format!(
            "num_layers = 2\nmodel_dim = 16\nnum_heads = 2\nff_dim = 32\n\
             max_seq_len = 256\ninit_seed = 5\ncorpus_dir = \"{}\"\n\
             pipelines = \"icl-random, anchored\"\nruns = 2\nbase_seed = 3\n\
             demo_pairs = 2\n",
            corpus.display()
        ),
    )
    .unwrap();

    let out_a = tmp.path().join("out-a");
    let out_b = tmp.path().join("out-b");
    run_ok(bin().args([
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
        "--workers",
        "1",
    ]));
    run_ok(bin().args([
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
        "--workers",
        "4",
    ]));

    for pipeline in ["icl-random", "anchored"] {
        for k in 0..2 {
            let rel = format!("{pipeline}/run-{k}/predictions.jsonl");
            let a = std::fs::read(out_a.join(&rel)).unwrap();
            let b = std::fs::read(out_b.join(&rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between worker counts");
        }
    }
    let a = std::fs::read(out_a.join("aggregate.csv")).unwrap();
    let b = std::fs::read(out_b.join("aggregate.csv")).unwrap();
    assert_eq!(a, b, "aggregate.csv differs between worker counts");
    assert!(out_a.join("significance.json").exists());
    assert!(out_a.join("run.log").exists());
}

#[test]
fn retrieve_emits_the_selection_as_json() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_small_corpus(&corpus);
    let out = run_ok(
        bin()
            .args(["retrieve", "--corpus", corpus.to_str().unwrap()])
            .args(SMALL_MODEL)
            .args(["--test-id", "20", "--sub", "--dump-layout"]),
    );
    let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(value["test_id"], 20);
    assert_eq!(value["main_set"].as_array().unwrap().len(), 4);
    assert_eq!(value["main_ids"].as_array().unwrap().len(), 8);
    assert_eq!(value["sub_sets"].as_array().unwrap().len(), 8);
    assert!(!value["layout"]["tokens"].as_array().unwrap().is_empty());
    let criteria: Vec<&str> = value["main_set"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["criterion"].as_str().unwrap())
        .collect();
    assert_eq!(criteria, ["sem-sim", "sem-dis", "len-sim", "len-dis"]);
}

#[test]
fn extract_writes_a_loadable_vector_set() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_small_corpus(&corpus);
    let tv = tmp.path().join("demo0.tv");
    run_ok(
        bin()
            .args(["extract", "--corpus", corpus.to_str().unwrap()])
            .args(SMALL_MODEL)
            .args(["--demo-id", "0", "--out", tv.to_str().unwrap()]),
    );
    let set = anchorlab::intervention::TaskVectorSet::load(&tv).unwrap();
    assert_eq!(set.demo_id, anchorlab::retrieval::DemoId(0));
    assert_eq!(set.num_layers(), 2);
    assert_eq!(set.dim(), 16);
}

#[test]
fn sweep_zero_strength_rows_are_zero() {
    let out = run_ok(
        bin()
            .args(["sweep", "--tokens", "40,41,42,43"])
            .args(SMALL_MODEL)
            .args(["--strengths", "0.0"]),
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "position,depth,breadth,strength,effect");
    let mut rows = 0;
    for line in lines {
        let effect: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(effect, 0.0, "row {line}");
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn grid_emits_twelve_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_small_corpus(&corpus);
    let csv = tmp.path().join("grid.csv");
    run_ok(
        bin()
            .args(["grid", "--corpus", corpus.to_str().unwrap()])
            .args(SMALL_MODEL)
            .args(["--seed", "2", "--out", csv.to_str().unwrap()]),
    );
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 13, "header + 12 cells");
    assert_eq!(lines[0], "prompt,anchor,accuracy,f1");
    assert!(lines[1].starts_with("random,none,"));
    assert!(lines[12].starts_with("contrastive,contrastive,"));
}

#[test]
fn report_rebuilds_the_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_small_corpus(&corpus);
    let out_dir = tmp.path().join("out");
    run_ok(
        bin()
            .args(["run", "--corpus", corpus.to_str().unwrap()])
            .args(SMALL_MODEL)
            .args([
                "--pipelines",
                "icl-random,tv-add",
                "--runs",
                "2",
                "--demo-pairs",
                "2",
                "--out",
                out_dir.to_str().unwrap(),
            ]),
    );
    let original = std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    std::fs::remove_file(out_dir.join("aggregate.csv")).unwrap();
    run_ok(bin().args([
        "report",
        "--dir",
        out_dir.to_str().unwrap(),
        "--baseline",
        "icl-random",
    ]));
    let rebuilt = std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    assert_eq!(original, rebuilt);
}
