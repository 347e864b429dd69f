use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use matlora::data::{save_sequence, Domain, DomainSequence};
use matlora::Matrix;
use serde_json::Value;

fn matlora(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matlora"))
        .env_remove("MATLORA_OUT")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = matlora(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: [&str; 12] = [
    "--epochs", "15", "--width", "8", "--r", "3", "--r-prime", "2", "--pretrain-epochs", "40", "--seed", "1",
];

fn small_data(root: &Path) -> PathBuf {
    let dir = root.join("data");
    ok(&dir, &["gen-data", "--samples", "40", "--domains", "5", "--train-count", "3", "--seed", "2"]);
    dir.join("sequence.json")
}

fn train_small(root: &Path, name: &str, method: &str, extra: &[&str]) -> PathBuf {
    let data = small_data(root);
    let dir = root.join(name);
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--method", method];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    ok(&dir, &args);
    dir
}

#[test]
fn gen_data_defaults_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&a, &["gen-data", "--seed", "7"]);
    ok(&b, &["gen-data", "--seed", "7"]);
    let seq = json(&a.join("sequence.json"));
    assert_eq!(seq["num_domains"], 12);
    assert_eq!(seq["train_count"], 9);
    assert_eq!(seq["domains"][0]["samples"].as_array().unwrap().len(), 200);
    assert_eq!(fs::read(a.join("sequence.json")).unwrap(), fs::read(b.join("sequence.json")).unwrap());
    let rc = json(&a.join("run_config.json"));
    assert_eq!(rc["command"], "gen-data");
    assert_eq!(rc["data"]["rotation_deg"], 18.0);
}

#[test]
fn odd_sample_count_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = matlora(tmp.path(), &["gen-data", "--samples", "201"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("sequence.json").exists());
}

#[test]
fn unknown_method_lists_the_choices() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let o = matlora(tmp.path(), &["train", "--data", data.to_str().unwrap(), "--method", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for m in ["matlora", "offline", "last_domain", "inc_finetune", "multi_lora", "distill"] {
        assert!(err.contains(m), "{err}");
    }
}

#[test]
fn missing_inputs_and_bad_flags_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let o = matlora(tmp.path(), &["train", "--data", missing.to_str().unwrap(), "--method", "offline"]);
    assert_eq!(o.status.code(), Some(2));
    let data = small_data(tmp.path());
    let o = matlora(tmp.path(), &["train", "--data", data.to_str().unwrap(), "--method", "offline", "--r-prime", "9"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(matlora(tmp.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn divergence_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--method", "offline"];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(&["--lr", "1e307"]);
    let o = matlora(&tmp.path().join("run"), &args);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn train_writes_a_checkpoint_with_its_core() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_small(tmp.path(), "run", "matlora", &["--core", "markov"]);
    let ck = json(&dir.join("checkpoint.json"));
    assert_eq!(ck["format_version"], 1);
    assert_eq!(ck["core_variant"], "markov");
    assert_eq!(ck["model"]["params"]["adapters"]["adapters"][0]["core"]["variant"], "markov");
    let rc = json(&dir.join("run_config.json"));
    assert_eq!(rc["train"]["core_variant"], "markov");
    assert_eq!(rc["train"]["epochs"], 15);
    let losses = fs::read_to_string(dir.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 15 * 3);
    let shorthand = train_small(tmp.path(), "short", "matlora:markov", &[]);
    assert_eq!(
        fs::read(dir.join("checkpoint.json")).unwrap(),
        fs::read(shorthand.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn repeated_training_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train_small(tmp.path(), "a", "offline", &[]);
    let b = train_small(tmp.path(), "b", "offline", &[]);
    for f in ["checkpoint.json", "report.json", "losses.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_matches_the_training_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_small(tmp.path(), "run", "matlora", &[]);
    let data = tmp.path().join("data/sequence.json");
    let ck = dir.join("checkpoint.json");
    let ev = tmp.path().join("eval0");
    ok(&ev, &["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap(), "--domains", "0"]);
    let report = json(&dir.join("report.json"));
    let table = json(&ev.join("eval.json"));
    assert_eq!(table["rows"][0]["accuracy"], report["train_accuracy"][0]);

    let ev = tmp.path().join("eval_default");
    ok(&ev, &["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    let table = json(&ev.join("eval.json"));
    let rows = table["rows"].as_array().unwrap();
    let domains: Vec<u64> = rows.iter().map(|r| r["domain"].as_u64().unwrap()).collect();
    assert_eq!(domains, vec![3, 4]);
    let mean = rows.iter().map(|r| r["accuracy"].as_f64().unwrap()).sum::<f64>() / 2.0;
    assert_eq!(table["mean"].as_f64().unwrap(), mean);
}

#[test]
fn eval_rejects_incompatible_sequences() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_small(tmp.path(), "run", "last_domain", &[]);
    let domains = (0..2)
        .map(|t| Domain {
            timestamp: t as f64,
            inputs: Matrix::zeros(4, 3),
            labels: vec![0, 1, 0, 1],
        })
        .collect();
    let wide = tmp.path().join("wide.json");
    save_sequence(&DomainSequence::new(domains, 1, 2).unwrap(), &wide).unwrap();
    let ck = dir.join("checkpoint.json");
    let o = matlora(&tmp.path().join("ev"), &["eval", "--checkpoint", ck.to_str().unwrap(), "--data", wide.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn params_reports_table_dimensions() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["params"]);
    let rep = json(&tmp.path().join("params.json"));
    assert_eq!(rep["counts"]["multi"], 9216);
    assert_eq!(rep["counts"]["single"], 1024);
    assert_eq!(rep["counts"]["ours"], 544);
    let reductions = rep["reductions"].as_array().unwrap();
    assert_eq!(reductions.len(), 2);
    assert!(reductions.iter().all(|r| !r["assumption_text"].as_str().unwrap().is_empty()));
    assert!(reductions.iter().any(|r| r["ratio"].as_f64().unwrap() >= 1e10));
}

#[test]
fn boundary_writes_one_grid_per_time() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_small(tmp.path(), "run", "matlora", &[]);
    let ck = dir.join("checkpoint.json");
    let out = tmp.path().join("grids");
    ok(&out, &["boundary", "--checkpoint", ck.to_str().unwrap(), "--resolution", "10"]);
    for t in [9, 10, 11] {
        let text = fs::read_to_string(out.join(format!("boundary_t{t}.csv"))).unwrap();
        assert_eq!(text.lines().count(), 101);
        assert!(text.starts_with("x,y,class,prob\n"));
    }
    assert!(out.join("run_config.json").exists());
}

#[test]
fn stability_trace_starts_at_zero_energy() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let out = tmp.path().join("st");
    ok(
        &out,
        &["stability", "--data", data.to_str().unwrap(), "--steps-per-domain", "4", "--init-epochs", "10", "--pretrain-epochs", "30"],
    );
    let csv = fs::read_to_string(out.join("stability_trace.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let first: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    assert_eq!(first[col("e_b")].parse::<f64>().unwrap(), 0.0);
    assert_eq!(first[col("e_a")].parse::<f64>().unwrap(), 0.0);
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
    let summary = json(&out.join("stability_summary.json"));
    assert_eq!(summary["summary"]["leak_violations"], 0);
    assert_eq!(summary["summary"]["expansion_ok"], true);
}

#[test]
fn output_root_comes_from_the_environment_unless_overridden() {
    let tmp = tempfile::tempdir().unwrap();
    let env_dir = tmp.path().join("from_env");
    let st = Command::new(env!("CARGO_BIN_EXE_matlora"))
        .env("MATLORA_OUT", &env_dir)
        .args(["params"])
        .output()
        .unwrap();
    assert!(st.status.success());
    assert!(env_dir.join("params.json").exists());
    let flag_dir = tmp.path().join("from_flag");
    let st = Command::new(env!("CARGO_BIN_EXE_matlora"))
        .env("MATLORA_OUT", &env_dir)
        .arg("--out")
        .arg(&flag_dir)
        .arg("params")
        .output()
        .unwrap();
    assert!(st.status.success());
    assert!(flag_dir.join("params.json").exists());
}

#[test]
fn reproduce_builds_the_full_tree() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["reproduce", "--seed", "3", "--epochs", "3", "--pretrain-epochs", "10", "--samples", "40", "--resolution", "5"];
    ok(tmp.path(), &args);
    let results = json(&tmp.path().join("results.json"));
    let methods: Vec<&str> = results["methods"].as_array().unwrap().iter().map(|m| m["method"].as_str().unwrap()).collect();
    assert_eq!(
        methods,
        [
            "matlora:lindyn", "matlora:markov", "matlora:nonlin", "offline", "last_domain", "inc_finetune", "multi_lora",
            "distill:lindyn"
        ]
    );
    for sub in ["data", "train/matlora_lindyn", "train/distill_lindyn", "stability", "params", "boundary", ""] {
        assert!(tmp.path().join(sub).join("run_config.json").exists(), "{sub}");
    }
    assert!(tmp.path().join("boundary/boundary_t11.csv").exists());
    assert!(fs::read_to_string(tmp.path().join("results.md")).unwrap().starts_with("| method |"));
}
