use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedcc_core::harness::{read_trajectory_csv, CSV_HEADER};

fn fedcc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedcc"))
        .args(args)
        .current_dir(dir)
        .env("FEDCC_OUTPUT_DIR", dir.join("default-out"))
        .output()
        .unwrap()
}

fn demo_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/quadratic_demo.toml")
}

const SMALL: &str = r#"
seed = 3

[problem]
kind = "quadratic"
clients = 6
dim = 8
heterogeneity = 2.0
sigma = 0.1

[algorithm]
name = "scallion"
alpha = 0.5

[compressor]
kind = "random-sparsify"
s = 2

[hyperparams]
eta_l = 0.02
eta_g = 1.0
local_steps = 3
sampled_clients = 2
rounds = 12

[output]
eval_interval = 4
"#;

#[test]
fn run_writes_one_row_per_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("demo.csv");
    let res = fedcc(
        dir.path(),
        &["run", "-c", demo_config().to_str().unwrap(), "-o", out.to_str().unwrap()],
    );
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    // 200 rounds evaluated every 10, plus round 0
    assert_eq!(read_trajectory_csv(&out).unwrap().len(), 21);
    assert!(out.with_file_name("demo.csv.config.toml").exists());
}

#[test]
fn default_output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let res = fedcc(dir.path(), &["run", "-c", "small.toml"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let written: Vec<_> = fs::read_dir(dir.path().join("default-out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    assert_eq!(written.len(), 1, "{written:?}");
}

#[test]
fn echo_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let a = fedcc(dir.path(), &["run", "-c", "small.toml", "-o", "a.csv"]);
    assert_eq!(a.status.code(), Some(0));
    let b = fedcc(dir.path(), &["run", "-c", "a.csv.config.toml", "-o", "b.csv"]);
    assert_eq!(b.status.code(), Some(0), "{}", String::from_utf8_lossy(&b.stderr));
    assert_eq!(
        fs::read(dir.path().join("a.csv")).unwrap(),
        fs::read(dir.path().join("b.csv")).unwrap()
    );
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad_alpha = SMALL.replace("alpha = 0.5", "alpha = 1.5");
    fs::write(dir.path().join("alpha.toml"), bad_alpha).unwrap();
    let res = fedcc(dir.path(), &["run", "-c", "alpha.toml"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("algorithm.alpha"));

    let unknown = SMALL.replace("rounds = 12", "rounds = 12\nwarmup = 3");
    fs::write(dir.path().join("unknown.toml"), unknown).unwrap();
    let res = fedcc(dir.path(), &["run", "-c", "unknown.toml"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("warmup"));
}

#[test]
fn missing_dataset_is_an_ingestion_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[problem]
kind = "mnist"
data_dir = "nowhere"
clients = 10

[algorithm]
name = "scaffold"
"#;
    fs::write(dir.path().join("mnist.toml"), cfg).unwrap();
    let res = fedcc(dir.path(), &["run", "-c", "mnist.toml"]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn compare_aligns_runs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.toml"), SMALL).unwrap();
    let orig = SMALL
        .replace("name = \"scallion\"\nalpha = 0.5", "name = \"scaffold-original\"")
        .replace("[compressor]\nkind = \"random-sparsify\"\ns = 2\n", "");
    fs::write(dir.path().join("b.toml"), &orig).unwrap();
    let single = orig.replace("scaffold-original", "scaffold");
    fs::write(dir.path().join("c.toml"), single).unwrap();
    let res = fedcc(
        dir.path(),
        &["compare", "-c", "a.toml", "b.toml", "c.toml", "-o", "cmp.csv"],
    );
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let table = fs::read_to_string(dir.path().join("cmp.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);

    let mismatched = SMALL.replace("eval_interval = 4", "eval_interval = 3");
    fs::write(dir.path().join("d.toml"), mismatched).unwrap();
    let res = fedcc(dir.path(), &["compare", "-c", "a.toml", "d.toml", "-o", "x.csv"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn check_compressor_reports_pass_and_rejects_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    let ok = fedcc(
        dir.path(),
        &["check-compressor", "--kind", "top-r", "--r", "0.05", "--dim", "100", "--trials", "1000"],
    );
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));

    let ok = fedcc(
        dir.path(),
        &[
            "check-compressor", "--kind", "random-dither", "--bits", "2", "--dim", "32", "--trials",
            "20000", "--seed", "5",
        ],
    );
    assert_eq!(ok.status.code(), Some(0));

    let bad = fedcc(
        dir.path(),
        &["check-compressor", "--kind", "random-sparsify", "--s", "40", "--dim", "32", "--trials", "20000"],
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn grid_selects_a_finite_cell() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let res = fedcc(
        dir.path(),
        &["grid", "-c", "small.toml", "--eta-g", "0.1,1", "--eta-l", "0.01,100", "-o", "grid.csv"],
    );
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let table = fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);
}

#[test]
fn inspect_summarizes_a_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    assert_eq!(fedcc(dir.path(), &["run", "-c", "small.toml", "-o", "t.csv"]).status.code(), Some(0));
    let res = fedcc(dir.path(), &["inspect", "t.csv"]);
    assert_eq!(res.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&res.stdout).contains("uplink_bytes_cum"));

    fs::write(dir.path().join("junk.csv"), "round,algo\n1,x\n").unwrap();
    assert_eq!(fedcc(dir.path(), &["inspect", "junk.csv"]).status.code(), Some(3));
}
