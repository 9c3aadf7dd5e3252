use std::path::Path;
use std::process::{Command, Output};

use mergelab::harness::{sha256_hex, Manifest};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/small.json");

fn mergelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mergelab"))
        .args(args)
        .output()
        .expect("spawn mergelab")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn finetuned(dir: &Path) -> std::path::PathBuf {
    let ck = dir.join("ck");
    let out = mergelab(&["finetune", "--config", FIXTURE, "--out", s(&ck)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    ck
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&mergelab(&["--help"])), 0);
    assert_eq!(code(&mergelab(&["frobnicate"])), 1);
    assert_eq!(code(&mergelab(&["merge", "--out", "/tmp/unused"])), 1);
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(
        code(&mergelab(&["bounds", "--check", "nope", "--out", s(&out)])),
        1
    );
    assert_eq!(
        code(&mergelab(&["sweep", "--axis", "depth", "--out", s(&out)])),
        1
    );
    let missing = mergelab(&[
        "reproduce",
        "--config",
        "/nonexistent/cfg.json",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&missing), 1);
    assert!(stderr(&missing).contains("/nonexistent/cfg.json"));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "seeds": "zero" }"#).unwrap();
    let out = mergelab(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("invalid configuration"));
}

#[test]
fn merge_without_checkpoints_names_the_missing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mergelab(&[
        "merge",
        "--checkpoints",
        s(&tmp.path().join("empty")),
        "--method",
        "samerging",
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(
        err.contains("experiment.json") && err.contains("mergelab finetune"),
        "{err}"
    );
}

#[test]
fn merge_with_partial_checkpoints_names_the_missing_task() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("ck");
    let out = mergelab(&[
        "finetune",
        "--config",
        FIXTURE,
        "--task",
        "1",
        "--out",
        s(&ck),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(ck.join("task_1.json").is_file() && !ck.join("task_0.json").exists());
    let out = mergelab(&[
        "merge",
        "--checkpoints",
        s(&ck),
        "--method",
        "average",
        "--out",
        s(&tmp.path().join("m")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("task_0.json"));
    let bad_task = mergelab(&[
        "finetune",
        "--config",
        FIXTURE,
        "--task",
        "9",
        "--out",
        s(&ck),
    ]);
    assert_eq!(code(&bad_task), 1);
}

#[test]
fn failing_finetune_gate_exits_two_and_records_it() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(FIXTURE).unwrap()).unwrap();
    cfg["gates"]["min_finetune_accuracy"] = serde_json::json!(1.01);
    let path = tmp.path().join("strict.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let dir = tmp.path().join("ck");
    let out = mergelab(&["finetune", "--config", s(&path), "--out", s(&dir)]);
    assert_eq!(code(&out), 2);
    let m = manifest(&dir);
    assert!(!m.passed);
    assert!(m
        .gates
        .iter()
        .any(|g| g.name.ends_with("finetune_accuracy") && !g.passed));
    let sweep = mergelab(&[
        "sweep",
        "--axis",
        "k",
        "--values",
        "4",
        "--config",
        s(&path),
        "--out",
        s(&tmp.path().join("s")),
    ]);
    assert_eq!(code(&sweep), 2);
}

#[test]
fn manifest_digests_match_written_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    let run = mergelab(&[
        "gen-data",
        "--T",
        "2",
        "--C",
        "3",
        "--d",
        "4",
        "--seed",
        "5",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let m = manifest(&out);
    assert_eq!(m.command, "gen-data");
    assert_eq!(m.schema_version, 1);
    assert_eq!(m.config["experiment"]["suite"]["tasks"], 2);
    assert!(m.files.iter().any(|f| f.path == "task1/test.csv"));
    for f in &m.files {
        let bytes = std::fs::read(out.join(&f.path)).unwrap();
        assert_eq!(bytes.len(), f.bytes);
        assert_eq!(sha256_hex(&bytes), f.sha256);
    }
    let header = std::fs::read_to_string(out.join("task0/train.csv")).unwrap();
    assert!(header.starts_with("id,x0,x1,x2,x3,label\n"));
}

#[test]
fn merge_then_eval_agree_for_every_method() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = finetuned(tmp.path());
    for method in [
        "pretrained",
        "average",
        "task_arithmetic",
        "ties",
        "fisher",
        "regmean",
        "adamerging",
        "samerging",
    ] {
        let m = tmp.path().join(format!("m_{method}"));
        let out = mergelab(&[
            "merge",
            "--checkpoints",
            s(&ck),
            "--method",
            method,
            "--out",
            s(&m),
        ]);
        assert_eq!(code(&out), 0, "{method}: {}", stderr(&out));
        let e = tmp.path().join(format!("e_{method}"));
        let model = m.join("merged.json");
        let out = mergelab(&[
            "eval",
            "--checkpoints",
            s(&ck),
            "--model",
            s(&model),
            "--out",
            s(&e),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let merged = std::fs::read_to_string(m.join("results.csv")).unwrap();
        let evaluated = std::fs::read_to_string(e.join("results.csv")).unwrap();
        let tail = |t: &str| {
            t.lines()
                .nth(2)
                .unwrap()
                .split_once(',')
                .unwrap()
                .1
                .to_string()
        };
        assert_eq!(tail(&merged), tail(&evaluated), "{method}");
        assert_eq!(
            m.join("coefficients.json").exists(),
            method.ends_with("merging")
        );
    }
    let out = mergelab(&[
        "merge",
        "--checkpoints",
        s(&ck),
        "--method",
        "fine_tuned",
        "--out",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(code(&out), 1);
    let out = mergelab(&[
        "merge",
        "--checkpoints",
        s(&ck),
        "--method",
        "magic",
        "--out",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("samerging"));
}

#[test]
fn landscape_grid_layout_and_direction_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = finetuned(tmp.path());
    let l = tmp.path().join("l");
    let out = mergelab(&[
        "landscape",
        "--checkpoints",
        s(&ck),
        "--grid=-1:1:3,-1:1:3",
        "--directions",
        "0,2",
        "--out",
        s(&l),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(l.join("landscape.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "a,b=-1,b=0,b=1");
    assert_eq!(lines.len(), 4);
    let centre: f64 = lines[2].split(',').nth(2).unwrap().parse().unwrap();
    assert!(centre.is_finite() && centre > 0.0);
    let bad = mergelab(&[
        "landscape",
        "--checkpoints",
        s(&ck),
        "--directions",
        "0,7",
        "--out",
        s(&l),
    ]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn bounds_reports_every_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("b");
    let out = mergelab(&[
        "bounds",
        "--trials",
        "10",
        "--config",
        FIXTURE,
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = manifest(&out_dir);
    assert_eq!(m.gates.len(), 5);
    for kind in ["decomposition", "pertask", "merged", "excess", "pinsker"] {
        let csv = std::fs::read_to_string(out_dir.join(format!("{kind}.csv"))).unwrap();
        assert!(csv.starts_with("#schema_version=1\ntrial,lhs,rhs,slack,se\n"));
        assert_eq!(csv.lines().count(), 12);
    }
}

#[test]
fn reproduce_exit_code_follows_the_manifest_and_threads_do_not_matter() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("par"), tmp.path().join("seq"));
    let par = mergelab(&["reproduce", "--config", FIXTURE, "--out", s(&a)]);
    let seq = mergelab(&[
        "reproduce",
        "--config",
        FIXTURE,
        "--sequential",
        "--out",
        s(&b),
    ]);
    let m = manifest(&a);
    assert_eq!(code(&par), if m.passed { 0 } else { 2 });
    assert_eq!(code(&par), code(&seq));
    for f in &m.files {
        assert_eq!(
            std::fs::read(a.join(&f.path)).unwrap(),
            std::fs::read(b.join(&f.path)).unwrap(),
            "{}",
            f.path
        );
    }
    for file in [
        "results.csv",
        "ablation.csv",
        "sweeps/lam_init.csv",
        "sweeps/k.csv",
        "flatness.csv",
        "summary.json",
    ] {
        assert!(m.files.iter().any(|f| f.path == file), "{file}");
    }
}
