use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn cosped(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cosped"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn cosped")
}

fn stage(args: &[&str], out: &Path) -> Output {
    let cfg = smoke_config();
    let mut full = args.to_vec();
    full.extend(["--config", cfg.to_str().unwrap()]);
    cosped(&full, out)
}

fn stage_dir(out: &Path, name: &str) -> PathBuf {
    let mut found: Vec<PathBuf> = std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(&format!("{name}-")))
        })
        .collect();
    assert_eq!(
        found.len(),
        1,
        "expected one {name} dir in {}",
        out.display()
    );
    found.pop().unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn full_pipeline_emits_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = stage(&["run"], dir.path());
    ok(&out);
    let report = stage_dir(dir.path(), "report");
    for t in [
        "table2.csv",
        "table3.csv",
        "table5.csv",
        "report.txt",
        "manifest.json",
    ] {
        assert!(report.join(t).exists(), "{t}");
    }
    let t2 = std::fs::read_to_string(report.join("table2.csv")).unwrap();
    assert_eq!(t2.lines().count(), 1 + 6);
    let t3 = std::fs::read_to_string(report.join("table3.csv")).unwrap();
    assert!(t3.contains("\nCoSPED,4,8,") && t3.contains("\nOriginal,N.A.,8,"));
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(stage_dir(dir.path(), "tune").join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["stage"], "tune");
    assert_eq!(manifest["upstream"].as_object().unwrap().len(), 1);
}

#[test]
fn extraction_reports_are_byte_identical_across_reruns() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for out in [a.path(), b.path()] {
        for s in ["pretrain", "tune", "extract"] {
            ok(&stage(&[s], out));
        }
    }
    let read = |out: &Path| std::fs::read(stage_dir(out, "extract").join("reports.jsonl")).unwrap();
    let first = read(a.path());
    assert_eq!(first, read(b.path()));
    ok(&stage(&["extract"], a.path()));
    assert_eq!(first, read(a.path()));
}

#[test]
fn missing_upstream_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = stage(&["tune"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cosped pretrain"));
    assert_eq!(stage(&["report"], dir.path()).status.code(), Some(2));
}

#[test]
fn config_problems_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[train]\nepoch = 3\n").unwrap();
    let o = cosped(&["pretrain", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    std::fs::write(&bad, "seed = 1\n[model]\nvocab_size = 100\n").unwrap();
    let o = cosped(&["pretrain", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vocab_size"));
    let o = cosped(&["pretrain", "--config", "/nonexistent.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = cosped(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let help = Command::new(env!("CARGO_BIN_EXE_cosped"))
        .arg("--help")
        .output()
        .unwrap();
    assert!(help.status.success());
}

#[test]
fn seed_override_gives_a_separate_tuning_run() {
    let dir = tempfile::tempdir().unwrap();
    ok(&stage(&["pretrain"], dir.path()));
    ok(&stage(&["tune"], dir.path()));
    ok(&stage(&["tune", "--seed", "8"], dir.path()));
    let tunes = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("tune-")
        })
        .count();
    assert_eq!(tunes, 2);
    // One victim serves both seeds.
    stage_dir(dir.path(), "pretrain");
}

#[test]
fn grid_does_not_depend_on_thread_count() {
    let mut tables = Vec::new();
    for threads in ["1", "2"] {
        let dir = tempfile::tempdir().unwrap();
        ok(&stage(&["pretrain"], dir.path()));
        let cfg = smoke_config();
        let o = Command::new(env!("CARGO_BIN_EXE_cosped"))
            .args(["grid", "--config", cfg.to_str().unwrap(), "--out"])
            .arg(dir.path())
            .env("RUST_LOG", "warn")
            .env("COSPED_THREADS", threads)
            .output()
            .unwrap();
        ok(&o);
        let grid = stage_dir(dir.path(), "grid");
        let t1 = std::fs::read_to_string(grid.join("table1.csv")).unwrap();
        assert_eq!(t1.lines().count(), 1 + 2);
        assert!(t1.lines().nth(1).unwrap().starts_with("Mle,,,,,"));
        assert!(t1.lines().nth(2).unwrap().starts_with("Focal,x,,x,,"));
        tables.push(std::fs::read(grid.join("grid.jsonl")).unwrap());
        ok(&stage(&["report"], dir.path()));
        assert!(stage_dir(dir.path(), "report").join("table1.csv").exists());
    }
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn transfer_emits_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    for s in ["pretrain", "tune", "transfer"] {
        ok(&stage(&[s], dir.path()));
    }
    let t = stage_dir(dir.path(), "transfer");
    let csv = std::fs::read_to_string(t.join("table7.csv")).unwrap();
    let names: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        names,
        ["Original", "Transferred Soft Prompt", "Scaled Soft Prompt"]
    );
    assert!(csv.starts_with("method,ER_50,ER_30\n"));
    let map: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(t.join("map.json")).unwrap()).unwrap();
    assert_eq!(
        (map["d_src"].as_u64(), map["d_tgt"].as_u64()),
        (Some(16), Some(24))
    );
    // Two pretrain dirs: the victim and the wider transfer target.
    let pretrains = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("pretrain-")
        })
        .count();
    assert_eq!(pretrains, 2);
}
