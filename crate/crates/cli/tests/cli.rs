use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn gpumem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpumem"))
        .args(args)
        .env_remove("GPUMEM_MAPPING")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn estimate_fits_large_device() {
    let trace = fixture("synth_small.trace.json");
    let o = gpumem(&["estimate", path_str(&trace), "--capacity", "12GiB"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("schema_version = 1"), "{out}");
    assert!(out.contains("peak_reserved_bytes = 117440512"), "{out}");
    assert!(out.contains("predicted_oom = false"), "{out}");
}

#[test]
fn estimate_exits_2_on_predicted_oom() {
    let trace = fixture("synth_small.trace.json");
    let o = gpumem(&["estimate", path_str(&trace), "--capacity", "1MiB"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("predicted_oom = true"));
}

#[test]
fn estimate_missing_file_names_ingest_stage() {
    let o = gpumem(&["estimate", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage=ingest"), "{}", stderr(&o));
}

#[test]
fn estimate_rejects_zero_capacity() {
    let trace = fixture("synth_small.trace.json");
    let o = gpumem(&["estimate", path_str(&trace), "--capacity", "0"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn simulate_writes_one_curve_row_per_event() {
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("curve.csv");
    let seq = fixture("synth_small.sequence.csv");
    let o = gpumem(&["simulate", path_str(&seq), "--oracle-check", "--out", path_str(&curve)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let events = fs::read_to_string(&seq)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .count()
        - 1;
    let rows = fs::read_to_string(&curve).unwrap().lines().count() - 1;
    assert_eq!(rows, events);
}

#[test]
fn simulate_fuzz_agrees_with_reference() {
    let o = gpumem(&["simulate", "--fuzz", "100", "--seed", "500"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn simulate_rejects_corrupt_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    let text = fs::read_to_string(fixture("synth_small.sequence.csv")).unwrap();
    // drop the alloc of the first freed block so its free becomes an orphan
    let mut lines: Vec<&str> = text.lines().collect();
    let freed = lines.iter().find(|l| l.contains(",free,")).unwrap().split(',').nth(2).unwrap().to_string();
    let alloc = lines
        .iter()
        .position(|l| l.contains(",alloc,") && l.split(',').nth(2) == Some(freed.as_str()))
        .unwrap();
    lines.remove(alloc);
    fs::write(&bad, lines.join("\n")).unwrap();
    let o = gpumem(&["simulate", path_str(&bad)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn simulate_exits_2_when_device_refuses() {
    let seq = fixture("synth_small.sequence.csv");
    let o = gpumem(&["simulate", path_str(&seq), "--capacity", "16MiB", "--out", "/dev/null"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn metrics_exact_table() {
    let o = gpumem(&["metrics", path_str(&fixture("runs_12.csv")), "--exact"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    for line in ["n = 12", "mre = 1/16", "pef_r1 = 1/6", "pef_r2 = 1/3", "mcp_bytes = 4141875200"] {
        assert!(out.lines().any(|l| l == line), "missing {line:?} in\n{out}");
    }
}

#[test]
fn metrics_empty_table_fails() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(
        &empty,
        "config_id,device,estimator,m_peak_measured,m_peak_measured_r2,m_peak_estimated,oom_r1,oom_r2,m_init,m_fm,m_max\n",
    )
    .unwrap();
    let o = gpumem(&["metrics", path_str(&empty)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn metrics_gating_violation_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    // the OOM prediction was wrong, so no second round may be recorded
    fs::write(
        &bad,
        "config_id,device,estimator,m_peak_measured,m_peak_measured_r2,m_peak_estimated,oom_r1,oom_r2,m_init,m_fm,m_max\n\
         a,d,e,100,120,2000,false,false,0,0,1000\n",
    )
    .unwrap();
    let o = gpumem(&["metrics", path_str(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn synth_writes_trace_and_inventory() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.json");
    let o = gpumem(&["synth", "--out", path_str(&trace), "--seed", "3", "--zero-grad", "absent"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(fs::metadata(&trace).unwrap().len() > 0);
    let inventory = fs::read_to_string(dir.path().join("t.json.inventory.csv")).unwrap();
    assert!(inventory.starts_with("label,iteration,size_bytes,class"));
    let e = gpumem(&["estimate", path_str(&trace)]);
    assert_eq!(e.status.code(), Some(0), "{}", stderr(&e));
}
