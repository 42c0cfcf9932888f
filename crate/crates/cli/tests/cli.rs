use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gpadapt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpadapt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

const CONFIG: &str = "model.kind = reg-random\nmodel.d = 2\nsim.n = 40\nsampler.iterations = 120\nstudy.n_grid = 16,32\nstudy.replicates = 2\nstudy.bootstrap = 20\nsmallball.paths = 200\nsmallball.grid = 16\n";

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.txt"), CONFIG).unwrap();
    tmp
}

#[test]
fn simulate_fit_summarize_pipeline() {
    let tmp = setup();
    let dir = tmp.path();
    let out = gpadapt(dir, &["simulate", "--config", "c.txt", "--out", "sim"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = fs::read_to_string(dir.join("sim/data.csv")).unwrap();
    assert!(data.starts_with("x1,x2,y\n"));
    assert_eq!(data.lines().count(), 41);

    let out = gpadapt(dir, &["fit", "--config", "c.txt", "--out", "fit", "sim/data.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("fit/chain.jsonl").exists());
    assert!(dir.join("fit/metrics.csv").exists());
    assert!(!dir.join("fit/.lock").exists());

    let out = gpadapt(dir, &["summarize", "--out", "summary", "fit"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("inclusion probabilities"));
    let trace = fs::read_to_string(dir.join("summary/projection_trace.dat")).unwrap();
    assert!(trace.starts_with("# iter frobenius_distance_to_posterior_mean"));
}

#[test]
fn fit_is_reproducible_for_a_seed() {
    let tmp = setup();
    let dir = tmp.path();
    assert!(gpadapt(dir, &["simulate", "--config", "c.txt", "--out", "sim"]).status.success());
    for out in ["a", "b"] {
        let o = gpadapt(dir, &["fit", "--config", "c.txt", "--seed", "11", "--out", out, "sim/data.csv"]);
        assert!(o.status.success());
    }
    let a = fs::read(dir.join("a/chain.jsonl")).unwrap();
    let b = fs::read(dir.join("b/chain.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rate_study_and_smallball_write_reports() {
    let tmp = setup();
    let dir = tmp.path();
    let out = gpadapt(dir, &["--threads", "1", "rate-study", "--config", "c.txt", "--out", "rate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["rate_table.csv", "rate_curve.dat", "summary.txt", "config.txt"] {
        assert!(dir.join("rate").join(f).exists(), "{f}");
    }
    let out = gpadapt(dir, &["smallball", "--config", "c.txt", "--out", "sb"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("sb/smallball.csv").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = setup();
    let dir = tmp.path();
    fs::write(dir.join("bad.txt"), "prior.a1 = 0.5\n").unwrap();
    let out = gpadapt(dir, &["simulate", "--config", "bad.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    fs::write(dir.join("unknown.txt"), "model.colour = red\n").unwrap();
    assert_eq!(gpadapt(dir, &["simulate", "--config", "unknown.txt"]).status.code(), Some(2));
}

#[test]
fn ingestion_errors_exit_with_three() {
    let tmp = setup();
    let dir = tmp.path();
    fs::write(dir.join("bad.csv"), "x1,x2,y\n0.1,0.2,abc\n").unwrap();
    let out = gpadapt(dir, &["fit", "--config", "c.txt", "--out", "f", "bad.csv"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 1") && err.contains("column y"), "{err}");

    fs::write(dir.join("labels.csv"), "x1,x2,y\n0.1,0.2,2\n").unwrap();
    let out = gpadapt(dir, &["fit", "--config", "c.txt", "--model", "classif", "--out", "g", "labels.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn held_lock_blocks_a_second_writer() {
    let tmp = setup();
    let dir = tmp.path();
    fs::create_dir(dir.join("busy")).unwrap();
    fs::write(dir.join("busy/.lock"), "").unwrap();
    let out = gpadapt(dir, &["simulate", "--config", "c.txt", "--out", "busy"]);
    assert!(!out.status.success());
    assert!(!dir.join("busy/data.csv").exists());
}
