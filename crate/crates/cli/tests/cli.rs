use std::path::Path;
use std::process::{Command, Output};

fn dclimba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dclimba"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, grid: &str, years: &str) {
    let o = dclimba(&[
        "synth",
        "--out",
        p(dir),
        "--grid",
        grid,
        "--years",
        years,
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "8x8", "10");
    for f in [
        "ref.grd",
        "gcm.grd",
        "attrs/elevation.grd",
        "attrs/landcover.grd",
    ] {
        assert!(d.join(f).exists(), "missing {f}");
    }
    let ckpt = d.join("m.dckp");
    let o = dclimba(&[
        "train",
        "--ref",
        p(&d.join("ref.grd")),
        "--gcm",
        p(&d.join("gcm.grd")),
        "--attrs",
        p(&d.join("attrs")),
        "--out",
        p(&ckpt),
        "--epochs",
        "2",
        "--steps-per-epoch",
        "2",
        "--train-window",
        "0..2555",
        "--val-window",
        "2555..2920",
        "--seed",
        "11",
        "--loss-csv",
        p(&d.join("loss.csv")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("train config:") && stdout.contains("seed: 11"));
    let csv = std::fs::read_to_string(d.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let corrected = d.join("corr.grd");
    let o = dclimba(&[
        "correct",
        "--ckpt",
        p(&ckpt),
        "--gcm",
        p(&d.join("gcm.grd")),
        "--out",
        p(&corrected),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let report = d.join("report.json");
    let o = dclimba(&[
        "evaluate",
        "--ref",
        p(&d.join("ref.grd")),
        "--sim",
        p(&corrected),
        "--fd",
        "--trend",
        "--raw",
        p(&d.join("gcm.grd")),
        "--out",
        p(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = dclimba(&[
        "report",
        "--in",
        p(&report),
        "--format",
        "csv",
        "--table",
        "quantiles",
    ]);
    assert!(o.status.success());
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("series,q,q5,value"));
    let o = dclimba(&["report", "--in", p(&report), "--format", "text"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("Rx1day"));
}

#[test]
fn baselines_run_and_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "4x4", "2");
    let run = |method: &str, mode: &str, out: &str| {
        let o = dclimba(&[
            "baseline",
            "--method",
            method,
            "--mode",
            mode,
            "--ref",
            p(&d.join("ref.grd")),
            "--gcm-hist",
            p(&d.join("gcm.grd")),
            "--gcm-apply",
            p(&d.join("gcm.grd")),
            "--out",
            p(&d.join(out)),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(d.join(out)).unwrap()
    };
    for m in ["qm", "ecdfm", "qdm"] {
        for mode in ["mult", "add"] {
            let a = run(m, mode, "a.grd");
            let b = run(m, mode, "b.grd");
            assert_eq!(a, b, "{m} {mode} not reproducible");
        }
    }
}

#[test]
fn synth_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), "4x4", "1");
    synth(b.path(), "4x4", "1");
    for f in ["ref.grd", "gcm.grd", "attrs/aspect.grd"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
}

#[test]
fn overlapping_windows_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "4x4", "2");
    let o = dclimba(&[
        "train",
        "--ref",
        p(&d.join("ref.grd")),
        "--gcm",
        p(&d.join("gcm.grd")),
        "--attrs",
        p(&d.join("attrs")),
        "--out",
        p(&d.join("m.dckp")),
        "--train-window",
        "0..400",
        "--val-window",
        "300..730",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!d.join("m.dckp").exists());
}

#[test]
fn mismatched_grids_are_data_errors() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), "4x4", "1");
    synth(b.path(), "4x5", "1");
    let o = dclimba(&[
        "evaluate",
        "--ref",
        p(&a.path().join("ref.grd")),
        "--sim",
        p(&b.path().join("gcm.grd")),
        "--out",
        p(&a.path().join("r.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_invocations() {
    assert_eq!(
        dclimba(&["synth", "--out", "x", "--bogus"]).status.code(),
        Some(1)
    );
    assert_eq!(dclimba(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        dclimba(&["report", "--in", "/nonexistent/r.json"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(dclimba(&["--help"]).status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_dclimba"))
        .args(["report", "--in", "/nonexistent/r.json"])
        .env("DCLIMBA_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
