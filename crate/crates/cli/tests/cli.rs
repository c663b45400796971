use std::path::Path;
use std::process::{Command, Output};

use snapddm_cli::export::field_from_csv;
use snapddm_cli::manifest::Manifest;
use snapddm_core::io::save_cf2d;
use snapddm_core::{c64, ComplexField2D};

fn snapddm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snapddm")).args(args).current_dir(dir).env("SNAPDDM_THREADS", "1").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let help = snapddm(d, &["--help"]);
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("solve-ddm"));
    assert_eq!(code(&snapddm(d, &["frobnicate"])), 2);
    assert_eq!(code(&snapddm(d, &["solve-ddm", "--no-such-flag", "1"])), 2);
    assert_eq!(code(&snapddm(d, &["solve-ddm", "--n", "abc", "--out", "x.cf2d"])), 2);
    assert_eq!(code(&snapddm(d, &["solve-fdfd"])), 2);
    assert_eq!(code(&snapddm(d, &[])), 2);
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_snapddm"))
        .args(["solve-fdfd", "--out", "f.cf2d"])
        .current_dir(d)
        .env("SNAPDDM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&bad_threads), 2);
}

#[test]
fn operation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = snapddm(dir.path(), &["solve-ddm", "--n", "320", "--out", "f.cf2d"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("304"));
    assert_eq!(code(&snapddm(dir.path(), &["export", "--input", "missing.cf2d", "--out", "x.csv"])), 1);
}

#[test]
fn solve_ddm_is_reproducible_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "max-iters = 6\nindex = 2.48 # overridden below\n").unwrap();
    let o = snapddm(d, &["--config", "run.cfg", "solve-ddm", "--index", "1.5", "--out", "f.cf2d", "--trace", "t.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = Manifest::load(d.join("f.cf2d.manifest.json")).unwrap();
    assert_eq!(m.config["index"], "1.5");
    assert_eq!(m.config["max-iters"], "6");
    assert_eq!(m.threads, 1);
    assert_eq!(m.outputs.len(), 2);
    assert_eq!(m.results["iterations"], 6);
    let r = snapddm(d, &["--manifest", "f.cf2d.manifest.json", "replay", "--out-dir", "again"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(std::fs::read(d.join("f.cf2d")).unwrap(), std::fs::read(d.join("again/out-f.cf2d")).unwrap());
    // A tampered output no longer matches.
    let mut tampered = m.clone();
    tampered.outputs[0].sha256 = "0".repeat(64);
    tampered.save(d.join("bad.json")).unwrap();
    assert_eq!(code(&snapddm(d, &["--manifest", "bad.json", "replay"])), 1);
}

#[test]
fn export_formats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    save_cf2d(d.join("zero.cf2d"), &ComplexField2D::zeros(3, 2)).unwrap();
    assert_eq!(code(&snapddm(d, &["export", "--input", "zero.cf2d", "--format", "csv", "--out", "z.csv"])), 0);
    let csv = std::fs::read_to_string(d.join("z.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0,0")));

    let h = ComplexField2D::from_fn(5, 4, |x, y| c64::new(x as f64 * 0.1 - 0.3, 1.0 / (1.0 + y as f64)));
    save_cf2d(d.join("h.cf2d"), &h).unwrap();
    assert_eq!(code(&snapddm(d, &["export", "--input", "h.cf2d", "--out", "h.csv"])), 0);
    let text = std::fs::read_to_string(d.join("h.csv")).unwrap();
    let back = field_from_csv(&text).unwrap();
    assert_eq!(back, h);
    save_cf2d(d.join("back.cf2d"), &back).unwrap();
    assert_eq!(code(&snapddm(d, &["export", "--input", "back.cf2d", "--out", "back.csv"])), 0);
    assert_eq!(std::fs::read(d.join("back.csv")).unwrap(), text.as_bytes());

    let c = ComplexField2D::from_fn(3, 3, |_, _| c64::new(0.0, 2.0));
    save_cf2d(d.join("c.cf2d"), &c).unwrap();
    assert_eq!(code(&snapddm(d, &["export", "--input", "c.cf2d", "--format", "pgm16", "--out", "c.pgm"])), 0);
    let img = std::fs::read(d.join("c.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n# max_abs 2e0\n3 3\n65535\n"));
    assert!(img[img.len() - 18..].iter().all(|&b| b == 0xff));

    assert_eq!(code(&snapddm(d, &["export", "--input", "c.cf2d", "--format", "png", "--out", "c.png"])), 2);
}
