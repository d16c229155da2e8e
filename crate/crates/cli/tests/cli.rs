use std::path::Path;
use std::process::Command;

use mambamir_cli::{run_cli, EXIT_DATA, EXIT_USAGE};

fn run(args: &[&str]) -> i32 {
    run_cli(std::iter::once("mambamir").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .flatten()
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

/// `mean` row of an eval report: `(psnr, ssim)`.
fn report_mean(path: &Path) -> (f64, f64) {
    let text = std::fs::read_to_string(path).unwrap();
    let row = text.lines().find(|l| l.starts_with("mean,")).unwrap();
    let f: Vec<f64> = row.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    (f[0], f[1])
}

#[test]
fn phantom_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(run(&["phantom", "--count", "2", "--size", "32", "--seed", "0", "--out", p(out)]), 0);
    }
    let files = read_dir_bytes(&a);
    assert_eq!(files.len(), 2);
    assert_eq!(files, read_dir_bytes(&b));
}

#[test]
fn lossless_mri_simulation_evaluates_to_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let (ph, sim) = (dir.path().join("ph"), dir.path().join("sim"));
    assert_eq!(run(&["phantom", "--count", "2", "--size", "32", "--out", p(&ph)]), 0);
    assert_eq!(run(&["simulate", "mri", "--af", "1", "--sigma", "0", "--in", p(&ph), "--out", p(&sim)]), 0);
    let report = dir.path().join("report.csv");
    assert_eq!(run(&["eval", "--pred", p(&sim.join("xu")), "--ref", p(&sim.join("x")), "--report", p(&report)]), 0);
    let (psnr, ssim) = report_mean(&report);
    assert_eq!(psnr, 100.0);
    assert!((ssim - 1.0).abs() < 1e-9, "{ssim}");
}

#[test]
fn ct_simulation_and_pgm_export() {
    let dir = tempfile::tempdir().unwrap();
    let (ph, sim) = (dir.path().join("ph"), dir.path().join("sim"));
    assert_eq!(run(&["phantom", "--kind", "shepp-logan", "--count", "1", "--size", "32", "--out", p(&ph)]), 0);
    assert_eq!(run(&["simulate", "ct", "--views", "15", "--detectors", "64", "--in", p(&ph), "--out", p(&sim)]), 0);
    let y = mambamir::io::tensor_file::read_tensor(&sim.join("y/phantom_0000.mmir")).unwrap();
    assert_eq!(y.shape(), [15, 64]);
    let img = dir.path().join("xu.pgm");
    assert_eq!(run(&["export-pgm", "--in", p(&sim.join("xu/phantom_0000.mmir")), "--out", p(&img)]), 0);
    let bytes = std::fs::read(&img).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(bytes.len(), 13 + 32 * 32);
}

#[test]
fn desk_pipeline_improves_on_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    assert_eq!(run(&["phantom", "--count", "24", "--size", "32", "--seed", "0", "--out", p(&d("ph"))]), 0);
    assert_eq!(run(&["simulate", "mri", "--af", "8", "--seed", "0", "--in", p(&d("ph")), "--out", p(&d("sim"))]), 0);
    std::fs::write(d("train.cfg"), "modality = mri\nsteps = 200\nlog_every = 50\nseed = 0\n").unwrap();
    assert_eq!(run(&["train", "--config", p(&d("train.cfg")), "--out", p(&d("run")), "--data", p(&d("sim"))]), 0);
    assert!(d("run/metrics.csv").exists());

    assert_eq!(run(&["reconstruct", "--ckpt", p(&d("run")), "--in", p(&d("sim/xu")), "--out", p(&d("rec"))]), 0);
    assert_eq!(run(&["eval", "--pred", p(&d("rec")), "--ref", p(&d("sim/x")), "--report", p(&d("rec.csv"))]), 0);
    assert_eq!(run(&["eval", "--pred", p(&d("sim/xu")), "--ref", p(&d("sim/x")), "--report", p(&d("xu.csv"))]), 0);
    let (rec, xu) = (report_mean(&d("rec.csv")).0, report_mean(&d("xu.csv")).0);
    assert!(rec > xu, "reconstruction {rec} dB vs input {xu} dB");

    // uncertainty maps are reproducible and match the input grid
    let one = d("sim/xu/phantom_0000.mmir");
    for out in ["u1", "u2"] {
        assert_eq!(run(&["uncertainty", "--ckpt", p(&d("run/best")), "--in", p(&one), "--out", p(&d(out)), "--passes", "4", "--seed", "3"]), 0);
    }
    assert_eq!(read_dir_bytes(&d("u1")), read_dir_bytes(&d("u2")));
    let std = mambamir::io::tensor_file::read_tensor(&d("u1/phantom_0000_std.mmir")).unwrap();
    assert_eq!(std.shape(), [32, 32]);
    assert!(std.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.mmir");
    assert_eq!(run(&["phantom", "--bogus"]), EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&["export-pgm", "--in", p(&missing), "--out", p(&dir.path().join("x.pgm"))]), EXIT_USAGE);
    assert_eq!(run(&["train", "--config", p(&dir.path().join("none.cfg")), "--out", p(dir.path())]), EXIT_USAGE);

    let junk = dir.path().join("junk.mmir");
    std::fs::write(&junk, b"not a tensor").unwrap();
    assert_eq!(run(&["export-pgm", "--in", p(&junk), "--out", p(&dir.path().join("x.pgm"))]), EXIT_DATA);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "steps = many\n").unwrap();
    assert_eq!(run(&["train", "--config", p(&cfg), "--out", p(dir.path())]), EXIT_DATA);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn binary_reports_errors_on_stderr() {
    let out = Command::new(env!("CARGO_BIN_EXE_mambamir")).args(["export-pgm", "--in", "/definitely/missing.mmir", "--out", "x.pgm"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.mmir"));
    assert!(out.stdout.is_empty());
}
