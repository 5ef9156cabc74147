use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowprior"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn read(dir: &TempDir, name: &str) -> Vec<u8> {
    std::fs::read(dir.path().join(name)).unwrap()
}

/// Sprites data plus a tiny trained L=3 checkpoint at `model.ck`.
fn fixture(extra: &[&str]) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "gen-data",
        "--kind",
        "sprites",
        "--n",
        "20",
        "--seed",
        "1",
        "--format",
        "pgm",
        "--out",
        &path(&dir, "data"),
    ]);
    let (data, ck) = (path(&dir, "data/train"), path(&dir, "model.ck"));
    let mut args = vec![
        "train",
        "--preset",
        "sprites",
        "--set",
        "steps=1",
        "--set",
        "c_inter=4",
        "--set",
        "channels=1",
        "--set",
        "height=32",
        "--set",
        "width=32",
        "--set",
        "batch_size=2",
        "--set",
        "total_steps=2",
        "--data",
        &data,
        "--out",
        &ck,
    ];
    args.extend_from_slice(extra);
    ok(&args);
    dir
}

#[test]
fn identical_images_report_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "gen-data",
        "--kind",
        "digits",
        "--n",
        "10",
        "--format",
        "pgm",
        "--out",
        &path(&dir, "d"),
    ]);
    let img = path(&dir, "d/train/00000.pgm");
    assert_eq!(ok(&["eval-psnr", &img, &img]).trim(), "99.00");
}

#[test]
fn usage_errors_exit_with_2_and_runtime_errors_with_1() {
    assert_eq!(cli(&["degrade", "--bogus"]).status.code(), Some(2));
    assert_eq!(cli(&[]).status.code(), Some(2));
    let out = cli(&["eval-psnr", "/nonexistent/a.pgm", "/nonexistent/b.pgm"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "gen-data",
        "--kind",
        "sprites",
        "--n",
        "10",
        "--format",
        "pgm",
        "--out",
        &path(&dir, "d"),
    ]);
    let img = path(&dir, "d/train/00000.pgm");
    let out = cli(&[
        "degrade",
        "--in",
        &img,
        "--degrade",
        "blur:3",
        "--out",
        &path(&dir, "o.pgm"),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn degrade_depends_only_on_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "gen-data",
        "--kind",
        "sprites",
        "--n",
        "10",
        "--format",
        "pgm",
        "--out",
        &path(&dir, "d"),
    ]);
    let img = path(&dir, "d/train/00000.pgm");
    for (name, seed) in [("a.pgm", "4"), ("b.pgm", "4"), ("c.pgm", "5")] {
        ok(&[
            "degrade",
            "--in",
            &img,
            "--degrade",
            "gauss:20+dct:30",
            "--seed",
            seed,
            "--out",
            &path(&dir, name),
        ]);
    }
    assert_eq!(read(&dir, "a.pgm"), read(&dir, "b.pgm"));
    assert_ne!(read(&dir, "a.pgm"), read(&dir, "c.pgm"));
}

#[test]
fn default_restore_schedule_is_fifty_per_level() {
    let dir = fixture(&[]);
    let img = path(&dir, "data/test/00000.pgm");
    ok(&[
        "degrade",
        "--in",
        &img,
        "--degrade",
        "gauss:30",
        "--seed",
        "2",
        "--out",
        &path(&dir, "noisy.pgm"),
    ]);
    ok(&[
        "restore",
        "--ckpt",
        &path(&dir, "model.ck"),
        "--in",
        &path(&dir, "noisy.pgm"),
        "--out",
        &path(&dir, "out.pgm"),
        "--trace",
        &path(&dir, "trace.csv"),
    ]);
    let trace = String::from_utf8(read(&dir, "trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("# schedule=50,50,50+150 lambda=99 eta=1"));
    assert_eq!(lines.next(), Some("step,stage,objective,data_term,neg_log_prior"));
    let last = lines.last().unwrap();
    assert!(last.starts_with("300,3,"), "{last}");
    let psnr: f64 = ok(&["eval-psnr", &img, &path(&dir, "out.pgm")]).trim().parse().unwrap();
    assert!(psnr.is_finite());
}

#[test]
fn larger_images_are_restored_in_tiles() {
    let dir = fixture(&[]);
    let big = dir.path().join("big.pgm");
    let mut bytes = b"P5\n50 40\n255\n".to_vec();
    bytes.extend((0..2000).map(|i| ((i * 7) % 256) as u8));
    std::fs::write(&big, bytes).unwrap();
    ok(&[
        "restore",
        "--ckpt",
        &path(&dir, "model.ck"),
        "--in",
        big.to_str().unwrap(),
        "--schedule",
        "1,1,1+1",
        "--out",
        &path(&dir, "out.pgm"),
        "--trace",
        &path(&dir, "trace.csv"),
    ]);
    let out = read(&dir, "out.pgm");
    assert!(out.starts_with(b"P5\n50 40\n255\n"));
    let trace = String::from_utf8(read(&dir, "trace.csv")).unwrap();
    assert!(trace.lines().any(|l| l.starts_with("tile")));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = fixture(&["--set", "total_steps=4"]);
    let data = path(&dir, "data/train");
    let common = [
        "--preset",
        "sprites",
        "--set",
        "steps=1",
        "--set",
        "c_inter=4",
        "--set",
        "channels=1",
        "--set",
        "height=32",
        "--set",
        "width=32",
        "--set",
        "batch_size=2",
        "--data",
        &data,
    ];
    let (half_ck, resumed_ck, resume) = (path(&dir, "half.ck"), path(&dir, "resumed.ck"), path(&dir, "half.ck"));
    let mut half = vec!["train"];
    half.extend_from_slice(&common);
    half.extend_from_slice(&["--set", "total_steps=2", "--out", &half_ck]);
    ok(&half);
    let mut rest = vec!["train"];
    rest.extend_from_slice(&common);
    rest.extend_from_slice(&["--set", "total_steps=4", "--resume", &resume, "--out", &resumed_ck]);
    ok(&rest);
    assert_eq!(read(&dir, "model.ck"), read(&dir, "resumed.ck"));
}

#[test]
fn samples_are_written_side_by_side() {
    let dir = fixture(&[]);
    ok(&[
        "sample",
        "--ckpt",
        &path(&dir, "model.ck"),
        "--n",
        "3",
        "--seed",
        "1",
        "--temperature",
        "0.7",
        "--out",
        &path(&dir, "s.pgm"),
    ]);
    assert!(read(&dir, "s.pgm").starts_with(b"P5\n96 32\n255\n"));
}

#[test]
fn sanity_checks_pass() {
    let out = ok(&["sanity"]);
    assert!(out.lines().count() >= 6);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
    assert!(Path::new(env!("CARGO_BIN_EXE_flowprior")).exists());
}
