//! The `aelpn` binary: subcommands, outputs and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use aelpn::checkpoint::Checkpoint;
use aelpn::data::{self, RawTensor};

fn aelpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aelpn"))
        .args(args)
        .env("AELPN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_small_splitnormal(out: &Path, report: &Path) -> Output {
    aelpn(&[
        "train-splitnormal",
        "--variant",
        "scale",
        "--steps",
        "20",
        "--batch-size",
        "64",
        "--seed",
        "3",
        "--out",
        path_str(out),
        "--report",
        path_str(report),
    ])
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&aelpn(&[])), 1);
    assert_eq!(code(&aelpn(&["no-such-command"])), 1);
    assert_eq!(code(&aelpn(&["train-splitnormal", "--variant", "hexagonal"])), 1);
    // exactly one of --data and --synthetic
    assert_eq!(code(&aelpn(&["train-denoiser", "--variant", "ae"])), 1);
    assert_eq!(code(&aelpn(&["--help"])), 0);
}

#[test]
fn split_normal_training_writes_checkpoint_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("sn.ckpt");
    let report = dir.path().join("sn.csv");
    let o = train_small_splitnormal(&ckpt, &report);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(ck.seed, 3);
    assert_eq!(ck.train.unwrap().pretrain_steps, 20);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.lines().any(|l| l == "experiment,model,param_name,param,metric,value"));
    assert!(csv.contains(",learned_prox,") && csv.contains(",oracle_prox,"));

    // same seed, more threads: identical checkpoint
    let again = dir.path().join("again.ckpt");
    let o = Command::new(env!("CARGO_BIN_EXE_aelpn"))
        .args(["train-splitnormal", "--variant", "scale", "--steps", "20", "--batch-size", "64", "--seed", "3"])
        .args(["--out", path_str(&again), "--report", path_str(&dir.path().join("r2.csv"))])
        .env("AELPN_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn invert_reports_the_regularizer_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("sn.ckpt");
    assert_eq!(code(&train_small_splitnormal(&ckpt, &dir.path().join("r.csv"))), 0);
    let o = aelpn(&["invert", path_str(&ckpt), "--grid", "-1:1:0.5", "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = v["rows"].as_array().unwrap();
    let regs: Vec<f64> = rows
        .iter()
        .filter(|r| r["metric"] == "regularizer")
        .map(|r| r["value"].as_f64().unwrap())
        .collect();
    assert_eq!(regs.len(), 5);
    assert!(regs.iter().all(|r| r.is_finite()));

    assert_eq!(code(&aelpn(&["invert", path_str(&ckpt), "--grid", "1:0:0.5"])), 1);
    assert_eq!(code(&aelpn(&["invert", path_str(&ckpt)])), 1);
    let t = dir.path().join("pts.aelp");
    data::write_raw_tensor(&t, &RawTensor::new(vec![3, 1], vec![-0.5, 0.0, 0.5]).unwrap()).unwrap();
    let o = aelpn(&["invert", path_str(&ckpt), "--signals", path_str(&t)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn denoiser_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ae.ckpt");
    let o = aelpn(&[
        "train-denoiser",
        "--variant",
        "ae",
        "--synthetic",
        "--steps",
        "3",
        "--out",
        path_str(&ckpt),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = aelpn(&["eval-noise-sweep", path_str(&ckpt), "--synthetic", "--patches", "5", "--sigmas", "0.1,0.4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("noise_sweep,ae,")).count(), 2);
    assert!(csv.lines().any(|l| l.starts_with("noise_sweep,identity,")));

    let out = dir.path().join("affine.csv");
    let o = aelpn(&["eval-affine", path_str(&ckpt), "--synthetic", "--patches", "4", "--alphas", "0.3", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let psnr: f64 = csv
        .lines()
        .find(|l| l.starts_with("affine_eval,ae,"))
        .and_then(|l| l.rsplit(',').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(psnr >= 100.0, "{psnr}");

    let o = aelpn(&["audit", path_str(&ckpt), "--pairs", "50", "--points", "2", "--inputs", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("affine_equivariance"));
}

#[test]
fn file_problems_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&aelpn(&["audit", path_str(&dir.path().join("missing.ckpt"))])), 3);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"aelpn-checkpoint\nformat_version=1\n").unwrap();
    assert_eq!(code(&aelpn(&["audit", path_str(&junk)])), 3);
    let bad_img = dir.path().join("imgs");
    std::fs::create_dir(&bad_img).unwrap();
    std::fs::write(bad_img.join("x.pgm"), b"P5\n4 4\n65535\n").unwrap();
    let o = aelpn(&["train-denoiser", "--variant", "lpn", "--steps", "1", "--data", path_str(&bad_img)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = aelpn(&[
        "train-splitnormal",
        "--variant",
        "lpn",
        "--steps",
        "5",
        "--lr",
        "1e300",
        "--out",
        path_str(&dir.path().join("x.ckpt")),
        "--report",
        path_str(&dir.path().join("x.csv")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
