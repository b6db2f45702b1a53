use std::path::Path;
use std::process::{Command, Output};

use optikonv::harness::write_synthetic_cifar10;
use optikonv::optics::{read_psf, read_psf_meta, sparse_spot_target, write_psf, Gray16, PhaseMask};

fn optikonv(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optikonv"))
        .args(args)
        .current_dir(dir)
        .env_remove("OPTIKONV_DATA")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = optikonv(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for cmd in ["train", "eval", "macs", "compile-psf", "retrieve-phase", "simulate", "export-dose", "report"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(optikonv(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(optikonv(&["macs", "--arch", "lenet"], dir.path()).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.cfg"), "epochs = 3\nbogus = 1\n").unwrap();
    let o = optikonv(&["macs", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    let o = optikonv(&["train", "--out-dir", "r"], dir.path());
    assert_eq!(o.status.code(), Some(1), "missing data dir");
}

#[test]
fn macs_prints_total_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = optikonv(&["macs", "--arch", "vgg13", "--variant", "electronic"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    let total: f64 = text.lines().next().unwrap().trim().parse().unwrap();
    assert!((total - 228.5).abs() < 1.0, "{total}");
    assert!(text.contains("stage1.conv1"));
    let o = optikonv(&["macs", "--arch", "vgg13", "--variant", "codesign"], dir.path());
    assert!(stdout(&o).contains("reduction vs electronic"));
}

#[test]
fn train_eval_compile_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_synthetic_cifar10(&data, 32, 16, 5).unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        format!(
            "data_dir = {}\nwidth_div = 8\noptical.channels = 4\nbatch_size = 16\nlr0 = 0.05\naugment = false\nthreads = 1\n",
            data.display()
        ),
    )
    .unwrap();
    let common = ["--config", "run.cfg", "--variant", "codesign", "--epochs", "2", "--out-dir", "out"];
    let o = optikonv(&[&["train"][..], &common].concat(), dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let report = std::fs::read_to_string(out.join("report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 2);
    assert!(out.join("checkpoints/epoch_1.tnsr").exists());
    let meta = read_psf_meta(out.join("psf.pgm")).unwrap();
    assert!((meta.sum - 1.0).abs() < 1e-6);

    let o = optikonv(&[&["eval", "--ckpt", "out/model.tnsr"][..], &common].concat(), dir.path());
    assert!(o.status.success());
    let top1: f64 = stdout(&o).trim().strip_prefix("top1 ").unwrap().parse().unwrap();
    assert!((0.0..=100.0).contains(&top1));

    let o = optikonv(
        &[&["compile-psf", "--ckpt", "out/model.tnsr"][..], &common[..4], &["--out-dir", "psf"]].concat(),
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = read_psf(out.join("psf.pgm")).unwrap();
    let b = read_psf(dir.path().join("psf/psf.pgm")).unwrap();
    assert_eq!(a, b);
    assert!(dir.path().join("psf/optics.tnsr").exists());
}

#[test]
fn retrieve_simulate_and_dose() {
    let dir = tempfile::tempdir().unwrap();
    let target = sparse_spot_target(64, 8, 1.5, 16, 3).unwrap();
    write_psf(&target, dir.path().join("target.pgm")).unwrap();
    let o = optikonv(
        &[
            "retrieve-phase", "--target", "target.pgm", "--iters", "40", "--method", "sgd", "--distance", "12e-3",
            "--aperture", "32", "--out-dir", "ret",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("ret/loss_history.csv")).unwrap();
    let losses: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 40);
    assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    let mask = PhaseMask::load(dir.path().join("ret/mask.tnsr")).unwrap();
    assert_eq!(mask.size(), 64);

    let o = optikonv(&["export-dose", "--mask", "ret/mask.tnsr", "--levels", "8", "--out-dir", "fab"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dose = Gray16::read(dir.path().join("fab/dose.pgm")).unwrap();
    let mut distinct = dose.pixels.clone();
    distinct.sort();
    distinct.dedup();
    assert!(distinct.len() <= 8);

    let img = Gray16 {
        width: 20,
        height: 20,
        pixels: (0..400).map(|i| ((i * 37) % 65536) as u16).collect(),
    };
    img.write(dir.path().join("in.pgm")).unwrap();
    let o = optikonv(&["simulate", "--input", "in.pgm", "--psf", "target.pgm", "--out-dir", "sim"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sensor = Gray16::read(dir.path().join("sim/sensor.pgm")).unwrap();
    assert_eq!((sensor.height, sensor.width), (20 + 63, 20 + 63));
    let o = optikonv(
        &["simulate", "--input", "in.pgm", "--mask", "ret/mask.tnsr", "--noise", "0.01", "--out-dir", "sim2"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(optikonv(&["simulate", "--input", "in.pgm"], dir.path()).status.code(), Some(1));
}

#[test]
fn report_summarizes_existing_file() {
    let dir = tempfile::tempdir().unwrap();
    let line = r#"{"step":"baseline","arch":"vgg13","variant":"electronic","epoch":null,"loss":null,"top1":91.5,"macs":228.5,"reduction":0.0}"#;
    std::fs::write(dir.path().join("report.jsonl"), format!("{line}\n")).unwrap();
    let o = optikonv(&["report", "--input", "report.jsonl"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("baseline"));
}
