use std::fs;
use std::path::Path;
use std::process::Command;

use ucyclemlp::cli::{self, quick_config, RunConfig};

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut full = vec!["ucyclemlp"];
    full.extend_from_slice(args);
    let code = cli::run(full, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn binary(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ucyclemlp")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, cfg.to_text()).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (code, msg) = run(&["synth", "--n", "6", "--size", "32", "--classes", "4", "--seed", "2", "--out", s(&data)]);
    assert_eq!(code, 0, "{msg}");
    assert!(data.join("images/synth00000.ppm").is_file());
    assert!(data.join("train.txt").is_file());

    let mut cfg = quick_config(32, 2);
    cfg.model.num_classes = 4;
    let cfg_path = write_config(dir.path(), &cfg);
    let ckpt = dir.path().join("m.ckpt");
    let (code, log) = run(&["train", "--config", &cfg_path, "--data", s(&data), "--out", s(&ckpt), "--seed", "3"]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3, "{log}");
    assert!(lines[0].starts_with("epoch 1 loss ") && lines[0].ends_with("saved 1"), "{log}");
    assert!(ckpt.is_file());

    let csv = dir.path().join("m.csv");
    let (code, table) = run(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--csv", s(&csv)]);
    assert_eq!(code, 0);
    assert!(table.starts_with("class"), "{table}");
    let csv = fs::read_to_string(csv).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "class,dsc,f1,iou");
    assert_eq!(rows.len(), 5);
    assert!(rows[4].starts_with("mean,"));

    let mask = dir.path().join("p.pgm");
    let image = data.join("images/synth00001.ppm");
    let (code, _) = run(&["predict", "--ckpt", s(&ckpt), "--image", s(&image), "--out", s(&mask)]);
    assert_eq!(code, 0);
    let bytes = fs::read(&mask).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    assert!(bytes[13..].iter().all(|b| [0, 85, 170, 255].contains(b)));
}

#[test]
fn identical_seeds_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &quick_config(32, 2));
    let train = |seed: &str, name: &str| {
        let ckpt = dir.path().join(name);
        let (code, log) = run(&["train", "--config", &cfg_path, "--synth", "4", "--seed", seed, "--out", s(&ckpt)]);
        assert_eq!(code, 0);
        (log.replace(s(&ckpt), "CKPT"), fs::read(ckpt).unwrap())
    };
    let a = train("7", "a.ckpt");
    let b = train("7", "b.ckpt");
    let c = train("8", "c.ckpt");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let (code, err) = binary(&["train", "--data", s(&missing), "--epochs", "1"]);
    assert_eq!(code, 2);
    assert!(err.contains("does not exist"), "{err}");

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "colour=red\n").unwrap();
    let (code, err) = binary(&["info", "--config", s(&bad)]);
    assert_eq!(code, 2);
    assert!(err.contains("colour"), "{err}");

    assert_eq!(binary(&["frobnicate"]).0, 2);
    assert_eq!(binary(&["bench", "--sizes", "32"]).0, 2);

    let ckpt = dir.path().join("missing.ckpt");
    let (code, err) = binary(&["predict", "--ckpt", s(&ckpt), "--image", s(&ckpt)]);
    assert_eq!(code, 3);
    assert!(err.contains("missing.ckpt"), "{err}");

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let (code, _) = binary(&["eval", "--ckpt", s(&junk), "--data", s(dir.path())]);
    assert_eq!(code, 3);
}

#[test]
fn gradcheck_block_passes() {
    let (code, out) = run(&["gradcheck", "--level", "block"]);
    assert_eq!(code, 0, "{out}");
    for name in ["pawe", "weight_excitation", "cycle_fc", "ccm", "hybrid_ce_dice", "bce_focal"] {
        assert!(out.contains(name), "{name} missing from\n{out}");
    }
}

#[test]
fn info_reports_default_model() {
    let (code, out) = run(&["info"]);
    assert_eq!(code, 0);
    assert!(out.contains("parameters          29495496"), "{out}");
    assert!(out.contains("position attention"));
    let ladder: Vec<&str> = out.lines().skip_while(|l| !l.starts_with("stage")).skip(1).collect();
    assert_eq!(ladder.len(), 6);
    assert_eq!(ladder[5].split_whitespace().collect::<Vec<_>>(), ["5", "1024", "7", "7"]);
}

#[test]
fn bench_reports_constant_flops_per_pixel() {
    let (code, out) = run(&["bench", "--op", "cyclefc", "--sizes", "8,16", "--channels", "4", "--reps", "1"]);
    assert_eq!(code, 0);
    let per_px: Vec<&str> = out.lines().skip(1).take(2).map(|l| l.split_whitespace().nth(2).unwrap()).collect();
    assert_eq!(per_px, ["32", "32"]);
    assert!(out.contains("slope"));
}
