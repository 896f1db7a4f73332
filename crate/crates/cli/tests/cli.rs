use std::path::Path;
use std::process::{Command, Output};

use candle_core::{DType, Device, Tensor};
use pocketsr::checkpoint::{self, Manifest};
use pocketsr::lite_ed::image_io::{load_png, save_png};
use pocketsr::nn::Init;
use pocketsr::pruning::PruningPlan;
use pocketsr::{ModelConfig, PocketSr};

fn pocketsr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pocketsr"))
        .args(args)
        .current_dir(cwd)
        .env_remove("POCKETSR_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_checkpoint(dir: &Path) {
    let mut init = Init::new(3, &Device::Cpu, DType::F32);
    let model = PocketSr::new(&ModelConfig::toy(), &mut init).unwrap();
    let manifest = Manifest::new(&model, 1, 0, &PruningPlan::empty(), None).unwrap();
    checkpoint::save(dir, &model, &[], &manifest).unwrap();
}

#[test]
fn infer_upscales_four_times() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("ckpt");
    toy_checkpoint(&ckpt);
    let input = tmp.path().join("lr.png");
    let mut init = Init::new(1, &Device::Cpu, DType::F32);
    let lr = init.uniform(&[1, 3, 128, 128], 1.0).unwrap();
    save_png(&lr, &input).unwrap();
    let output = tmp.path().join("sr.png");
    let o = pocketsr(
        &[
            "infer",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--output",
            output.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{:?}: {}", o.status, stderr(&o));
    let sr: Tensor = load_png(&output, &Device::Cpu).unwrap();
    assert_eq!(sr.dims(), &[1, 3, 512, 512]);
    assert!(tmp.path().join("config.toml").exists());
}

#[test]
fn stage2_without_teacher_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pocketsr(&["train-stage2", "--synthetic", "2", "--out", "run"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("teacher"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nbatch_sise = 3\n").unwrap();
    let o = pocketsr(&["profile", "--config", cfg.to_str().unwrap(), "--out", "p"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("batch_sise"), "{}", stderr(&o));

    let o = pocketsr(&["profile", "--set", "prune.chanel_ratio=0.5", "--out", "p"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("chanel_ratio"), "{}", stderr(&o));
}

#[test]
fn export_refuses_unpruned_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("ckpt");
    toy_checkpoint(&ckpt);
    let dst = tmp.path().join("bundle");
    let args = ["export", "--checkpoint", ckpt.to_str().unwrap(), "--output", dst.to_str().unwrap()];
    let o = pocketsr(&args, tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--allow-unpruned"), "{}", stderr(&o));

    let mut allowed = args.to_vec();
    allowed.push("--allow-unpruned");
    let o = pocketsr(&allowed, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dst.join("manifest.toml").exists());
}

#[test]
fn profile_prints_table_and_writes_records() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pocketsr(
        &[
            "profile",
            "--preset",
            "full_scale",
            "--out",
            "p",
            "--csv",
            "p/report.csv",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    for name in ["encoder", "unet", "decoder", "total", "red.%"] {
        assert!(table.contains(name), "{table}");
    }
    let jsonl = std::fs::read_to_string(tmp.path().join("p/profile.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines[0].get("config").is_some() && lines[0].get("seed").is_some());
    assert!(lines.len() > 1);
    assert!(std::fs::read_to_string(tmp.path().join("p/report.csv")).unwrap().contains("unet"));
}

#[test]
fn seed_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pocketsr"))
        .args(["profile", "--out", "p", "--input-size", "64"])
        .current_dir(tmp.path())
        .env("POCKETSR_SEED", "42")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = std::fs::read_to_string(tmp.path().join("p/config.toml")).unwrap();
    assert!(cfg.contains("seed = 42"), "{cfg}");
}
