use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ccib(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccib")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const CONFIG: &str = r#"
[experiment]
dataset = "synthetic"
ood_datasets = ["synthetic_ood"]
latent_dim = 4
seed = 1
output_dir = "run"

[channel]
psnr_db = 20.0

[train]
batch_size = 50
epochs = 2
autoencoder_epochs = 1
"#;

#[test]
fn train_eval_detect_sweep_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("cfg.toml"), CONFIG).unwrap();

    let out = stdout(&ccib(&["train", "cfg.toml"], dir));
    assert!(out.contains("epoch=2"), "{out}");
    assert!(dir.join("run/model.ckpt").exists());
    assert!(dir.join("run/config.toml").exists());

    let out = stdout(&ccib(&["eval", "cfg.toml", "run/model.ckpt"], dir));
    assert!(out.starts_with("objective,seed,config_hash,latent_dim,psnr_db,ood_dataset,"), "{out}");
    assert!(dir.join("run/eval/scores.csv").exists());

    // An 8x8 grayscale image: bright top-left quadrant.
    let img = image::GrayImage::from_fn(8, 8, |x, y| image::Luma([if x < 4 && y < 4 { 255 } else { 0 }]));
    img.save(dir.join("x.png")).unwrap();
    let out = stdout(&ccib(&["detect", "run/model.ckpt", "x.png"], dir));
    assert!(out.starts_with("decision=id ") || out.starts_with("decision=ood "), "{out}");
    assert!(out.contains("class="));
    let again = stdout(&ccib(&["detect", "run/model.ckpt", "x.png"], dir));
    assert_eq!(out, again);
    stdout(&ccib(&["detect", "run/model.ckpt", "x.png", "--config", "cfg.toml", "--psnr", "5"], dir));

    let out = stdout(&ccib(&["sweep", "cfg.toml", "--axis", "test_psnr", "--values", "10,20"], dir));
    assert!(out.contains("2 points"), "{out}");
    let out = stdout(&ccib(&["plot", "run/sweep_test_psnr.csv", "run/eval/roc_synthetic_ood.csv"], dir));
    assert_eq!(out.lines().count(), 2);
    assert!(dir.join("run/sweep_test_psnr.svg").exists());
    assert!(dir.join("run/eval/roc_synthetic_ood.svg").exists());
}

#[test]
fn verify_bound_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stdout(&ccib(&["verify-bound", "--trials", "3", "--samples", "10000", "--out", "b.csv"], tmp.path()));
    assert!(out.contains("violations=0"), "{out}");
    let csv = fs::read_to_string(tmp.path().join("b.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn failures_exit_nonzero_with_a_json_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = ccib(&["train", "missing.toml"], dir);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"]["kind"], "config");

    fs::write(dir.join("empty.csv"), "").unwrap();
    let o = ccib(&["plot", "empty.csv"], dir);
    assert!(!o.status.success());
    assert!(!dir.join("empty.svg").exists());

    fs::write(dir.join("junk.ckpt"), b"nope").unwrap();
    fs::write(dir.join("x.png"), b"nope").unwrap();
    let o = ccib(&["detect", "junk.ckpt", "x.png"], dir);
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "checkpoint");

    let o = ccib(&["fetch", "imagenet21k"], dir);
    assert!(!o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "dataset");
}
