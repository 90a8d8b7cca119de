use std::fs;
use std::path::Path;

use ccib::harness::checkpoint::Checkpoint;
use ccib::harness::config::ExperimentConfig;
use ccib::harness::eval::{eval_run, EvalData};
use ccib::harness::train::{read_metrics, train_run};

fn config(dir: &Path, objective: &str, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
[experiment]
dataset = "synthetic"
ood_datasets = ["synthetic_ood"]
latent_dim = 4
seed = 3
output_dir = "{}"

[channel]
psnr_db = 20.0

[train]
objective = "{objective}"
batch_size = 50
epochs = 2
autoencoder_epochs = 1
{extra}
"#,
        dir.display()
    );
    ExperimentConfig::parse(&text).unwrap()
}

#[test]
fn training_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train_run(&config(&tmp.path().join("a"), "ccib", "")).unwrap();
    let b = train_run(&config(&tmp.path().join("b"), "ccib", "")).unwrap();
    assert_eq!(a.rows.len(), 2);
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.loss, y.loss);
        assert_eq!(x.bank_epoch_tag, x.epoch as u32);
    }
    assert_eq!(fs::read(&a.checkpoint).unwrap(), fs::read(&b.checkpoint).unwrap());
    assert_eq!(read_metrics(&a.metrics).unwrap(), a.rows);
    assert_eq!(a.bank_snapshots.len(), 2);
    let ckpt = Checkpoint::load(&a.checkpoint).unwrap();
    assert_eq!(ckpt.meta.epochs_completed, 2);
    assert_eq!(ckpt.bank, a.bank);
    assert!(ckpt.meta.lambda_threshold.unwrap().is_finite());
}

#[test]
fn eval_writes_metrics_and_curves() {
    let tmp = tempfile::tempdir().unwrap();
    for objective in ["ccib", "vib", "deepjscc"] {
        let cfg = config(&tmp.path().join(objective), objective, "");
        let run = train_run(&cfg).unwrap();
        let m = eval_run(&cfg, &run.checkpoint).unwrap();
        assert_eq!(m.ood.len(), 1);
        let r = &m.ood[0];
        assert!((0.0..=1.0).contains(&r.auroc), "{objective}: {}", r.auroc);
        assert!((0.0..=1.0).contains(&m.accuracy));
        let eval_dir = cfg.output_dir().join("eval");
        let roc = fs::read_to_string(eval_dir.join("roc_synthetic_ood.csv")).unwrap();
        assert!(roc.starts_with("false_positive_rate,true_positive_rate,threshold"));
        assert!(eval_dir.join("eval.csv").exists());
        let scores = if objective == "ccib" { "scores.csv" } else { "odin_scores.csv" };
        assert!(eval_dir.join(scores).exists(), "{objective}");
    }
}

#[test]
fn eval_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "ccib", "");
    let run = train_run(&cfg).unwrap();
    let data = EvalData::load(&cfg).unwrap();
    let a = ccib::harness::eval::eval_with(&cfg, &run.checkpoint, &data, &cfg.channel, &tmp.path().join("e1")).unwrap();
    let b = ccib::harness::eval::eval_with(&cfg, &run.checkpoint, &data, &cfg.channel, &tmp.path().join("e2")).unwrap();
    assert_eq!(a.ood, b.ood);
    assert_eq!(
        fs::read(tmp.path().join("e1/scores.csv")).unwrap(),
        fs::read(tmp.path().join("e2/scores.csv")).unwrap()
    );
}

#[test]
fn mismatched_latent_dim_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "vib", "");
    let run = train_run(&cfg).unwrap();
    let mut other = cfg.clone();
    other.experiment.latent_dim = 8;
    assert!(eval_run(&other, &run.checkpoint).is_err());
}

#[test]
fn vib_and_ccib_agree_against_a_standard_prior() {
    // First epoch of ccib reads the N(0, I) bank; without the triplet term it
    // optimizes exactly the vib objective.
    let tmp = tempfile::tempdir().unwrap();
    let extra = "triplet_weight = 0.0\n";
    let mut c = config(&tmp.path().join("ccib"), "ccib", extra);
    c.train.epochs = 1;
    let mut v = config(&tmp.path().join("vib"), "vib", extra);
    v.train.epochs = 1;
    let a = train_run(&c).unwrap();
    let b = train_run(&v).unwrap();
    let (ra, rb) = (a.final_metrics(), b.final_metrics());
    assert_eq!(ra.loss, rb.loss);
    assert_eq!(ra.kl, rb.kl);
    assert_eq!(ra.cross_entropy, rb.cross_entropy);
    assert_eq!(ra.train_accuracy, rb.train_accuracy);
}

#[test]
fn psnr_sweep_reuses_one_checkpoint() {
    use ccib::harness::sweep::{sweep, SweepAxis};
    use ccib::objectives::Objective;
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "ccib", "");
    let r = sweep(&cfg, SweepAxis::TestPsnr, &[0.0, 10.0, 20.0], &[Objective::Ccib, Objective::Vib]).unwrap();
    assert_eq!(r.trained, 2);
    assert_eq!(r.points.len(), 6);
    let text = fs::read_to_string(&r.csv).unwrap();
    assert!(text.starts_with("axis,value,objective,seed,latent_dim,psnr_db,ood_dataset,accuracy,auroc,latency_s\n"));
    assert_eq!(text.lines().count(), 7);
    // A rerun finds the finished checkpoints.
    let again = sweep(&cfg, SweepAxis::TestPsnr, &[20.0], &[Objective::Ccib]).unwrap();
    assert_eq!(again.trained, 0);
    assert_eq!(fs::read_to_string(&again.csv).unwrap().lines().count(), 2);
    assert_eq!(again.points[0].metrics.ood, r.points[2].metrics.ood);
}

#[test]
fn latent_sweep_trains_per_point() {
    use ccib::harness::sweep::{sweep, SweepAxis};
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), "deepjscc", "");
    cfg.train.epochs = 1;
    let r = sweep(&cfg, SweepAxis::LatentDim, &[2.0, 6.0], &[]).unwrap();
    assert_eq!(r.trained, 2);
    assert_eq!(r.points[1].metrics.latent_dim, 6);
    assert_eq!(r.points[1].metrics.latency_s, 6.0 / 9600.0);
    assert!(sweep(&cfg, SweepAxis::LatentDim, &[2.5], &[]).is_err());
}
