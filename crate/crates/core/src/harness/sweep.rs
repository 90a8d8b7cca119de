//! Accuracy/AUROC curves over latent size (latency) or test-time PSNR.

use std::fmt;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::data::{self, LabeledDataset, Split};
use super::eval::{eval_with, EvalData, EvalMetrics};
use super::train::{train_on, CHECKPOINT_FILE};
use crate::error::{Error, Result};
use crate::objectives::Objective;

pub const SWEEP_HEADER: [&str; 10] = [
    "axis",
    "value",
    "objective",
    "seed",
    "latent_dim",
    "psnr_db",
    "ood_dataset",
    "accuracy",
    "auroc",
    "latency_s",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Retrains per point; latency grows with the latent size.
    LatentDim,
    /// One checkpoint per objective, evaluated under different channel noise.
    TestPsnr,
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent_dim" => Ok(Self::LatentDim),
            "test_psnr" => Ok(Self::TestPsnr),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?} (latent_dim | test_psnr)"))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LatentDim => "latent_dim",
            Self::TestPsnr => "test_psnr",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub csv: PathBuf,
    pub points: Vec<SweepPoint>,
    /// Number of points whose checkpoint was trained (not reused).
    pub trained: usize,
}

/// A finished checkpoint at `path` trained from exactly this config.
fn reusable(path: &Path, cfg: &ExperimentConfig) -> Result<bool> {
    if !path.exists() {
        return Ok(false);
    }
    let Ok(ckpt) = Checkpoint::load(path) else { return Ok(false) };
    Ok(ckpt.meta.config_hash == cfg.hash()?
        && ckpt.meta.epochs_completed == cfg.train.epochs
        && ckpt.meta.lambda_threshold.is_some())
}

fn ensure_trained(cfg: &ExperimentConfig, train: &LabeledDataset, trained: &mut usize) -> Result<PathBuf> {
    let path = cfg.output_dir().join(CHECKPOINT_FILE);
    if !reusable(&path, cfg)? {
        train_on(cfg, train)?;
        *trained += 1;
    }
    Ok(path)
}

fn point_config(base: &ExperimentConfig, objective: Objective, dir: PathBuf) -> ExperimentConfig {
    let mut c = base.clone();
    c.train.objective = objective;
    c.experiment.output_dir = dir;
    c
}

fn label(v: f64) -> String {
    format!("{v}").replace('-', "m").replace('.', "p")
}

/// Runs the sweep under `<output_dir>/sweep_<axis>/` and writes
/// `<output_dir>/sweep_<axis>.csv`. `objectives` defaults to the configured one.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64], objectives: &[Objective]) -> Result<SweepResult> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Empty("sweep values"));
    }
    let objectives = if objectives.is_empty() { vec![cfg.train.objective] } else { objectives.to_vec() };
    let mut train = data::ingest(&cfg.experiment.dataset, Split::Train, cfg.data_dir())?;
    if let Some(n) = cfg.data.train_limit {
        train.truncate(n);
    }
    let eval_data = EvalData::load(cfg)?;
    sweep_with(cfg, axis, values, &objectives, &train, &eval_data)
}

/// [`sweep`] with preloaded training and evaluation data.
pub fn sweep_with(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    objectives: &[Objective],
    train: &LabeledDataset,
    eval_data: &EvalData,
) -> Result<SweepResult> {
    let root = cfg.output_dir().join(format!("sweep_{axis}"));
    fs::create_dir_all(&root)?;
    let mut points = Vec::new();
    let mut trained = 0;
    for &objective in objectives {
        match axis {
            SweepAxis::LatentDim => {
                for &v in values {
                    if v < 1.0 || v.fract() != 0.0 {
                        return Err(Error::Config(format!("latent_dim sweep value {v} is not a positive integer")));
                    }
                    let dir = root.join(format!("{objective}/latent_dim_{v}"));
                    let mut c = point_config(cfg, objective, dir);
                    c.experiment.latent_dim = v as usize;
                    let ckpt = ensure_trained(&c, train, &mut trained)?;
                    let metrics = eval_with(&c, &ckpt, eval_data, &c.channel, &c.output_dir().join("eval"))?;
                    points.push(SweepPoint { value: v, metrics });
                }
            }
            SweepAxis::TestPsnr => {
                let c = point_config(cfg, objective, root.join(objective.to_string()));
                let ckpt = ensure_trained(&c, train, &mut trained)?;
                for &v in values {
                    let channel = c.channel.with_psnr(v)?;
                    let out = c.output_dir().join(format!("eval_psnr_{}", label(v)));
                    let metrics = eval_with(&c, &ckpt, eval_data, &channel, &out)?;
                    points.push(SweepPoint { value: v, metrics });
                }
            }
        }
    }
    let csv = cfg.output_dir().join(format!("sweep_{axis}.csv"));
    write_csv(&csv, axis, &points)?;
    Ok(SweepResult { axis, csv, points, trained })
}

fn write_csv(path: &Path, axis: SweepAxis, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(SWEEP_HEADER)?;
    for p in points {
        let m = &p.metrics;
        for o in &m.ood {
            w.write_record([
                axis.to_string(),
                p.value.to_string(),
                m.objective.to_string(),
                m.seed.to_string(),
                m.latent_dim.to_string(),
                m.psnr_db.to_string(),
                o.dataset.clone(),
                m.accuracy.to_string(),
                o.auroc.to_string(),
                m.latency_s.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for a in [SweepAxis::LatentDim, SweepAxis::TestPsnr] {
            assert_eq!(a.to_string().parse::<SweepAxis>().unwrap(), a);
        }
        assert!("psnr".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn labels_are_path_safe() {
        assert_eq!(label(-2.5), "m2p5");
        assert_eq!(label(20.0), "20");
    }
}
