//! Test-time pipeline: received latents, likelihood scores, ODIN, accuracy and
//! AUROC, with score and ROC CSV export.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::Serialize;

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::ExperimentConfig;
use super::data::{self, Images, LabeledDataset, Split};
use crate::channel::{self, ChannelConfig};
use crate::codec::{sample_latent_tensor, LatentNoise, Transceiver};
use crate::error::{Error, Result};
use crate::gaussian::PriorBank;
use crate::objectives::Objective;
use crate::ood::{self, argmax, DetectionConfig, RankingScore, ScoreRecord};
use crate::rng::{self, StreamRng};

const BATCH: usize = 500;

/// Where a pass draws its encoder and channel noise from.
#[derive(Debug, Clone, Copy)]
pub struct NoiseStream {
    pub root: u64,
    pub name: &'static str,
    pub index: u64,
}

impl NoiseStream {
    pub fn new(root: u64, name: &'static str, index: u64) -> Self {
        Self { root, name, index }
    }

    fn rngs(&self) -> (StreamRng, StreamRng) {
        (
            rng::indexed_substream(self.root, self.name, 2 * self.index),
            rng::indexed_substream(self.root, self.name, 2 * self.index + 1),
        )
    }
}

/// Per-batch noise for `n` samples, identical for every pass over the same stream.
fn noise_batches(n: usize, model: &Transceiver, stream: NoiseStream) -> Result<Vec<LatentNoise>> {
    let (mut enc, mut ch) = stream.rngs();
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let len = BATCH.min(n - start);
        out.push(LatentNoise::draw(len, model.latent_dim(), model.dtype(), model.device(), &mut enc, &mut ch)?);
        start += len;
    }
    Ok(out)
}

/// Received latents ẑ and classifier logits for every image.
#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    pub latents: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

pub fn receive(
    model: &Transceiver,
    images: &Images,
    channel: &ChannelConfig,
    objective: Objective,
    stream: NoiseStream,
) -> Result<Received> {
    let noise = noise_batches(images.len(), model, stream)?;
    let mut latents = Vec::with_capacity(images.len());
    let mut logits = Vec::with_capacity(images.len());
    for (b, n) in noise.iter().enumerate() {
        let start = b * BATCH;
        let end = (start + BATCH).min(images.len());
        let x = model.input_tensor(images.range(start, end), end - start)?;
        let enc = model.encode_batch(&x, false)?;
        let z = sample_latent_tensor(&enc, channel, n, objective.stochastic_encoder())?;
        let l = model.decode_batch(&z)?;
        latents.extend(z.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        logits.extend(l.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    Ok(Received { latents, logits })
}

/// Autoencoder reconstruction error l_x for every image.
pub fn reconstruction_losses(model: &Transceiver, images: &Images) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    let mut start = 0;
    while start < images.len() {
        let end = (start + BATCH).min(images.len());
        let x = model.input_tensor(images.range(start, end), end - start)?;
        let l = model.autoencoder().per_sample_loss(&x)?;
        out.extend(l.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        start = end;
    }
    Ok(out)
}

/// Likelihood records for every sample.
pub fn score_records(
    received: &Received,
    recon: &[f64],
    bank: &PriorBank,
    detect: &DetectionConfig,
    lambda: f64,
) -> Result<Vec<ScoreRecord>> {
    received
        .latents
        .iter()
        .zip(recon)
        .map(|(z, &l)| ood::score_record(z, l, bank, detect, lambda))
        .collect()
}

/// ODIN scores with the same frozen noise as [`receive`] on the same stream.
pub fn odin(
    model: &Transceiver,
    images: &Images,
    channel: &ChannelConfig,
    objective: Objective,
    detect: &DetectionConfig,
    stream: NoiseStream,
) -> Result<Vec<f64>> {
    let noise = noise_batches(images.len(), model, stream)?;
    let mut out = Vec::with_capacity(images.len());
    for (b, n) in noise.iter().enumerate() {
        let start = b * BATCH;
        let end = (start + BATCH).min(images.len());
        let x = model.input_tensor(images.range(start, end), end - start)?;
        let logits_fn = |input: &Tensor| -> candle_core::Result<Tensor> {
            let run = || -> Result<Tensor> {
                let enc = model.encode_batch(input, false)?;
                let z = sample_latent_tensor(&enc, channel, n, objective.stochastic_encoder())?;
                model.decode_batch(&z)
            };
            run().map_err(|e| candle_core::Error::Msg(e.to_string()))
        };
        out.extend(ood::odin_scores(logits_fn, &x, detect.odin_temperature, detect.odin_epsilon)?);
    }
    Ok(out)
}

/// Score used to rank samples for a given objective: S′_top or S_top for the
/// likelihood detector, the ODIN score for the baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct SetScores {
    pub accuracy: Option<f64>,
    pub ranking: Vec<f64>,
    /// Likelihood records (likelihood detector only).
    pub records: Vec<ScoreRecord>,
    pub odin: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn score_set(
    model: &Transceiver,
    bank: &PriorBank,
    images: &Images,
    labels: Option<&[usize]>,
    channel: &ChannelConfig,
    objective: Objective,
    detect: &DetectionConfig,
    lambda: f64,
    stream: NoiseStream,
) -> Result<SetScores> {
    if images.shape() != model.spec().input {
        return Err(Error::contract(format!(
            "images of shape {:?} do not fit a model with input {:?}",
            images.shape(),
            model.spec().input
        )));
    }
    let received = receive(model, images, channel, objective, stream)?;
    let accuracy = labels.map(|ls| {
        let correct = received.logits.iter().zip(ls).filter(|(l, &y)| argmax(l) == y).count();
        correct as f64 / ls.len().max(1) as f64
    });
    match objective {
        Objective::Ccib => {
            let recon = reconstruction_losses(model, images)?;
            let records = score_records(&received, &recon, bank, detect, lambda)?;
            let ranking = records.iter().map(|r| r.ranking_score(detect.ranking)).collect();
            Ok(SetScores { accuracy, ranking, records, odin: Vec::new() })
        }
        Objective::Vib | Objective::DeepJscc => {
            let odin = odin(model, images, channel, objective, detect, stream)?;
            Ok(SetScores { accuracy, ranking: odin.clone(), records: Vec::new(), odin })
        }
    }
}

/// λ such that `target_tpr` of `scores` satisfy score ≥ λ.
pub fn calibrate_threshold(scores: &[f64], target_tpr: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }
    let mut s = scores.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let reject = ((1.0 - target_tpr) * s.len() as f64).floor() as usize;
    Ok(s[reject.min(s.len() - 1)])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodResult {
    pub dataset: String,
    /// AUROC of the configured ranking score.
    pub auroc: f64,
    /// Likelihood detector only: AUROC of S_top and of S′_top.
    pub auroc_raw: Option<f64>,
    pub auroc_weighted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub objective: Objective,
    pub seed: u64,
    pub config_hash: String,
    pub latent_dim: usize,
    pub psnr_db: f64,
    pub accuracy: f64,
    pub latency_s: f64,
    pub ood: Vec<OodResult>,
    pub output_dir: PathBuf,
}

pub const EVAL_HEADER: [&str; 11] = [
    "objective",
    "seed",
    "config_hash",
    "latent_dim",
    "psnr_db",
    "ood_dataset",
    "accuracy",
    "auroc",
    "auroc_raw",
    "auroc_weighted",
    "latency_s",
];

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl EvalMetrics {
    pub fn rows(&self) -> Vec<Vec<String>> {
        self.ood
            .iter()
            .map(|o| {
                vec![
                    self.objective.to_string(),
                    self.seed.to_string(),
                    self.config_hash.clone(),
                    self.latent_dim.to_string(),
                    self.psnr_db.to_string(),
                    o.dataset.clone(),
                    self.accuracy.to_string(),
                    o.auroc.to_string(),
                    opt(o.auroc_raw),
                    opt(o.auroc_weighted),
                    self.latency_s.to_string(),
                ]
            })
            .collect()
    }
}

/// Loaded evaluation sets.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub id_test: LabeledDataset,
    pub ood: Vec<(String, Images)>,
}

impl EvalData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let mut id_test = data::ingest(&cfg.experiment.dataset, Split::Test, cfg.data_dir())?;
        if let Some(n) = cfg.data.test_limit {
            id_test.truncate(n);
        }
        let mut ood = Vec::new();
        for name in &cfg.experiment.ood_datasets {
            let mut imgs = data::ingest_ood(name, cfg.data_dir())?;
            if let Some(n) = cfg.data.ood_limit {
                imgs.truncate(n);
            }
            ood.push((name.clone(), imgs));
        }
        Ok(Self { id_test, ood })
    }
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

/// Scores the ID test set and every OoD set, writes CSVs into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Transceiver,
    meta: &CheckpointMeta,
    bank: &PriorBank,
    channel: &ChannelConfig,
    detect: &DetectionConfig,
    data: &EvalData,
    out_dir: &Path,
) -> Result<EvalMetrics> {
    fs::create_dir_all(out_dir)?;
    let objective = meta.objective;
    let lambda = detect.lambda_threshold.or(meta.lambda_threshold).unwrap_or(f64::NEG_INFINITY);
    let seed = meta.seed;
    let id = score_set(
        model,
        bank,
        &data.id_test.images,
        Some(&data.id_test.labels),
        channel,
        objective,
        detect,
        lambda,
        NoiseStream::new(seed, rng::EVAL, 0),
    )?;
    let mut oods = Vec::new();
    for (k, (name, imgs)) in data.ood.iter().enumerate() {
        let s = score_set(model, bank, imgs, None, channel, objective, detect, lambda, NoiseStream::new(seed, rng::EVAL, k as u64 + 1))?;
        oods.push((name.clone(), s));
    }

    let id_name = &data.id_test.name;
    let mut results = Vec::new();
    if objective == Objective::Ccib {
        let mut w = csv::Writer::from_path(out_dir.join("scores.csv"))?;
        let mut header = vec!["sample_id".to_string(), "is_ood".to_string()];
        header.extend((0..bank.num_classes()).map(|c| format!("S_{c}")));
        header.extend(["l_x", "S_prime_top", "decision"].map(String::from));
        w.write_record(&header)?;
        let mut write = |set: &str, is_ood: bool, recs: &[ScoreRecord]| -> Result<()> {
            for (i, r) in recs.iter().enumerate() {
                let mut row = vec![format!("{set}/{i}"), (is_ood as u8).to_string()];
                row.extend(r.raw_scores.iter().map(|s| s.to_string()));
                row.push(r.recon_loss.to_string());
                row.push(r.top_weighted().to_string());
                row.push(r.decision.to_string());
                w.write_record(&row)?;
            }
            Ok(())
        };
        write(id_name, false, &id.records)?;
        for (name, s) in &oods {
            write(name, true, &s.records)?;
        }
        w.flush()?;
    } else {
        let mut w = csv::Writer::from_path(out_dir.join("odin_scores.csv"))?;
        w.write_record(["sample_id", "is_ood", "odin_score"])?;
        let mut write = |set: &str, is_ood: bool, scores: &[f64]| -> Result<()> {
            for (i, s) in scores.iter().enumerate() {
                w.write_record([format!("{set}/{i}"), (is_ood as u8).to_string(), s.to_string()])?;
            }
            Ok(())
        };
        write(id_name, false, &id.odin)?;
        for (name, s) in &oods {
            write(name, true, &s.odin)?;
        }
        w.flush()?;
    }

    for (name, s) in &oods {
        let auroc = ood::auroc(&id.ranking, &s.ranking)?;
        let (auroc_raw, auroc_weighted) = if objective == Objective::Ccib {
            let pick = |recs: &[ScoreRecord], r: RankingScore| recs.iter().map(|x| x.ranking_score(r)).collect::<Vec<_>>();
            (
                Some(ood::auroc(&pick(&id.records, RankingScore::Raw), &pick(&s.records, RankingScore::Raw))?),
                Some(ood::auroc(&pick(&id.records, RankingScore::Weighted), &pick(&s.records, RankingScore::Weighted))?),
            )
        } else {
            (None, None)
        };
        let mut w = csv::Writer::from_path(out_dir.join(format!("roc_{}.csv", sanitize(name))))?;
        w.write_record(["false_positive_rate", "true_positive_rate", "threshold"])?;
        for p in ood::roc_curve(&id.ranking, &s.ranking)? {
            w.write_record([
                p.false_positive_rate.to_string(),
                p.true_positive_rate.to_string(),
                p.threshold.to_string(),
            ])?;
        }
        w.flush()?;
        results.push(OodResult { dataset: name.clone(), auroc, auroc_raw, auroc_weighted });
    }

    let metrics = EvalMetrics {
        objective,
        seed,
        config_hash: meta.config_hash.clone(),
        latent_dim: meta.latent_dim,
        psnr_db: channel.psnr_db(),
        accuracy: id.accuracy.unwrap_or(f64::NAN),
        latency_s: channel::latency(meta.latent_dim, channel)?,
        ood: results,
        output_dir: out_dir.to_path_buf(),
    };
    let mut w = csv::Writer::from_path(out_dir.join("eval.csv"))?;
    w.write_record(EVAL_HEADER)?;
    for row in metrics.rows() {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(metrics)
}

/// Loads the checkpoint and data named by `cfg` and evaluates into
/// `<output_dir>/eval`.
pub fn eval_run(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalMetrics> {
    let data = EvalData::load(cfg)?;
    eval_with(cfg, checkpoint, &data, &cfg.channel, &cfg.output_dir().join("eval"))
}

/// [`eval_run`] with preloaded data, a test-time channel and an output directory.
pub fn eval_with(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    data: &EvalData,
    channel: &ChannelConfig,
    out_dir: &Path,
) -> Result<EvalMetrics> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.meta.latent_dim != cfg.experiment.latent_dim {
        return Err(Error::DimensionMismatch { expected: cfg.experiment.latent_dim, actual: ckpt.meta.latent_dim });
    }
    if data.id_test.num_classes > ckpt.meta.num_classes {
        return Err(Error::Checkpoint("test labels exceed the checkpoint's class count".into()));
    }
    let model = ckpt.restore(&Device::Cpu)?;
    evaluate(&model, &ckpt.meta, &ckpt.bank, channel, &cfg.detect, data, out_dir)
}

/// Verdict for a single input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleDetection {
    pub objective: Objective,
    pub predicted_class: usize,
    /// Score compared against λ: S′_top (or S_top) for the likelihood
    /// detector, the ODIN score otherwise.
    pub score: f64,
    pub lambda: f64,
    pub is_ood: bool,
    pub recon_loss: Option<f64>,
}

impl SingleDetection {
    pub fn line(&self) -> String {
        let verdict = if self.is_ood { "ood" } else { "id" };
        let mut s = format!(
            "decision={verdict} class={} score={} lambda={} objective={}",
            self.predicted_class, self.score, self.lambda, self.objective
        );
        if let Some(l) = self.recon_loss {
            s.push_str(&format!(" l_x={l}"));
        }
        s
    }
}

/// Runs one image through the channel and the detector stored in `ckpt`.
/// λ comes from `detect.lambda_threshold`, else the checkpoint.
pub fn detect_one(
    ckpt: &Checkpoint,
    model: &Transceiver,
    pixels: &[f32],
    channel: &ChannelConfig,
    detect: &DetectionConfig,
) -> Result<SingleDetection> {
    let images = Images::new(model.spec().input, pixels.to_vec())?;
    let lambda = detect
        .lambda_threshold
        .or(ckpt.meta.lambda_threshold)
        .ok_or_else(|| Error::Checkpoint("no calibrated lambda; set detect.lambda_threshold".into()))?;
    let objective = ckpt.meta.objective;
    let stream = NoiseStream::new(ckpt.meta.seed, rng::EVAL, 0);
    let s = score_set(model, &ckpt.bank, &images, None, channel, objective, detect, lambda, stream)?;
    Ok(match objective {
        Objective::Ccib => {
            let r = &s.records[0];
            SingleDetection {
                objective,
                predicted_class: r.top_class,
                score: r.top_weighted(),
                lambda,
                is_ood: !r.decision.is_id(),
                recon_loss: Some(r.recon_loss),
            }
        }
        _ => {
            let logits = receive(model, &images, channel, objective, stream)?.logits;
            SingleDetection {
                objective,
                predicted_class: argmax(&logits[0]),
                score: s.odin[0],
                lambda,
                is_ood: s.odin[0] < lambda,
                recon_loss: None,
            }
        }
    })
}
