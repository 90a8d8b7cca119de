//! End-to-end training with the prior bank refreshed at epoch boundaries.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::ExperimentConfig;
use super::data::{self, Images, LabeledDataset, Split};
use super::eval::{self, NoiseStream};
use crate::codec::{sample_latent_tensor, CodecSpec, LatentNoise, Transceiver};
use crate::error::{Error, Result};
use crate::gaussian::{ClassStatistics, PriorBank};
use crate::objectives::{
    combined_loss, deepjscc_loss, forward_batch, mine_triads, vib_loss, LossValues, Objective, PriorTensors,
};
use crate::ood::{argmax, RankingScore};
use crate::rng;

const REFRESH_BATCH: usize = 500;
/// Training samples scored when choosing λ.
const CALIBRATION_SAMPLES: usize = 5000;

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub objective: Objective,
    pub loss: f64,
    pub kl: f64,
    pub cross_entropy: f64,
    pub triplet: f64,
    pub train_accuracy: f64,
    pub learning_rate: f64,
    pub bank_epoch_tag: u32,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub bank_snapshots: Vec<PathBuf>,
    pub resolved_config: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub bank: PriorBank,
    pub lambda_threshold: Option<f64>,
}

impl RunArtifacts {
    pub fn final_metrics(&self) -> &MetricsRow {
        self.rows.last().expect("at least one epoch")
    }
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Loads the training split named by `cfg` and trains.
pub fn train_run(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut train = data::ingest(&cfg.experiment.dataset, Split::Train, cfg.data_dir())?;
    if let Some(n) = cfg.data.train_limit {
        train.truncate(n);
    }
    train_on(cfg, &train)
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    0.5 * base * (1.0 + (PI * step as f64 / total.max(1) as f64).cos())
}

/// Batches of one epoch; an incomplete final batch is dropped unless it is the only one.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    if order.len() <= size {
        return vec![order];
    }
    order.chunks_exact(size).collect()
}

#[derive(Default)]
struct Running {
    n: usize,
    correct: usize,
    total: f64,
    kl: f64,
    ce: f64,
    triplet: f64,
}

impl Running {
    fn add(&mut self, v: &LossValues, n: usize, correct: usize) {
        let w = n as f64;
        self.n += n;
        self.correct += correct;
        self.total += v.total * w;
        self.kl += v.kl * w;
        self.ce += v.cross_entropy * w;
        self.triplet += v.triplet * w;
    }
}

/// Trains on an already loaded dataset; artifacts go to `cfg.output_dir()`.
pub fn train_on(cfg: &ExperimentConfig, train: &LabeledDataset) -> Result<RunArtifacts> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Empty("training set"));
    }
    let out = cfg.output_dir().to_path_buf();
    let banks_dir = out.join("banks");
    fs::create_dir_all(&banks_dir)?;
    let resolved_config = out.join("config.toml");
    fs::write(&resolved_config, cfg.to_toml()?)?;

    let hash = cfg.hash()?;
    let seed = cfg.experiment.seed;
    let tc = &cfg.train;
    let objective = tc.objective;
    let dtype = cfg.experiment.precision.dtype();
    let device = Device::Cpu;
    let spec = CodecSpec {
        backbone: cfg.experiment.backbone,
        input: train.images.shape(),
        latent_dim: cfg.experiment.latent_dim,
        num_classes: train.num_classes,
        peak_power: cfg.channel.peak_power(),
    };
    let model = Transceiver::new(spec, dtype, &device, seed)?;
    let (c, m) = (spec.num_classes, spec.latent_dim);
    let mut bank = PriorBank::standard_normal(c, m);
    let mut meta = CheckpointMeta {
        backbone: spec.backbone,
        latent_dim: m,
        num_classes: c,
        input: spec.input,
        peak_power: spec.peak_power,
        channel: cfg.channel.clone(),
        precision: cfg.experiment.precision,
        objective,
        config_hash: hash.clone(),
        seed,
        epochs_completed: 0,
        lambda_threshold: None,
    };
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint::capture(&model, &bank, meta.clone())?.save(&checkpoint)?;

    let mut opt = AdamW::new(
        model.vars(),
        ParamsAdamW { lr: tc.learning_rate, weight_decay: 0.0, ..Default::default() },
    )?;
    let n = train.len();
    let steps_per_epoch = batches(&(0..n).collect::<Vec<_>>(), tc.batch_size).len();
    let total_steps = steps_per_epoch * tc.epochs;
    let metrics = out.join("metrics.csv");
    let mut writer = csv::Writer::from_writer(File::create(&metrics)?);
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    let mut step = 0;

    for epoch in 1..=tc.epochs {
        if objective == Objective::Ccib && bank.epoch_tag() as usize != epoch - 1 {
            return Err(Error::contract(format!(
                "epoch {epoch} would read a prior bank tagged {}",
                bank.epoch_tag()
            )));
        }
        let priors = PriorTensors::from_bank(&bank, dtype, &device)?;
        let order = data::shuffled_order(n, seed, epoch as u64);
        let e = epoch as u64;
        let mut reparam = rng::indexed_substream(seed, rng::REPARAM, e);
        let mut channel_rng = rng::indexed_substream(seed, rng::CHANNEL, e);
        let mut triad_rng = rng::indexed_substream(seed, rng::TRIADS, e);
        let mut run = Running::default();
        let mut lr = tc.learning_rate;
        for (b, idx) in batches(&order, tc.batch_size).into_iter().enumerate() {
            lr = cosine_lr(tc.learning_rate, step, total_steps);
            opt.set_learning_rate(lr);
            let x = model.input_tensor(&train.images.gather(idx), idx.len())?;
            let labels = train.gather_labels(idx);
            let noise = (0..tc.mc_samples)
                .map(|_| LatentNoise::draw(idx.len(), m, dtype, &device, &mut reparam, &mut channel_rng))
                .collect::<Result<Vec<_>>>()?;
            let fwd = forward_batch(&model, &x, &labels, &cfg.channel, &noise, objective, true)?;
            let terms = match objective {
                Objective::Ccib => {
                    let triads = mine_triads(&labels, tc.triads_per_batch(), &mut triad_rng)?;
                    combined_loss(&fwd, &priors, &triads, tc)?
                }
                Objective::Vib => vib_loss(&fwd, c, tc)?,
                Objective::DeepJscc => deepjscc_loss(&fwd)?,
            };
            let values = terms.values()?;
            if !values.total.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, value: values.total });
            }
            opt.backward_step(&terms.total)?;
            let preds: Vec<Vec<f64>> = fwd.logits[0].to_dtype(DType::F64)?.to_vec2()?;
            let correct = preds.iter().zip(&labels).filter(|(p, &y)| argmax(p) == y).count();
            run.add(&values, idx.len(), correct);
            step += 1;
        }

        if objective == Objective::Ccib {
            bank = refresh_bank(&model, &train.images, &train.labels, c, cfg, epoch)?;
        }
        let snap = banks_dir.join(format!("epoch_{epoch:03}.bin"));
        let mut f = File::create(&snap)?;
        bank.write_to(&mut f)?;
        snapshots.push(snap);

        let w = run.n as f64;
        let row = MetricsRow {
            epoch,
            objective,
            loss: run.total / w,
            kl: run.kl / w,
            cross_entropy: run.ce / w,
            triplet: run.triplet / w,
            train_accuracy: run.correct as f64 / w,
            learning_rate: lr,
            bank_epoch_tag: bank.epoch_tag(),
            seed,
            config_hash: hash.clone(),
        };
        writer.serialize(&row)?;
        writer.flush()?;
        rows.push(row);
        meta.epochs_completed = epoch;
        Checkpoint::capture(&model, &bank, meta.clone())?.save(&checkpoint)?;
    }

    if objective == Objective::Ccib {
        train_autoencoder(&model, &train.images, cfg)?;
    }
    let lambda = calibrate(&model, &bank, train, cfg)?;
    meta.lambda_threshold = Some(lambda);
    Checkpoint::capture(&model, &bank, meta)?.save(&checkpoint)?;

    Ok(RunArtifacts {
        output_dir: out,
        checkpoint,
        metrics,
        bank_snapshots: snapshots,
        resolved_config,
        rows,
        bank,
        lambda_threshold: Some(lambda),
    })
}

/// Fits the class priors to received latents of the whole training set.
pub fn refresh_bank(
    model: &Transceiver,
    images: &Images,
    labels: &[usize],
    num_classes: usize,
    cfg: &ExperimentConfig,
    epoch: usize,
) -> Result<PriorBank> {
    let m = model.latent_dim();
    let mut stats = ClassStatistics::new(num_classes, m);
    let (mut enc_rng, mut ch_rng) = (
        rng::indexed_substream(cfg.experiment.seed, rng::REFRESH, 2 * epoch as u64),
        rng::indexed_substream(cfg.experiment.seed, rng::REFRESH, 2 * epoch as u64 + 1),
    );
    let mut start = 0;
    while start < images.len() {
        let end = (start + REFRESH_BATCH).min(images.len());
        let x = model.input_tensor(images.range(start, end), end - start)?;
        let enc = model.encode_batch(&x, false)?;
        let noise = LatentNoise::draw(end - start, m, model.dtype(), model.device(), &mut enc_rng, &mut ch_rng)?;
        let z = sample_latent_tensor(&enc, &cfg.channel, &noise, cfg.train.objective.stochastic_encoder())?;
        let z: Vec<Vec<f64>> = z.to_dtype(DType::F64)?.to_vec2()?;
        for (zi, &y) in z.iter().zip(&labels[start..end]) {
            stats.push(zi, y)?;
        }
        start = end;
    }
    stats.finish(epoch as u32)
}

/// Plain MSE training of the on-device autoencoder on in-distribution images.
pub fn train_autoencoder(model: &Transceiver, images: &Images, cfg: &ExperimentConfig) -> Result<()> {
    let ae = model.autoencoder();
    let tc = &cfg.train;
    let mut opt = AdamW::new(ae.vars(), ParamsAdamW { lr: tc.learning_rate, weight_decay: 0.0, ..Default::default() })?;
    for epoch in 1..=tc.autoencoder_epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut rng::indexed_substream(cfg.experiment.seed, rng::AUTOENCODER, epoch as u64),
        );
        for idx in batches(&order, tc.batch_size) {
            let x = model.input_tensor(&images.gather(idx), idx.len())?;
            let loss = ae.per_sample_loss(&x)?.mean_all()?;
            let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !v.is_finite() {
                return Err(Error::Divergence { epoch, batch: 0, value: v });
            }
            opt.backward_step(&loss)?;
        }
    }
    Ok(())
}

/// λ at the configured true-positive rate over (a prefix of) the training set,
/// on the weighted top score for the likelihood detector and on ODIN otherwise.
fn calibrate(model: &Transceiver, bank: &PriorBank, train: &LabeledDataset, cfg: &ExperimentConfig) -> Result<f64> {
    let mut subset = train.images.clone();
    subset.truncate(CALIBRATION_SAMPLES);
    let stream = NoiseStream::new(cfg.experiment.seed, rng::CALIBRATION, 0);
    let s = eval::score_set(
        model,
        bank,
        &subset,
        None,
        &cfg.channel,
        cfg.train.objective,
        &cfg.detect,
        f64::NEG_INFINITY,
        stream,
    )?;
    let scores: Vec<f64> = if cfg.train.objective == Objective::Ccib {
        s.records.iter().map(|r| r.ranking_score(RankingScore::Weighted)).collect()
    } else {
        s.odin
    };
    eval::calibrate_threshold(&scores, cfg.calibration.target_tpr)
}

/// Reads `metrics.csv` back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: std::result::Result<Vec<MetricsRow>, csv::Error> = r.deserialize().collect();
    Ok(rows?)
}
