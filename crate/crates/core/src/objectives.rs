//! Training losses: the variational class-conditional bottleneck objective,
//! the triplet separation term, and the VIB and plain cross-entropy baselines.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::codec::{layers::log_softmax, sample_latent_tensor, EncodedBatch, LatentNoise, Transceiver};
use crate::error::{Error, Result};
use crate::gaussian::PriorBank;
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ccib,
    Vib,
    DeepJscc,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Ccib, Objective::Vib, Objective::DeepJscc];

    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Ccib => "ccib",
            Objective::Vib => "vib",
            Objective::DeepJscc => "deepjscc",
        }
    }

    /// Whether the encoder's variance head is sampled from.
    pub fn stochastic_encoder(&self) -> bool {
        !matches!(self, Objective::DeepJscc)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ccib" => Ok(Objective::Ccib),
            "vib" => Ok(Objective::Vib),
            "deepjscc" => Ok(Objective::DeepJscc),
            other => Err(Error::Config(format!("unknown objective {other:?} (expected ccib, vib or deepjscc)"))),
        }
    }
}

/// The `[train]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Rate weight β.
    pub beta: f64,
    /// Triplet margin α.
    pub margin: f64,
    pub mc_samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Triads per batch; defaults to the batch size.
    pub triplet_count: Option<usize>,
    pub triplet_weight: f64,
    pub learning_rate: f64,
    /// Epochs spent fitting the on-device autoencoder (ccib only).
    pub autoencoder_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Ccib,
            beta: 0.01,
            margin: 0.2,
            mc_samples: 1,
            batch_size: 128,
            epochs: 10,
            triplet_count: None,
            triplet_weight: 1.0,
            learning_rate: 1e-3,
            autoencoder_epochs: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train.{m}")));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be a finite number >= 0");
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin must be a finite number >= 0");
        }
        if self.mc_samples == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("mc_samples, batch_size and epochs must be positive");
        }
        if self.triplet_count == Some(0) {
            return bad("triplet_count must be positive");
        }
        if !(self.triplet_weight >= 0.0 && self.triplet_weight.is_finite()) {
            return bad("triplet_weight must be a finite number >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn triads_per_batch(&self) -> usize {
        self.triplet_count.unwrap_or(self.batch_size)
    }
}

/// Class priors laid out for batched KL evaluation.
#[derive(Debug, Clone)]
pub struct PriorTensors {
    means: Tensor,
    precisions: Tensor,
    precision_diag: Tensor,
    log_dets: Tensor,
    num_classes: usize,
    dim: usize,
}

impl PriorTensors {
    pub fn from_bank(bank: &PriorBank, dtype: DType, device: &Device) -> Result<Self> {
        let (c, m) = (bank.num_classes(), bank.dim());
        let mut means = Vec::with_capacity(c * m);
        let mut precisions = Vec::with_capacity(c * m * m);
        let mut diag = Vec::with_capacity(c * m);
        let mut log_dets = Vec::with_capacity(c);
        for p in bank.priors() {
            means.extend(p.mean().iter());
            let prec = p.precision();
            for i in 0..m {
                for j in 0..m {
                    precisions.push(prec[(i, j)]);
                }
                diag.push(prec[(i, i)]);
            }
            log_dets.push(p.log_det());
        }
        let mk = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            means: mk(means, &[c, m])?,
            precisions: mk(precisions, &[c, m, m])?,
            precision_diag: mk(diag, &[c, m])?,
            log_dets: mk(log_dets, &[c])?,
            num_classes: c,
            dim: m,
        })
    }

    pub fn standard(num_classes: usize, dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        Self::from_bank(&PriorBank::standard_normal(num_classes, dim), dtype, device)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

fn label_tensor(labels: &[usize], classes: usize, device: &Device) -> Result<Tensor> {
    let mut idx = Vec::with_capacity(labels.len());
    for &l in labels {
        if l >= classes {
            return Err(Error::UnknownLabel { label: l, classes });
        }
        idx.push(l as u32);
    }
    Ok(Tensor::from_vec(idx, labels.len(), device)?)
}

/// Per-sample KL(N(mean, diag(var)) ‖ prior_{label}), shape (N,).
pub fn kl_tensor(mean: &Tensor, var: &Tensor, labels: &[usize], priors: &PriorTensors) -> Result<Tensor> {
    let (n, m) = mean.dims2()?;
    if m != priors.dim {
        return Err(Error::DimensionMismatch { expected: priors.dim, actual: m });
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: labels.len() });
    }
    let idx = label_tensor(labels, priors.num_classes, mean.device())?;
    let mu = priors.means.index_select(&idx, 0)?;
    let prec = priors.precisions.index_select(&idx, 0)?;
    let diag = priors.precision_diag.index_select(&idx, 0)?;
    let log_det = priors.log_dets.index_select(&idx, 0)?;
    let d = mu.sub(mean)?;
    let quad = d
        .unsqueeze(1)?
        .matmul(&prec)?
        .matmul(&d.unsqueeze(2)?)?
        .reshape(n)?;
    let trace = diag.mul(var)?.sum(1)?;
    let post_log_det = var.log()?.sum(1)?;
    let kl = quad.add(&trace)?.add(&log_det)?.sub(&post_log_det)?.affine(0.5, -0.5 * m as f64)?;
    Ok(kl)
}

/// Mean over samples and Monte Carlo draws of −log softmax(logits)[label].
pub fn cross_entropy(logits: &[Tensor], labels: &[usize]) -> Result<Tensor> {
    let first = logits.first().ok_or(Error::Empty("logit samples"))?;
    let (n, c) = first.dims2()?;
    if labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: labels.len() });
    }
    let mut onehot = vec![0f64; n * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::UnknownLabel { label: l, classes: c });
        }
        onehot[i * c + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, c), first.device())?.to_dtype(first.dtype())?;
    let mut total: Option<Tensor> = None;
    for l in logits {
        let nll = log_softmax(l)?.mul(&onehot)?.sum_all()?.neg()?;
        total = Some(match total {
            Some(t) => t.add(&nll)?,
            None => nll,
        });
    }
    let total = total.expect("at least one logit sample");
    Ok(total.affine(1.0 / (n * logits.len()) as f64, 0.0)?)
}

/// One forward pass through encoder, channel and classifier.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub encoded: EncodedBatch,
    /// One received latent batch per Monte Carlo draw.
    pub latents: Vec<Tensor>,
    pub logits: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub noise_var: f64,
}

impl BatchForward {
    /// diag(var) + σ²I, the posterior of the received latent.
    pub fn effective_var(&self) -> Result<Tensor> {
        Ok(self.encoded.var.affine(1.0, self.noise_var)?)
    }
}

pub fn forward_batch(
    model: &Transceiver,
    x: &Tensor,
    labels: &[usize],
    channel: &ChannelConfig,
    noise: &[LatentNoise],
    objective: Objective,
    train: bool,
) -> Result<BatchForward> {
    if noise.is_empty() {
        return Err(Error::Empty("noise draws"));
    }
    let encoded = model.encode_batch(x, train)?;
    let mut latents = Vec::with_capacity(noise.len());
    let mut logits = Vec::with_capacity(noise.len());
    for n in noise {
        let z = sample_latent_tensor(&encoded, channel, n, objective.stochastic_encoder())?;
        logits.push(model.decode_batch(&z)?);
        latents.push(z);
    }
    Ok(BatchForward { encoded, latents, logits, labels: labels.to_vec(), noise_var: channel.noise_var() })
}

/// Scalar loss tensors for one batch.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    /// Mean KL (zero for the cross-entropy baseline).
    pub kl: Tensor,
    pub cross_entropy: Tensor,
    /// Unweighted triplet term, when it is part of the objective.
    pub triplet: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub kl: f64,
    pub cross_entropy: f64,
    pub triplet: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl LossTerms {
    pub fn values(&self) -> Result<LossValues> {
        Ok(LossValues {
            total: scalar(&self.total)?,
            kl: scalar(&self.kl)?,
            cross_entropy: scalar(&self.cross_entropy)?,
            triplet: match &self.triplet {
                Some(t) => scalar(t)?,
                None => 0.0,
            },
        })
    }
}

/// (1/N) Σₙ [β·KL(p(ẑ|xₙ) ‖ r(ẑ|yₙ)) − (1/S) Σₛ log q(yₙ|ẑₙₛ)].
pub fn vccib_loss(batch: &BatchForward, priors: &PriorTensors, cfg: &TrainConfig) -> Result<LossTerms> {
    let kl = kl_tensor(&batch.encoded.symbols, &batch.effective_var()?, &batch.labels, priors)?.mean_all()?;
    let ce = cross_entropy(&batch.logits, &batch.labels)?;
    let total = kl.affine(cfg.beta, 0.0)?.add(&ce)?;
    Ok(LossTerms { total, kl, cross_entropy: ce, triplet: None })
}

/// [`vccib_loss`] with every class prior fixed to N(0, I).
pub fn vib_loss(batch: &BatchForward, num_classes: usize, cfg: &TrainConfig) -> Result<LossTerms> {
    let m = batch.encoded.symbols.dim(1)?;
    let priors = PriorTensors::standard(num_classes, m, batch.encoded.symbols.dtype(), batch.encoded.symbols.device())?;
    vccib_loss(batch, &priors, cfg)
}

/// Plain cross-entropy through the channel.
pub fn deepjscc_loss(batch: &BatchForward) -> Result<LossTerms> {
    let ce = cross_entropy(&batch.logits, &batch.labels)?;
    let kl = ce.zeros_like()?;
    Ok(LossTerms { total: ce.clone(), kl, cross_entropy: ce, triplet: None })
}

/// Sample indices of one (anchor, positive, negative) triad.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriadIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triad {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl Triad {
    pub fn gather(latents: &[Vec<f64>], idx: TriadIndex) -> Self {
        Self {
            anchor: latents[idx.anchor].clone(),
            positive: latents[idx.positive].clone(),
            negative: latents[idx.negative].clone(),
        }
    }

    /// max(‖r − m‖² − ‖r − n‖² + α, 0).
    pub fn hinge(&self, margin: f64) -> f64 {
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        (sq(&self.anchor, &self.positive) - sq(&self.anchor, &self.negative) + margin).max(0.0)
    }
}

/// Σ hinge / (T·C) with T the number of triads and C the number of classes.
pub fn triplet_loss(triads: &[Triad], margin: f64, num_classes: usize) -> Result<f64> {
    if triads.is_empty() {
        return Err(Error::Empty("triad list"));
    }
    if num_classes == 0 {
        return Err(Error::contract("number of classes must be positive"));
    }
    let total: f64 = triads.iter().map(|t| t.hinge(margin)).sum();
    Ok(total / (triads.len() * num_classes) as f64)
}

/// Tensor form of [`triplet_loss`] over rows of `latents` (N, m).
pub fn triplet_loss_tensor(latents: &Tensor, triads: &[TriadIndex], margin: f64, num_classes: usize) -> Result<Tensor> {
    if triads.is_empty() {
        return Err(Error::Empty("triad list"));
    }
    if num_classes == 0 {
        return Err(Error::contract("number of classes must be positive"));
    }
    let dev = latents.device();
    let pick = |f: fn(&TriadIndex) -> usize| -> Result<Tensor> {
        let idx: Vec<u32> = triads.iter().map(|t| f(t) as u32).collect();
        Ok(latents.index_select(&Tensor::from_vec(idx, triads.len(), dev)?, 0)?)
    };
    let r = pick(|t| t.anchor)?;
    let p = pick(|t| t.positive)?;
    let n = pick(|t| t.negative)?;
    let pos = r.sub(&p)?.sqr()?.sum(1)?;
    let neg = r.sub(&n)?.sqr()?.sum(1)?;
    let hinge = pos.sub(&neg)?.affine(1.0, margin)?.relu()?;
    Ok(hinge.sum_all()?.affine(1.0 / (triads.len() * num_classes) as f64, 0.0)?)
}

/// vccib_loss + w · triplet_loss, with triplets taken on the first draw of ẑ.
pub fn combined_loss(
    batch: &BatchForward,
    priors: &PriorTensors,
    triads: &[TriadIndex],
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let mut terms = vccib_loss(batch, priors, cfg)?;
    let trip = triplet_loss_tensor(&batch.latents[0], triads, cfg.margin, priors.num_classes())?;
    terms.total = terms.total.add(&trip.affine(cfg.triplet_weight, 0.0)?)?;
    terms.triplet = Some(trip);
    Ok(terms)
}

/// Uniform random triads: an anchor from a class with at least two samples, a
/// distinct positive from the same class, a negative from any other class.
pub fn mine_triads(labels: &[usize], count: usize, rng: &mut StreamRng) -> Result<Vec<TriadIndex>> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let present = members.iter().filter(|m| !m.is_empty()).count();
    let anchors: Vec<usize> = (0..labels.len()).filter(|&i| members[labels[i]].len() >= 2).collect();
    if present < 2 || anchors.is_empty() {
        return Err(Error::SingleClassBatch);
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let anchor = anchors[rng.random_range(0..anchors.len())];
        let same = &members[labels[anchor]];
        let positive = loop {
            let p = same[rng.random_range(0..same.len())];
            if p != anchor {
                break p;
            }
        };
        let negative = loop {
            let q = rng.random_range(0..labels.len());
            if labels[q] != labels[anchor] {
                break q;
            }
        };
        out.push(TriadIndex { anchor, positive, negative });
    }
    Ok(out)
}
