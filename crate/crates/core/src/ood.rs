//! Receiver-side detection: per-class log-likelihood scores against the stored
//! prior bank, reconstruction weighting, the thresholded ID/OoD rule, the ODIN
//! baseline score, and rank-based ROC evaluation.

use std::fmt;

use candle_core::{Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{log_likelihood, PriorBank};

/// Reconstruction losses below this are clamped so weighted scores never all tie at 0.
pub const RECON_FLOOR: f64 = 1e-12;

/// Which per-sample score ranks samples for the CCIB detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankingScore {
    /// S′ at the top class.
    #[default]
    Weighted,
    /// S at the top class.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    /// λ; `-inf` accepts everything. When absent from a config file the
    /// threshold calibrated at the end of training is used.
    pub lambda_threshold: Option<f64>,
    pub odin_temperature: f64,
    pub odin_epsilon: f64,
    pub weighting_enabled: bool,
    pub ranking: RankingScore,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            lambda_threshold: None,
            odin_temperature: 1000.0,
            odin_epsilon: 0.0014,
            weighting_enabled: true,
            ranking: RankingScore::Weighted,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.odin_temperature > 0.0) {
            return Err(Error::Config(format!("odin_temperature must be > 0, got {}", self.odin_temperature)));
        }
        if !(self.odin_epsilon >= 0.0) {
            return Err(Error::Config(format!("odin_epsilon must be >= 0, got {}", self.odin_epsilon)));
        }
        if matches!(self.lambda_threshold, Some(l) if l.is_nan()) {
            return Err(Error::Config("lambda_threshold is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Id(usize),
    Ood,
}

impl Decision {
    pub fn is_id(&self) -> bool {
        matches!(self, Decision::Id(_))
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Id(k) => write!(f, "ID:{k}"),
            Decision::Ood => f.write_str("OoD"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub raw_scores: Vec<f64>,
    pub recon_loss: f64,
    pub weighted_scores: Vec<f64>,
    pub top_class: usize,
    pub decision: Decision,
}

impl ScoreRecord {
    pub fn top_weighted(&self) -> f64 {
        self.weighted_scores[self.top_class]
    }

    pub fn top_raw(&self) -> f64 {
        self.raw_scores[self.top_class]
    }

    pub fn ranking_score(&self, ranking: RankingScore) -> f64 {
        match ranking {
            RankingScore::Weighted => self.top_weighted(),
            RankingScore::Raw => self.top_raw(),
        }
    }
}

/// S_c = log N(ẑ | μ_c, Σ_c) for every class in the bank.
pub fn score(z: &[f64], bank: &PriorBank) -> Result<Vec<f64>> {
    bank.priors().iter().map(|g| log_likelihood(z, g)).collect()
}

/// S′_c = l_x · S_c when weighting is enabled, S_c otherwise.
///
/// Multiplying by l_x preserves the class ranking but reverses the ordering
/// between samples wherever S_c > 0, so the weighted detector assumes the
/// log-likelihoods are predominantly negative.
pub fn weight_scores(raw: &[f64], recon_loss: f64, cfg: &DetectionConfig) -> Result<Vec<f64>> {
    if !(recon_loss >= 0.0) {
        return Err(Error::contract(format!("reconstruction loss must be >= 0, got {recon_loss}")));
    }
    if !cfg.weighting_enabled {
        return Ok(raw.to_vec());
    }
    let w = recon_loss.max(RECON_FLOOR);
    Ok(raw.iter().map(|s| w * s).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// ID(k) with k = argmax S′ when S′_k ≥ λ, OoD otherwise.
pub fn detect(weighted: &[f64], lambda: f64) -> Result<(usize, Decision)> {
    if weighted.is_empty() {
        return Err(Error::Empty("score vector"));
    }
    let k = argmax(weighted);
    let decision = if weighted[k] >= lambda { Decision::Id(k) } else { Decision::Ood };
    Ok((k, decision))
}

/// Full per-sample pipeline: score, weight, decide.
pub fn score_record(z: &[f64], recon_loss: f64, bank: &PriorBank, cfg: &DetectionConfig, lambda: f64) -> Result<ScoreRecord> {
    let raw_scores = score(z, bank)?;
    let weighted_scores = weight_scores(&raw_scores, recon_loss, cfg)?;
    let (top_class, decision) = detect(&weighted_scores, lambda)?;
    Ok(ScoreRecord { raw_scores, recon_loss, weighted_scores, top_class, decision })
}

/// max_c softmax(logits / γ)_c, evaluated in f64.
pub fn temperature_max_softmax(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = scaled.iter().map(|s| (s - max).exp()).sum();
    1.0 / denom
}

/// ODIN score for every row of `x`.
///
/// Perturbs x̃ = x − ε·sign(−∇ₓ log max softmax(f(x)/γ)) and returns
/// max softmax(f(x̃)/γ); higher means more in-distribution. `logits_fn` must be
/// a fixed function of its input (any channel noise frozen by the caller) and
/// must treat rows independently.
pub fn odin_scores<F>(logits_fn: F, x: &Tensor, temperature: f64, epsilon: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> candle_core::Result<Tensor>,
{
    if !(epsilon >= 0.0) {
        return Err(Error::contract(format!("ODIN epsilon must be >= 0, got {epsilon}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::contract(format!("ODIN temperature must be > 0, got {temperature}")));
    }
    let perturbed = if epsilon > 0.0 {
        let input = Var::from_tensor(&x.detach())?;
        let logits = logits_fn(input.as_tensor())?;
        let scaled = logits.affine(1.0 / temperature, 0.0)?;
        let log_probs = candle_nn::ops::log_softmax(&scaled, D::Minus1)?;
        let objective = log_probs.max(D::Minus1)?.sum_all()?;
        let grads = objective.backward()?;
        let grad = grads
            .get(input.as_tensor())
            .ok_or_else(|| Error::contract("logits do not depend on the input"))?;
        // x − ε·sign(−∇) = x + ε·sign(∇)
        x.detach().add(&grad.sign()?.affine(epsilon, 0.0)?)?
    } else {
        x.detach()
    };
    let logits = logits_fn(&perturbed)?.detach().to_dtype(candle_core::DType::F64)?;
    let rows: Vec<Vec<f64>> = logits.to_vec2()?;
    Ok(rows.iter().map(|r| temperature_max_softmax(r, temperature)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub false_positive_rate: f64,
    pub true_positive_rate: f64,
    pub threshold: f64,
}

/// P(score_ID > score_OoD) + ½ P(tie), computed from tie groups of the
/// pooled sorted scores (Mann–Whitney U / (n_id · n_ood)).
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::Empty("ID score list"));
    }
    if ood_scores.is_empty() {
        return Err(Error::Empty("OoD score list"));
    }
    if id_scores.iter().chain(ood_scores).any(|s| s.is_nan()) {
        return Err(Error::contract("scores contain NaN"));
    }
    let pooled = pooled_sorted(id_scores, ood_scores);
    let mut u = 0.0f64;
    let mut ood_below = 0.0f64;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        let (mut a, mut b) = (0.0, 0.0);
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            if pooled[j].1 {
                a += 1.0;
            } else {
                b += 1.0;
            }
            j += 1;
        }
        u += a * ood_below + 0.5 * a * b;
        ood_below += b;
        i = j;
    }
    Ok(u / (id_scores.len() as f64 * ood_scores.len() as f64))
}

fn pooled_sorted(id_scores: &[f64], ood_scores: &[f64]) -> Vec<(f64, bool)> {
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|s| (*s, true))
        .chain(ood_scores.iter().map(|s| (*s, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    pooled
}

/// ROC points for "ID if score ≥ threshold", ID being the positive class,
/// from the strictest threshold (+inf) down to the most permissive.
pub fn roc_curve(id_scores: &[f64], ood_scores: &[f64]) -> Result<Vec<RocPoint>> {
    if id_scores.is_empty() {
        return Err(Error::Empty("ID score list"));
    }
    if ood_scores.is_empty() {
        return Err(Error::Empty("OoD score list"));
    }
    let mut pooled = pooled_sorted(id_scores, ood_scores);
    pooled.reverse();
    let (np, nn) = (id_scores.len() as f64, ood_scores.len() as f64);
    let mut points = vec![RocPoint { false_positive_rate: 0.0, true_positive_rate: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == t {
            if pooled[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push(RocPoint { false_positive_rate: fp / nn, true_positive_rate: tp / np, threshold: t });
    }
    Ok(points)
}
