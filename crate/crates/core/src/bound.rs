//! Monte Carlo check of the variational upper bound on a finite toy source.
//!
//! X takes K values, Y = label(X), Z | X is Gaussian and Ẑ = Z + channel
//! noise, so p(ẑ|x), p(ẑ|y) and p(ẑ) are exact finite Gaussian mixtures and
//! every mutual-information term can be estimated by averaging exact
//! log-density ratios over samples (x, ẑ).
//!
//! The chain being checked is
//!
//! ```text
//! β·I(X;Ẑ|Y) − I(Y;Ẑ)  ≤  β·E[KL(p(ẑ|x) ‖ r(ẑ|y))] − E[log q(y|ẑ)] − H(Y)  ≤  L_VCCIB
//! ```
//!
//! The left slack splits into a rate gap E_y KL(p(ẑ|y) ‖ r(ẑ|y)) and a
//! distortion gap E_ẑ KL(p(y|ẑ) ‖ q(y|ẑ)), both non-negative; the right slack is H(Y).

use nalgebra::DMatrix;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gaussian::{kl_diag_to_full, log_likelihood, log_likelihood_diag, GaussianDiag, GaussianFull};
use crate::rng;

pub const LATENT_DIM: usize = 2;
pub const DEFAULT_SAMPLES: usize = 100_000;
pub const MIN_SAMPLES: usize = 10_000;

#[derive(Debug, Clone)]
pub struct ToySource {
    probs: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    encoder: Vec<GaussianDiag>,
    channel_var: f64,
    // p(ẑ|x): encoder Gaussian with the channel variance folded in.
    received: Vec<GaussianDiag>,
}

impl ToySource {
    pub fn new(probs: Vec<f64>, labels: Vec<usize>, num_classes: usize, encoder: Vec<GaussianDiag>, channel_var: f64) -> Result<Self> {
        let k = probs.len();
        if k == 0 {
            return Err(Error::Empty("input support"));
        }
        if labels.len() != k || encoder.len() != k {
            return Err(Error::DimensionMismatch { expected: k, actual: labels.len().min(encoder.len()) });
        }
        if probs.iter().any(|p| !(*p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::contract("p(x) must be non-negative and sum to 1"));
        }
        if !(channel_var >= 0.0) {
            return Err(Error::contract("channel variance must be >= 0"));
        }
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::UnknownLabel { label: *l, classes: num_classes });
        }
        let mut class_mass = vec![0.0; num_classes];
        for (p, l) in probs.iter().zip(&labels) {
            class_mass[*l] += p;
        }
        if let Some(c) = class_mass.iter().position(|m| *m <= 0.0) {
            return Err(Error::DegenerateMixture(format!("class {c} has zero probability")));
        }
        let received = encoder.iter().map(|g| g.inflate(channel_var)).collect::<Result<Vec<_>>>()?;
        Ok(Self { probs, labels, num_classes, encoder, channel_var, received })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn encoder(&self) -> &[GaussianDiag] {
        &self.encoder
    }

    pub fn channel_var(&self) -> f64 {
        self.channel_var
    }

    /// p(y) for every class.
    pub fn class_probs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes];
        for (p, l) in self.probs.iter().zip(&self.labels) {
            out[*l] += p;
        }
        out
    }

    /// H(Y) in nats, closed form.
    pub fn label_entropy(&self) -> f64 {
        self.class_probs().iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
    }

    fn component_log_densities(&self, z: &[f64]) -> Vec<f64> {
        self.received.iter().map(|g| log_likelihood_diag(z, g).expect("latent dimension fixed")).collect()
    }

    /// Exact log p(ẑ|y) for every class and log p(ẑ), from component log-densities.
    fn mixture_log_densities(&self, comp: &[f64]) -> (Vec<f64>, f64) {
        let py = self.class_probs();
        let mut per_class = vec![Vec::new(); self.num_classes];
        let mut all = Vec::with_capacity(comp.len());
        for (i, lc) in comp.iter().enumerate() {
            if self.probs[i] == 0.0 {
                continue;
            }
            let y = self.labels[i];
            per_class[y].push(lc + (self.probs[i] / py[y]).ln());
            all.push(lc + self.probs[i].ln());
        }
        (per_class.iter().map(|v| log_sum_exp(v)).collect(), log_sum_exp(&all))
    }

    /// Exact log p(ẑ | y) for one class.
    pub fn class_conditional_log_density(&self, z: &[f64], y: usize) -> f64 {
        let (per_class, _) = self.mixture_log_densities(&self.component_log_densities(z));
        per_class[y]
    }

    /// Exact log p(y | ẑ) for every class.
    pub fn label_posterior_log(&self, z: &[f64]) -> Vec<f64> {
        let (per_class, lz) = self.mixture_log_densities(&self.component_log_densities(z));
        let py = self.class_probs();
        per_class.iter().zip(&py).map(|(l, p)| l + p.ln() - lz).collect()
    }

    /// Moment-matched Gaussian of p(ẑ | y) per class.
    pub fn moment_matched_priors(&self) -> Vec<GaussianFull> {
        let py = self.class_probs();
        (0..self.num_classes)
            .map(|c| {
                let mut mean = [0.0; LATENT_DIM];
                let mut second = DMatrix::<f64>::zeros(LATENT_DIM, LATENT_DIM);
                for i in (0..self.probs.len()).filter(|i| self.labels[*i] == c) {
                    let w = self.probs[i] / py[c];
                    let g = &self.received[i];
                    for a in 0..LATENT_DIM {
                        mean[a] += w * g.mean()[a];
                        for b in 0..LATENT_DIM {
                            let cov = if a == b { g.var()[a] } else { 0.0 };
                            second[(a, b)] += w * (cov + g.mean()[a] * g.mean()[b]);
                        }
                    }
                }
                let mut cov = second;
                for a in 0..LATENT_DIM {
                    for b in 0..LATENT_DIM {
                        cov[(a, b)] -= mean[a] * mean[b];
                    }
                }
                GaussianFull::new(mean.to_vec(), cov).expect("mixture covariance is positive definite")
            })
            .collect()
    }

    fn sample<R: Rng + ?Sized>(&self, r: &mut R, picker: &WeightedIndex<f64>) -> (usize, Vec<f64>) {
        let x = picker.sample(r);
        let g = &self.received[x];
        let e = rng::standard_normals(r, LATENT_DIM);
        let z = (0..LATENT_DIM).map(|i| g.mean()[i] + g.var()[i].sqrt() * e[i]).collect();
        (x, z)
    }

    /// A random source with K ∈ [2, 6] inputs and C ∈ [2, min(K, 4)] classes.
    pub fn random<R: Rng + ?Sized>(r: &mut R) -> Self {
        let k = r.random_range(2..=6usize);
        let c = r.random_range(2..=k.min(4));
        let mut labels: Vec<usize> = (0..k).map(|i| if i < c { i } else { r.random_range(0..c) }).collect();
        // shuffle so class ids are not tied to symbol order
        for i in (1..k).rev() {
            let j = r.random_range(0..=i);
            labels.swap(i, j);
        }
        let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let drift: f64 = 1.0 - probs.iter().sum::<f64>();
        probs[0] += drift;
        let encoder = (0..k)
            .map(|_| {
                GaussianDiag::new(
                    (0..LATENT_DIM).map(|_| r.random_range(-3.0..3.0)).collect(),
                    (0..LATENT_DIM).map(|_| r.random_range(0.1..1.5)).collect(),
                )
                .expect("positive variances")
            })
            .collect();
        let channel_var = r.random_range(0.01..1.0);
        Self::new(probs, labels, c, encoder, channel_var).expect("random source is valid")
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    fn from_samples(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { mean, std_err: (var / n).sqrt() }
    }

    /// True when the estimate is not below zero by more than `k` standard errors.
    pub fn nonnegative_within(&self, k: f64) -> bool {
        self.mean >= -k * self.std_err
    }

    pub fn zero_within(&self, k: f64) -> bool {
        self.mean.abs() <= k * self.std_err
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiTerms {
    pub conditional_rate: Estimate,
    pub relevance: Estimate,
    pub label_entropy: f64,
}

/// I(X;Ẑ|Y), I(Y;Ẑ) by Monte Carlo over exact log-density ratios, and H(Y) in closed form.
pub fn exact_mi_terms(src: &ToySource, n_mc: usize, seed: u64) -> Result<MiTerms> {
    if n_mc < MIN_SAMPLES {
        return Err(Error::contract(format!("n_mc must be >= {MIN_SAMPLES}, got {n_mc}")));
    }
    let picker = WeightedIndex::new(&src.probs).map_err(|e| Error::DegenerateMixture(e.to_string()))?;
    let mut r = rng::seeded(seed);
    let mut rate = Vec::with_capacity(n_mc);
    let mut rel = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let (x, z) = src.sample(&mut r, &picker);
        let comp = src.component_log_densities(&z);
        let (per_class, lz) = src.mixture_log_densities(&comp);
        let y = src.labels[x];
        rate.push(comp[x] - per_class[y]);
        rel.push(per_class[y] - lz);
    }
    Ok(MiTerms {
        conditional_rate: Estimate::from_samples(&rate),
        relevance: Estimate::from_samples(&rel),
        label_entropy: src.label_entropy(),
    })
}

/// Variational class prior r(ẑ | y).
#[derive(Debug, Clone)]
pub enum VariationalPrior {
    Gaussian(Vec<GaussianFull>),
    /// The true mixture p(ẑ | y); makes the rate gap vanish.
    Exact,
}

/// Variational classifier q(y | ẑ).
#[derive(Debug, Clone)]
pub enum VariationalClassifier {
    /// softmax(W ẑ + b), one row of W and one bias per class.
    Linear { weights: Vec<[f64; LATENT_DIM]>, bias: Vec<f64> },
    /// The true posterior p(y | ẑ); makes the distortion gap vanish.
    Exact,
}

impl VariationalPrior {
    fn log_density(&self, z: &[f64], y: usize, exact_class: f64) -> f64 {
        match self {
            VariationalPrior::Gaussian(g) => log_likelihood(z, &g[y]).expect("latent dimension fixed"),
            VariationalPrior::Exact => exact_class,
        }
    }
}

impl VariationalClassifier {
    fn log_prob(&self, z: &[f64], y: usize, exact: &[f64]) -> f64 {
        match self {
            VariationalClassifier::Linear { weights, bias } => {
                let logits: Vec<f64> = weights
                    .iter()
                    .zip(bias)
                    .map(|(w, b)| w.iter().zip(z).map(|(a, x)| a * x).sum::<f64>() + b)
                    .collect();
                logits[y] - log_sum_exp(&logits)
            }
            VariationalClassifier::Exact => exact[y],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub beta: f64,
    pub n_mc: usize,
    pub conditional_rate: Estimate,
    pub relevance: Estimate,
    pub label_entropy: f64,
    /// E[KL(p(ẑ|x) ‖ r(ẑ|y))] by Monte Carlo on the same draws.
    pub expected_kl: Estimate,
    /// Closed-form E_x KL when r is Gaussian.
    pub expected_kl_closed_form: Option<f64>,
    pub expected_neg_log_q: Estimate,
    /// β·I(X;Ẑ|Y) − I(Y;Ẑ)
    pub objective: Estimate,
    /// β·E KL − E log q − H(Y)
    pub bound: Estimate,
    /// β·E KL − E log q
    pub l_vccib: Estimate,
    /// bound − objective, estimated from paired per-sample differences.
    pub left_gap: Estimate,
    /// L_VCCIB − bound = H(Y), exact.
    pub right_gap: f64,
    pub rate_gap: Estimate,
    pub distortion_gap: Estimate,
    pub sigmas: f64,
}

impl BoundReport {
    pub fn left_holds(&self) -> bool {
        self.left_gap.nonnegative_within(self.sigmas)
            && self.rate_gap.nonnegative_within(self.sigmas)
            && self.distortion_gap.nonnegative_within(self.sigmas)
    }

    pub fn right_holds(&self) -> bool {
        self.right_gap >= 0.0
    }

    pub fn passed(&self) -> bool {
        self.left_holds() && self.right_holds()
    }

    /// Both slack terms indistinguishable from zero.
    pub fn tight(&self) -> bool {
        self.rate_gap.zero_within(self.sigmas) && self.distortion_gap.zero_within(self.sigmas)
    }
}

pub fn verify_bound(
    src: &ToySource,
    prior: &VariationalPrior,
    classifier: &VariationalClassifier,
    beta: f64,
    n_mc: usize,
    seed: u64,
) -> Result<BoundReport> {
    if n_mc < MIN_SAMPLES {
        return Err(Error::contract(format!("n_mc must be >= {MIN_SAMPLES}, got {n_mc}")));
    }
    if !(beta >= 0.0) {
        return Err(Error::contract("beta must be >= 0"));
    }
    if let VariationalPrior::Gaussian(g) = prior {
        if g.len() != src.num_classes || g.iter().any(|p| p.dim() != LATENT_DIM) {
            return Err(Error::DimensionMismatch { expected: src.num_classes, actual: g.len() });
        }
    }
    if let VariationalClassifier::Linear { weights, bias } = classifier {
        if weights.len() != src.num_classes || bias.len() != src.num_classes {
            return Err(Error::DimensionMismatch { expected: src.num_classes, actual: weights.len() });
        }
    }
    let picker = WeightedIndex::new(&src.probs).map_err(|e| Error::DegenerateMixture(e.to_string()))?;
    let mut r = rng::seeded(seed);
    let h_y = src.label_entropy();
    let py = src.class_probs();

    let mut rate = Vec::with_capacity(n_mc);
    let mut rel = Vec::with_capacity(n_mc);
    let mut kl = Vec::with_capacity(n_mc);
    let mut nlq = Vec::with_capacity(n_mc);
    let mut obj = Vec::with_capacity(n_mc);
    let mut bnd = Vec::with_capacity(n_mc);
    let mut lv = Vec::with_capacity(n_mc);
    let mut left = Vec::with_capacity(n_mc);
    let mut rate_gap = Vec::with_capacity(n_mc);
    let mut dist_gap = Vec::with_capacity(n_mc);

    for _ in 0..n_mc {
        let (x, z) = src.sample(&mut r, &picker);
        let y = src.labels[x];
        let comp = src.component_log_densities(&z);
        let (per_class, lz) = src.mixture_log_densities(&comp);
        let log_post: Vec<f64> = per_class.iter().zip(&py).map(|(l, p)| l + p.ln() - lz).collect();

        let lpx = comp[x];
        let lpy = per_class[y];
        let lr = prior.log_density(&z, y, lpy);
        let lq = classifier.log_prob(&z, y, &log_post);

        let a = lpx - lpy;
        let b = lpy - lz;
        let k = lpx - lr;
        rate.push(a);
        rel.push(b);
        kl.push(k);
        nlq.push(-lq);
        obj.push(beta * a - b);
        bnd.push(beta * k - lq - h_y);
        lv.push(beta * k - lq);
        left.push((beta * k - lq - h_y) - (beta * a - b));
        rate_gap.push(lpy - lr);
        dist_gap.push(log_post[y] - lq);
    }

    let expected_kl_closed_form = match prior {
        VariationalPrior::Gaussian(g) => Some(
            src.probs
                .iter()
                .zip(&src.received)
                .zip(&src.labels)
                .map(|((p, post), y)| p * kl_diag_to_full(post, &g[*y]).expect("dimensions checked"))
                .sum(),
        ),
        VariationalPrior::Exact => None,
    };

    Ok(BoundReport {
        beta,
        n_mc,
        conditional_rate: Estimate::from_samples(&rate),
        relevance: Estimate::from_samples(&rel),
        label_entropy: h_y,
        expected_kl: Estimate::from_samples(&kl),
        expected_kl_closed_form,
        expected_neg_log_q: Estimate::from_samples(&nlq),
        objective: Estimate::from_samples(&obj),
        bound: Estimate::from_samples(&bnd),
        l_vccib: Estimate::from_samples(&lv),
        left_gap: Estimate::from_samples(&left),
        right_gap: h_y,
        rate_gap: Estimate::from_samples(&rate_gap),
        distortion_gap: Estimate::from_samples(&dist_gap),
        sigmas: 3.0,
    })
}

/// One randomized bound-check configuration.
#[derive(Debug, Clone)]
pub struct RandomTrial {
    pub index: usize,
    /// Exact prior and classifier instead of perturbed ones.
    pub matched: bool,
    pub source: ToySource,
    pub report: BoundReport,
}

/// Random source, perturbed moment-matched Gaussian priors, random linear classifier.
pub fn random_trial(index: usize, root_seed: u64, n_mc: usize) -> Result<RandomTrial> {
    let mut r = rng::indexed_substream(root_seed, "bound-trial", index as u64);
    let source = ToySource::random(&mut r);
    let priors = source
        .moment_matched_priors()
        .into_iter()
        .map(|g| {
            let shift: Vec<f64> = g.mean().iter().map(|m| m + r.random_range(-1.0..1.0)).collect();
            let scale = r.random_range(0.5..2.0);
            GaussianFull::new(shift, g.cov() * scale)
        })
        .collect::<Result<Vec<_>>>()?;
    let c = source.num_classes();
    let classifier = VariationalClassifier::Linear {
        weights: (0..c).map(|_| [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]).collect(),
        bias: (0..c).map(|_| r.random_range(-1.0..1.0)).collect(),
    };
    let beta = r.random_range(0.0..2.0);
    let seed = r.random();
    let report = verify_bound(&source, &VariationalPrior::Gaussian(priors), &classifier, beta, n_mc, seed)?;
    Ok(RandomTrial { index, matched: false, source, report })
}

/// The source of [`random_trial`] with matched variational distributions, where
/// both slack terms should vanish.
pub fn matched_trial(index: usize, root_seed: u64, n_mc: usize) -> Result<RandomTrial> {
    let mut r = rng::indexed_substream(root_seed, "bound-trial", index as u64);
    let source = ToySource::random(&mut r);
    let mut r = rng::indexed_substream(root_seed, "bound-matched", index as u64);
    let beta = r.random_range(0.0..2.0);
    let seed = r.random();
    let report = verify_bound(&source, &VariationalPrior::Exact, &VariationalClassifier::Exact, beta, n_mc, seed)?;
    Ok(RandomTrial { index, matched: true, source, report })
}

pub const CSV_HEADER: [&str; 24] = [
    "config",
    "variational",
    "inputs",
    "classes",
    "beta",
    "channel_var",
    "i_x_zhat_given_y",
    "i_x_zhat_given_y_se",
    "i_y_zhat",
    "i_y_zhat_se",
    "h_y",
    "expected_kl",
    "expected_kl_closed_form",
    "expected_neg_log_q",
    "objective",
    "bound",
    "l_vccib",
    "left_gap",
    "left_gap_se",
    "right_gap",
    "rate_gap",
    "distortion_gap",
    "pass",
    "tight",
];

pub fn csv_row(trial: &RandomTrial) -> Vec<String> {
    let r = &trial.report;
    vec![
        trial.index.to_string(),
        if trial.matched { "matched".into() } else { "perturbed".into() },
        trial.source.probs().len().to_string(),
        trial.source.num_classes().to_string(),
        format!("{:.6}", r.beta),
        format!("{:.6}", trial.source.channel_var()),
        format!("{:.6}", r.conditional_rate.mean),
        format!("{:.6}", r.conditional_rate.std_err),
        format!("{:.6}", r.relevance.mean),
        format!("{:.6}", r.relevance.std_err),
        format!("{:.6}", r.label_entropy),
        format!("{:.6}", r.expected_kl.mean),
        r.expected_kl_closed_form.map(|v| format!("{v:.6}")).unwrap_or_default(),
        format!("{:.6}", r.expected_neg_log_q.mean),
        format!("{:.6}", r.objective.mean),
        format!("{:.6}", r.bound.mean),
        format!("{:.6}", r.l_vccib.mean),
        format!("{:.6}", r.left_gap.mean),
        format!("{:.6}", r.left_gap.std_err),
        format!("{:.6}", r.right_gap),
        format!("{:.6}", r.rate_gap.mean),
        format!("{:.6}", r.distortion_gap.mean),
        if r.passed() { "1".into() } else { "0".into() },
        if r.tight() { "1".into() } else { "0".into() },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class_source(separation: f64, same_encoder: bool) -> ToySource {
        let enc = |m: f64| GaussianDiag::new(vec![m, 0.0], vec![0.2, 0.2]).unwrap();
        let encoder = if same_encoder {
            vec![enc(0.0); 4]
        } else {
            vec![enc(0.0), enc(separation), enc(2.0 * separation), enc(3.0 * separation)]
        };
        ToySource::new(vec![0.25; 4], vec![0, 0, 1, 1], 2, encoder, 0.05).unwrap()
    }

    #[test]
    fn uniform_four_inputs_two_classes_has_ln2_entropy() {
        let src = two_class_source(1.0, false);
        assert_eq!(src.label_entropy(), 2f64.ln());
    }

    #[test]
    fn identical_encoders_carry_no_information() {
        let src = two_class_source(0.0, true);
        let t = exact_mi_terms(&src, 20_000, 1).unwrap();
        assert!(t.conditional_rate.zero_within(3.0) || t.conditional_rate.mean.abs() < 1e-12);
        assert!(t.relevance.zero_within(3.0) || t.relevance.mean.abs() < 1e-12);
    }

    #[test]
    fn far_apart_classes_recover_label_entropy() {
        let encoder = vec![
            GaussianDiag::new(vec![-50.0, 0.0], vec![0.3, 0.3]).unwrap(),
            GaussianDiag::new(vec![0.0, 50.0], vec![0.3, 0.3]).unwrap(),
            GaussianDiag::new(vec![50.0, 0.0], vec![0.3, 0.3]).unwrap(),
        ];
        let src = ToySource::new(vec![0.5, 0.3, 0.2], vec![0, 1, 2], 3, encoder, 0.1).unwrap();
        let t = exact_mi_terms(&src, 20_000, 2).unwrap();
        let diff = t.relevance.mean - t.label_entropy;
        assert!(diff.abs() <= 3.0 * t.relevance.std_err + 1e-9, "{diff} vs se {}", t.relevance.std_err);
    }

    #[test]
    fn matched_distributions_make_the_bound_tight() {
        let src = two_class_source(1.5, false);
        let rep = verify_bound(&src, &VariationalPrior::Exact, &VariationalClassifier::Exact, 0.7, 20_000, 3).unwrap();
        assert!(rep.tight());
        assert!(rep.left_gap.zero_within(3.0) || rep.left_gap.mean.abs() < 1e-12);
        assert!(rep.passed());
    }

    #[test]
    fn shifted_prior_leaves_strictly_positive_gap() {
        let src = two_class_source(1.5, false);
        let shifted: Vec<GaussianFull> = src
            .moment_matched_priors()
            .into_iter()
            .map(|g| GaussianFull::new(g.mean().iter().map(|m| m + 2.0).collect(), g.cov().clone()).unwrap())
            .collect();
        let rep = verify_bound(&src, &VariationalPrior::Gaussian(shifted), &VariationalClassifier::Exact, 1.0, 20_000, 4).unwrap();
        assert!(rep.passed());
        assert!(rep.left_gap.mean > 3.0 * rep.left_gap.std_err);
        // Closed-form and sampled E[KL] agree.
        let cf = rep.expected_kl_closed_form.unwrap();
        assert!((rep.expected_kl.mean - cf).abs() < 4.0 * rep.expected_kl.std_err + 1e-3);
    }

    #[test]
    fn zero_beta_reduces_to_cross_entropy_versus_conditional_entropy() {
        let src = two_class_source(0.8, false);
        let q = VariationalClassifier::Linear { weights: vec![[0.5, 0.0], [-0.5, 0.1]], bias: vec![0.0, 0.2] };
        let rep = verify_bound(&src, &VariationalPrior::Exact, &q, 0.0, 20_000, 5).unwrap();
        // −I(Y;Ẑ) ≤ E[−log q] − H(Y)  ⇔  E[−log q] ≥ H(Y|Ẑ)
        let h_y_given_z = rep.label_entropy - rep.relevance.mean;
        assert!(rep.expected_neg_log_q.mean >= h_y_given_z - 3.0 * rep.left_gap.std_err);
        assert!(rep.passed());
    }

    #[test]
    fn rejects_small_sample_counts_and_bad_sources() {
        let src = two_class_source(1.0, false);
        assert!(exact_mi_terms(&src, 100, 0).is_err());
        let enc = vec![GaussianDiag::standard(2); 2];
        assert!(matches!(
            ToySource::new(vec![1.0, 0.0], vec![0, 1], 2, enc, 0.1),
            Err(Error::DegenerateMixture(_))
        ));
    }

    #[test]
    fn random_trials_hold() {
        for i in 0..5 {
            let t = random_trial(i, 17, 20_000).unwrap();
            assert!(t.report.passed(), "trial {i}: {:?}", t.report.left_gap);
            let m = matched_trial(i, 17, 20_000).unwrap();
            assert!(m.report.passed() && m.report.tight(), "matched trial {i}");
            assert_eq!(csv_row(&m).len(), CSV_HEADER.len());
        }
    }
}
