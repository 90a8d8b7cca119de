//! Gaussian latent distributions: the encoder's diagonal posterior, the
//! per-class full-covariance priors, and the bank of priors refreshed from
//! received-latent statistics at every epoch boundary.

use std::f64::consts::PI;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_dim, Error, Result};

/// Diagonal shrinkage added to every fitted class covariance.
pub const SHRINKAGE: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal-covariance Gaussian, N(mean, diag(var)).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        ensure_dim(mean.len(), var.len())?;
        if mean.is_empty() {
            return Err(Error::Empty("latent vector"));
        }
        if let Some(v) = var.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::contract(format!("variance entries must be positive and finite, got {v}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::contract("mean entries must be finite"));
        }
        Ok(Self { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// Same distribution with `extra` added to every variance entry.
    pub fn inflate(&self, extra: f64) -> Result<Self> {
        Self::new(self.mean.clone(), self.var.iter().map(|v| v + extra).collect())
    }

    pub fn to_full(&self) -> GaussianFull {
        let cov = DMatrix::from_diagonal(&DVector::from_column_slice(&self.var));
        GaussianFull::new(self.mean.clone(), cov).expect("a valid diagonal Gaussian is positive definite")
    }
}

/// Full-covariance Gaussian with its Cholesky factor, precision and
/// log-determinant cached.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFull {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_det: f64,
}

impl GaussianFull {
    /// Builds from an already symmetric positive-definite covariance.
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let m = mean.len();
        if m == 0 {
            return Err(Error::Empty("latent vector"));
        }
        if cov.nrows() != m || cov.ncols() != m {
            return Err(Error::DimensionMismatch { expected: m, actual: cov.nrows().max(cov.ncols()) });
        }
        let cov = symmetrize(&cov);
        let chol = cov.clone().cholesky().ok_or(Error::Regularization { class: usize::MAX })?;
        let chol_lower = chol.l();
        let log_det = 2.0 * chol_lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let precision = symmetrize(&chol.inverse());
        Ok(Self { mean: DVector::from_vec(mean), cov, chol_lower, precision, log_det })
    }

    /// Symmetrizes `raw_cov` and adds `SHRINKAGE · I` before factorizing.
    pub fn regularized(mean: Vec<f64>, raw_cov: &DMatrix<f64>, class: usize) -> Result<Self> {
        let m = raw_cov.nrows();
        let cov = symmetrize(raw_cov) + DMatrix::identity(m, m) * SHRINKAGE;
        Self::new(mean, cov).map_err(|e| match e {
            Error::Regularization { .. } => Error::Regularization { class },
            other => other,
        })
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(vec![0.0; dim], DMatrix::identity(dim, dim)).expect("identity is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Squared Mahalanobis distance (z − μ)ᵀ Σ⁻¹ (z − μ), via the Cholesky factor.
    pub fn mahalanobis_sq(&self, z: &[f64]) -> Result<f64> {
        ensure_dim(self.dim(), z.len())?;
        let diff = DVector::from_column_slice(z) - &self.mean;
        let y = self
            .chol_lower
            .solve_lower_triangular(&diff)
            .ok_or(Error::Regularization { class: usize::MAX })?;
        Ok(y.norm_squared())
    }

    /// Smallest eigenvalue of the covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        self.cov.clone().symmetric_eigenvalues().min()
    }
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// KL(post ‖ prior) for a diagonal posterior and a full-covariance prior:
/// ½[(μ−μ_c)ᵀΣ_c⁻¹(μ−μ_c) − log det(Σ_c⁻¹Σ) + Tr(Σ_c⁻¹Σ) − m].
pub fn kl_diag_to_full(post: &GaussianDiag, prior: &GaussianFull) -> Result<f64> {
    let m = post.dim();
    ensure_dim(prior.dim(), m)?;
    let quad = prior.mahalanobis_sq(post.mean())?;
    let log_det_post: f64 = post.var().iter().map(|v| v.ln()).sum();
    let trace: f64 = post.var().iter().enumerate().map(|(i, v)| prior.precision[(i, i)] * v).sum();
    Ok(0.5 * (quad + prior.log_det - log_det_post + trace - m as f64))
}

/// Gradient of [`kl_diag_to_full`] with respect to the posterior mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGradient {
    pub value: f64,
    pub d_mean: Vec<f64>,
    pub d_var: Vec<f64>,
}

pub fn kl_diag_to_full_grad(post: &GaussianDiag, prior: &GaussianFull) -> Result<KlGradient> {
    let value = kl_diag_to_full(post, prior)?;
    let diff = DVector::from_column_slice(post.mean()) - prior.mean();
    let d_mean = (&prior.precision * diff).iter().copied().collect();
    let d_var = post
        .var()
        .iter()
        .enumerate()
        .map(|(i, v)| 0.5 * (prior.precision[(i, i)] - 1.0 / v))
        .collect();
    Ok(KlGradient { value, d_mean, d_var })
}

/// log N(z | g.mean, g.cov), normalization constant included.
pub fn log_likelihood(z: &[f64], g: &GaussianFull) -> Result<f64> {
    let quad = g.mahalanobis_sq(z)?;
    Ok(-0.5 * (g.dim() as f64 * LN_2PI + g.log_det + quad))
}

/// Log-density of a diagonal Gaussian; used where the covariance is known diagonal.
pub fn log_likelihood_diag(z: &[f64], g: &GaussianDiag) -> Result<f64> {
    ensure_dim(g.dim(), z.len())?;
    let mut acc = 0.0;
    for ((x, m), v) in z.iter().zip(g.mean()).zip(g.var()) {
        let d = x - m;
        acc += d * d / v + v.ln() + (2.0 * PI).ln();
    }
    Ok(-0.5 * acc)
}

/// Per-class priors r(ẑ | y = c) indexed by class label, tagged with the epoch
/// whose received latents produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBank {
    priors: Vec<GaussianFull>,
    epoch_tag: u32,
}

impl PriorBank {
    pub fn new(priors: Vec<GaussianFull>, epoch_tag: u32) -> Result<Self> {
        let first = priors.first().ok_or(Error::Empty("prior bank"))?;
        let m = first.dim();
        for p in &priors {
            ensure_dim(m, p.dim())?;
        }
        Ok(Self { priors, epoch_tag })
    }

    /// N(0, I) for every class; the bank used before any statistics exist.
    pub fn standard_normal(num_classes: usize, dim: usize) -> Self {
        Self { priors: vec![GaussianFull::standard(dim); num_classes], epoch_tag: 0 }
    }

    pub fn num_classes(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.priors[0].dim()
    }

    pub fn epoch_tag(&self) -> u32 {
        self.epoch_tag
    }

    pub fn priors(&self) -> &[GaussianFull] {
        &self.priors
    }

    pub fn get(&self, label: usize) -> Result<&GaussianFull> {
        self.priors
            .get(label)
            .ok_or(Error::UnknownLabel { label, classes: self.priors.len() })
    }

    /// Little-endian layout: class count, dimension, epoch tag, the class-label
    /// index table, then per class the mean and the row-major covariance as f64.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let m = self.dim();
        w.write_u32::<LittleEndian>(self.priors.len() as u32)?;
        w.write_u32::<LittleEndian>(m as u32)?;
        w.write_u32::<LittleEndian>(self.epoch_tag)?;
        for label in 0..self.priors.len() {
            w.write_u32::<LittleEndian>(label as u32)?;
        }
        for p in &self.priors {
            for v in p.mean().iter() {
                w.write_f64::<LittleEndian>(*v)?;
            }
            for r in 0..m {
                for c in 0..m {
                    w.write_f64::<LittleEndian>(p.cov()[(r, c)])?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let classes = r.read_u32::<LittleEndian>()? as usize;
        let m = r.read_u32::<LittleEndian>()? as usize;
        let epoch_tag = r.read_u32::<LittleEndian>()?;
        if classes == 0 || m == 0 {
            return Err(Error::Checkpoint("prior bank with zero classes or zero dimension".into()));
        }
        let mut labels = Vec::with_capacity(classes);
        for _ in 0..classes {
            labels.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let mut slots: Vec<Option<GaussianFull>> = vec![None; classes];
        for (pos, label) in labels.iter().enumerate() {
            let mut mean = vec![0.0; m];
            r.read_f64_into::<LittleEndian>(&mut mean)?;
            let mut cov = vec![0.0; m * m];
            r.read_f64_into::<LittleEndian>(&mut cov)?;
            let cov = DMatrix::from_row_slice(m, m, &cov);
            let g = GaussianFull::new(mean, cov).map_err(|e| match e {
                Error::Regularization { .. } => Error::Regularization { class: *label },
                other => other,
            })?;
            let slot = slots
                .get_mut(*label)
                .ok_or_else(|| Error::Checkpoint(format!("label {label} at position {pos} out of range")))?;
            *slot = Some(g);
        }
        let priors = slots
            .into_iter()
            .enumerate()
            .map(|(c, g)| g.ok_or_else(|| Error::Checkpoint(format!("class {c} missing from label table"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(priors, epoch_tag)
    }
}

/// Streaming per-class first and second moments of received latents.
#[derive(Debug, Clone)]
pub struct ClassStatistics {
    dim: usize,
    counts: Vec<usize>,
    sums: Vec<DVector<f64>>,
    second: Vec<DMatrix<f64>>,
}

impl ClassStatistics {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        Self {
            dim,
            counts: vec![0; num_classes],
            sums: vec![DVector::zeros(dim); num_classes],
            second: vec![DMatrix::zeros(dim, dim); num_classes],
        }
    }

    pub fn push(&mut self, z: &[f64], label: usize) -> Result<()> {
        ensure_dim(self.dim, z.len())?;
        let classes = self.counts.len();
        if label >= classes {
            return Err(Error::UnknownLabel { label, classes });
        }
        let v = DVector::from_column_slice(z);
        self.second[label].ger(1.0, &v, &v, 1.0);
        self.sums[label] += v;
        self.counts[label] += 1;
        Ok(())
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Mean E[Ẑ|y=c] and the pre-shrinkage covariance E[ẐẐᵀ|y=c] − μμᵀ
    /// (population normalization).
    pub fn moments(&self, class: usize) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let n = *self.counts.get(class)?;
        if n == 0 {
            return None;
        }
        let mean = &self.sums[class] / n as f64;
        let cov = &self.second[class] / n as f64 - &mean * mean.transpose();
        Some((mean, cov))
    }

    pub fn finish(&self, epoch_tag: u32) -> Result<PriorBank> {
        let missing: Vec<usize> = (0..self.counts.len()).filter(|c| self.counts[*c] == 0).collect();
        if !missing.is_empty() {
            return Err(Error::MissingClasses(missing));
        }
        if let Some((class, &count)) = self.counts.iter().enumerate().find(|(_, n)| **n < 2) {
            return Err(Error::InsufficientSamples { class, count });
        }
        let priors = (0..self.counts.len())
            .map(|c| {
                let (mean, cov) = self.moments(c).expect("class has samples");
                GaussianFull::regularized(mean.iter().copied().collect(), &cov, c)
            })
            .collect::<Result<Vec<_>>>()?;
        PriorBank::new(priors, epoch_tag)
    }
}

/// Fits one regularized Gaussian per class from labelled latents.
pub fn fit_class_statistics(
    latents: &[(Vec<f64>, usize)],
    num_classes: usize,
    epoch_tag: u32,
) -> Result<PriorBank> {
    let dim = latents.first().ok_or(Error::Empty("latent list"))?.0.len();
    let mut stats = ClassStatistics::new(num_classes, dim);
    for (z, label) in latents {
        stats.push(z, *label)?;
    }
    stats.finish(epoch_tag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_spd(rng: &mut impl Rng, m: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(m, m) * 0.3
    }

    // Cofactor expansion and adjugate inverse on 3x3, no factorization involved.
    fn det3(a: &[[f64; 3]; 3]) -> f64 {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }

    fn inv3(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let d = det3(a);
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
                let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
                *cell = (a[r1][c1] * a[r2][c2] - a[r1][c2] * a[r2][c1]) / d;
            }
        }
        out
    }

    #[test]
    fn kl_identical_is_zero() {
        let post = GaussianDiag::new(vec![0.0], vec![1.0]).unwrap();
        let prior = GaussianFull::standard(1);
        assert!(kl_diag_to_full(&post, &prior).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_shifted_mean_is_half_norm() {
        let post = GaussianDiag::new(vec![1.0, 0.0], vec![1.0, 1.0]).unwrap();
        let kl = kl_diag_to_full(&post, &GaussianFull::standard(2)).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_doubled_variance_matches_monte_carlo() {
        // Oracle: E_p[log p − log q] over 10⁶ draws of p = N(0, 2I).
        let post = GaussianDiag::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let prior = GaussianFull::standard(2);
        let mut rng = rng::seeded(11);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let e = rng::standard_normals(&mut rng, 2);
            let z = [e[0] * 2f64.sqrt(), e[1] * 2f64.sqrt()];
            let lp = -0.5 * (z[0] * z[0] / 2.0 + z[1] * z[1] / 2.0) - (2.0 * PI * 2.0).ln();
            let lq = -0.5 * (z[0] * z[0] + z[1] * z[1]) - (2.0 * PI).ln();
            acc += lp - lq;
        }
        let mc = acc / n as f64;
        assert!((mc - 0.306_852_819_440_054_7).abs() < 1e-2, "mc = {mc}");
        let kl = kl_diag_to_full(&post, &prior).unwrap();
        assert!((kl - (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!((kl - mc).abs() < 1e-2);
    }

    #[test]
    fn kl_rejects_dimension_mismatch() {
        let post = GaussianDiag::standard(2);
        assert!(matches!(
            kl_diag_to_full(&post, &GaussianFull::standard(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn singular_prior_reports_regularization_failure() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(GaussianFull::new(vec![0.0; 2], cov), Err(Error::Regularization { .. })));
        let bad = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            GaussianFull::regularized(vec![0.0; 2], &bad, 4),
            Err(Error::Regularization { class: 4 })
        ));
    }

    #[test]
    fn diag_rejects_nonpositive_variance() {
        assert!(GaussianDiag::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianDiag::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn log_likelihood_simple_values() {
        let g = GaussianFull::standard(1);
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        assert!((log_likelihood(&[0.0], &g).unwrap() + half_ln_2pi).abs() < 1e-12);
        assert!((log_likelihood(&[1.0], &g).unwrap() + half_ln_2pi + 0.5).abs() < 1e-12);
        assert!(log_likelihood(&[1.0, 2.0], &g).is_err());
    }

    #[test]
    fn log_likelihood_matches_cofactor_oracle_3d() {
        let mut rng = rng::seeded(3);
        for _ in 0..20 {
            let cov = random_spd(&mut rng, 3);
            let mean: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a = [
                [cov[(0, 0)], cov[(0, 1)], cov[(0, 2)]],
                [cov[(1, 0)], cov[(1, 1)], cov[(1, 2)]],
                [cov[(2, 0)], cov[(2, 1)], cov[(2, 2)]],
            ];
            let inv = inv3(&a);
            let d: Vec<f64> = (0..3).map(|i| z[i] - mean[i]).collect();
            let mut quad = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    quad += d[r] * inv[r][c] * d[c];
                }
            }
            let oracle = -0.5 * (3.0 * (2.0 * PI).ln() + det3(&a).ln() + quad);
            let g = GaussianFull::new(mean, cov).unwrap();
            assert!((log_likelihood(&z, &g).unwrap() - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn density_integrates_to_one_in_1d() {
        let g = GaussianFull::new(vec![0.3], DMatrix::from_element(1, 1, 0.7)).unwrap();
        let (lo, hi, n) = (-12.0, 12.0, 24_000);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * log_likelihood(&[x], &g).unwrap().exp();
        }
        assert!((total * h - 1.0).abs() < 1e-3);
    }

    #[test]
    fn fit_two_points() {
        let latents = vec![(vec![0.0, 0.0], 0), (vec![2.0, 2.0], 0)];
        let mut stats = ClassStatistics::new(1, 2);
        for (z, c) in &latents {
            stats.push(z, *c).unwrap();
        }
        let (mean, cov) = stats.moments(0).unwrap();
        // Two-pass: mean (1,1), centered points (−1,−1),(1,1) → cov entries (1+1)/2.
        assert_eq!(mean.as_slice(), &[1.0, 1.0]);
        for v in cov.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let bank = fit_class_statistics(&latents, 1, 3).unwrap();
        assert_eq!(bank.epoch_tag(), 3);
        assert!((bank.get(0).unwrap().cov()[(0, 0)] - (1.0 + SHRINKAGE)).abs() < 1e-12);
        assert!((bank.get(0).unwrap().cov()[(0, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_identical_latents_gives_shrinkage_only() {
        let latents = vec![(vec![0.5, -0.5], 0); 5];
        let bank = fit_class_statistics(&latents, 1, 1).unwrap();
        let cov = bank.get(0).unwrap().cov();
        let expected = DMatrix::identity(2, 2) * SHRINKAGE;
        assert!((cov - expected).abs().max() < 1e-15);
    }

    #[test]
    fn fit_recovers_mean_of_known_gaussian() {
        let mut rng = rng::seeded(5);
        let cov = random_spd(&mut rng, 3);
        let mu = [1.0, -2.0, 0.5];
        let l = cov.clone().cholesky().unwrap().l();
        let n = 1000;
        let latents: Vec<(Vec<f64>, usize)> = (0..n)
            .map(|_| {
                let e = DVector::from_vec(rng::standard_normals(&mut rng, 3));
                let z = &l * e;
                ((0..3).map(|i| z[i] + mu[i]).collect(), 0)
            })
            .collect();
        let bank = fit_class_statistics(&latents, 1, 1).unwrap();
        let fitted = bank.get(0).unwrap();
        for i in 0..3 {
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!((fitted.mean()[i] - mu[i]).abs() < 5.0 * se);
        }
    }

    #[test]
    fn fit_errors() {
        let latents = vec![(vec![0.0], 0), (vec![1.0], 0), (vec![1.0], 2), (vec![3.0], 2)];
        assert!(matches!(fit_class_statistics(&latents, 4, 1), Err(Error::MissingClasses(v)) if v == vec![1, 3]));
        let latents = vec![(vec![0.0], 0), (vec![1.0], 0), (vec![1.0], 1)];
        assert!(matches!(
            fit_class_statistics(&latents, 2, 1),
            Err(Error::InsufficientSamples { class: 1, count: 1 })
        ));
    }

    #[test]
    fn bank_round_trips_through_bytes() {
        let mut rng = rng::seeded(9);
        let priors = (0..3)
            .map(|_| GaussianFull::new(vec![rng.random(), rng.random()], random_spd(&mut rng, 2)).unwrap())
            .collect();
        let bank = PriorBank::new(priors, 4).unwrap();
        let mut buf = Vec::new();
        bank.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 3 * 4 + 3 * (2 + 4) * 8);
        let back = PriorBank::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.epoch_tag(), 4);
        for (a, b) in bank.priors().iter().zip(back.priors()) {
            assert_eq!(a.mean(), b.mean());
            assert_eq!(a.cov(), b.cov());
        }
    }

    fn diag_strategy(m: usize) -> impl Strategy<Value = GaussianDiag> {
        (prop::collection::vec(-3.0..3.0f64, m), prop::collection::vec(0.05..4.0f64, m))
            .prop_map(|(mean, var)| GaussianDiag::new(mean, var).unwrap())
    }

    fn full_strategy(m: usize) -> impl Strategy<Value = GaussianFull> {
        (prop::collection::vec(-3.0..3.0f64, m), prop::collection::vec(-1.0..1.0f64, m * m)).prop_map(
            move |(mean, a)| {
                let a = DMatrix::from_row_slice(m, m, &a);
                GaussianFull::new(mean, &a * a.transpose() + DMatrix::identity(m, m) * 0.1).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative((p, q) in (1usize..6).prop_flat_map(|m| (diag_strategy(m), full_strategy(m)))) {
            prop_assert!(kl_diag_to_full(&p, &q).unwrap() >= -1e-9);
        }

        #[test]
        fn kl_to_itself_is_zero(p in (1usize..8).prop_flat_map(diag_strategy)) {
            prop_assert!(kl_diag_to_full(&p, &p.to_full()).unwrap().abs() < 1e-9);
        }

        #[test]
        fn kl_mean_gradient_matches_central_differences(
            (p, q) in (1usize..5).prop_flat_map(|m| (diag_strategy(m), full_strategy(m)))
        ) {
            let g = kl_diag_to_full_grad(&p, &q).unwrap();
            let h = 1e-4;
            for i in 0..p.dim() {
                let mut up = p.mean().to_vec();
                up[i] += h;
                let mut dn = p.mean().to_vec();
                dn[i] -= h;
                let fu = kl_diag_to_full(&GaussianDiag::new(up, p.var().to_vec()).unwrap(), &q).unwrap();
                let fd = kl_diag_to_full(&GaussianDiag::new(dn, p.var().to_vec()).unwrap(), &q).unwrap();
                let fdiff = (fu - fd) / (2.0 * h);
                let scale = g.d_mean[i].abs().max(fdiff.abs()).max(1e-6);
                prop_assert!((g.d_mean[i] - fdiff).abs() / scale < 1e-3);
            }
            for i in 0..p.dim() {
                let mut up = p.var().to_vec();
                up[i] += h;
                let mut dn = p.var().to_vec();
                dn[i] -= h;
                let fu = kl_diag_to_full(&GaussianDiag::new(p.mean().to_vec(), up).unwrap(), &q).unwrap();
                let fd = kl_diag_to_full(&GaussianDiag::new(p.mean().to_vec(), dn).unwrap(), &q).unwrap();
                let fdiff = (fu - fd) / (2.0 * h);
                let scale = g.d_var[i].abs().max(fdiff.abs()).max(1e-6);
                prop_assert!((g.d_var[i] - fdiff).abs() / scale < 1e-3);
            }
        }

        #[test]
        fn fitted_covariances_respect_shrinkage_floor(
            pts in prop::collection::vec((prop::collection::vec(-2.0..2.0f64, 3), 0usize..2), 6..40)
        ) {
            let mut pts = pts;
            pts.extend([(vec![0.0; 3], 0), (vec![0.1; 3], 0), (vec![0.0; 3], 1), (vec![-0.1; 3], 1)]);
            let bank = fit_class_statistics(&pts, 2, 1).unwrap();
            for g in bank.priors() {
                prop_assert!(g.min_eigenvalue() >= SHRINKAGE * (1.0 - 1e-6));
            }
        }
    }
}
