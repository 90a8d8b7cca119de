//! AWGN channel parameterized by peak signal-to-noise ratio, the peak-power
//! symbol mapping applied to the encoder's sigmoid outputs, and the
//! symbol-rate latency model (one real symbol per latent dimension).

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_SYMBOL_RATE: f64 = 9600.0;

/// σ² = P / 10^(PSNR/10).
pub fn psnr_to_noise_var(psnr_db: f64, peak_power: f64) -> Result<f64> {
    if !(peak_power > 0.0 && peak_power.is_finite()) {
        return Err(Error::contract(format!("peak power must be positive, got {peak_power}")));
    }
    if psnr_db.is_nan() || psnr_db == f64::NEG_INFINITY {
        return Err(Error::contract(format!("psnr must be a number or +inf, got {psnr_db}")));
    }
    Ok(peak_power / 10f64.powf(psnr_db / 10.0))
}

pub fn noise_var_to_psnr(noise_var: f64, peak_power: f64) -> f64 {
    10.0 * (peak_power / noise_var).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChannelSection", into = "ChannelSection")]
pub struct ChannelConfig {
    psnr_db: f64,
    peak_power: f64,
    noise_var: f64,
    symbol_rate: f64,
}

impl ChannelConfig {
    /// `psnr_db = f64::INFINITY` is the noiseless sentinel.
    pub fn new(psnr_db: f64, peak_power: f64, symbol_rate: f64) -> Result<Self> {
        let noise_var = psnr_to_noise_var(psnr_db, peak_power)?;
        if !(symbol_rate > 0.0 && symbol_rate.is_finite()) {
            return Err(Error::contract(format!("symbol rate must be positive, got {symbol_rate}")));
        }
        Ok(Self { psnr_db, peak_power, noise_var, symbol_rate })
    }

    pub fn noiseless(peak_power: f64) -> Result<Self> {
        Self::new(f64::INFINITY, peak_power, DEFAULT_SYMBOL_RATE)
    }

    pub fn psnr_db(&self) -> f64 {
        self.psnr_db
    }

    pub fn peak_power(&self) -> f64 {
        self.peak_power
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_var.sqrt()
    }

    pub fn symbol_rate(&self) -> f64 {
        self.symbol_rate
    }

    pub fn is_noiseless(&self) -> bool {
        self.noise_var == 0.0
    }

    /// Same power and rate at a different test-time PSNR.
    pub fn with_psnr(&self, psnr_db: f64) -> Result<Self> {
        Self::new(psnr_db, self.peak_power, self.symbol_rate)
    }
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::new(20.0, 1.0, DEFAULT_SYMBOL_RATE).expect("valid default channel")
    }
}

/// Config-file form of [`ChannelConfig`]; the noise variance is always derived.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelSection {
    psnr_db: f64,
    #[serde(default = "one")]
    peak_power: f64,
    #[serde(default = "default_rate")]
    symbol_rate: f64,
}

fn one() -> f64 {
    1.0
}

fn default_rate() -> f64 {
    DEFAULT_SYMBOL_RATE
}

impl TryFrom<ChannelSection> for ChannelConfig {
    type Error = Error;

    fn try_from(s: ChannelSection) -> Result<Self> {
        ChannelConfig::new(s.psnr_db, s.peak_power, s.symbol_rate)
    }
}

impl From<ChannelConfig> for ChannelSection {
    fn from(c: ChannelConfig) -> Self {
        ChannelSection { psnr_db: c.psnr_db, peak_power: c.peak_power, symbol_rate: c.symbol_rate }
    }
}

/// √P · (2a − 1) for sigmoid activations a ∈ (0, 1).
pub fn power_map(activations: &[f64], peak_power: f64) -> Result<Vec<f64>> {
    if !(peak_power > 0.0) {
        return Err(Error::contract("peak power must be positive"));
    }
    let amp = peak_power.sqrt();
    activations
        .iter()
        .map(|&a| {
            if a > 0.0 && a < 1.0 {
                Ok(amp * (2.0 * a - 1.0))
            } else {
                Err(Error::contract(format!("activation {a} outside (0, 1)")))
            }
        })
        .collect()
}

/// Tensor form of [`power_map`], differentiable in `activations`.
pub fn power_map_tensor(activations: &Tensor, peak_power: f64) -> Result<Tensor> {
    let amp = peak_power.sqrt();
    Ok(activations.affine(2.0 * amp, -amp)?)
}

/// symbols + ε, ε ~ N(0, σ²I), seeded.
pub fn transmit(symbols: &[f64], cfg: &ChannelConfig, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    transmit_with(symbols, cfg, &mut r)
}

pub fn transmit_with<R: Rng + ?Sized>(symbols: &[f64], cfg: &ChannelConfig, r: &mut R) -> Vec<f64> {
    if cfg.is_noiseless() {
        return symbols.to_vec();
    }
    let std = cfg.noise_std();
    rng::standard_normals(r, symbols.len())
        .into_iter()
        .zip(symbols)
        .map(|(e, s)| s + std * e)
        .collect()
}

/// Adds σ·noise to `symbols`, where `noise` is a standard normal tensor drawn
/// by the caller; the noise is a constant under differentiation.
pub fn transmit_tensor(symbols: &Tensor, cfg: &ChannelConfig, noise: &Tensor) -> Result<Tensor> {
    if cfg.is_noiseless() {
        return Ok(symbols.clone());
    }
    Ok(symbols.add(&noise.affine(cfg.noise_std(), 0.0)?)?)
}

/// Seconds to send `dim` real symbols at the configured symbol rate.
pub fn latency(dim: usize, cfg: &ChannelConfig) -> Result<f64> {
    if dim == 0 {
        return Err(Error::contract("latency needs at least one transmitted dimension"));
    }
    Ok(dim as f64 / cfg.symbol_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn psnr_examples() {
        assert!((psnr_to_noise_var(20.0, 1.0).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(psnr_to_noise_var(0.0, 1.0).unwrap(), 1.0);
        assert!((psnr_to_noise_var(10.0, 2.0).unwrap() - 0.2).abs() < 1e-15);
        assert!(psnr_to_noise_var(10.0, 0.0).is_err());
        assert!(psnr_to_noise_var(10.0, -1.0).is_err());
    }

    #[test]
    fn config_invariant_holds_exactly() {
        let c = ChannelConfig::new(13.0, 3.0, 9600.0).unwrap();
        assert_eq!(c.noise_var(), 3.0 / 10f64.powf(1.3));
        assert!(ChannelConfig::new(10.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn power_map_examples() {
        assert_eq!(power_map(&[0.5; 4], 1.0).unwrap(), vec![0.0; 4]);
        let s = power_map(&[1.0 - 1e-12], 4.0).unwrap()[0];
        assert!(s < 2.0 && (s - 2.0).abs() < 1e-9);
        assert!(power_map(&[1.0], 1.0).is_err());
        assert!(power_map(&[0.0], 1.0).is_err());
        assert!(power_map(&[0.3], 0.0).is_err());
    }

    #[test]
    fn power_map_stays_inside_peak_amplitude() {
        let mut r = rng::seeded(1);
        let mut worst = 0.0f64;
        for _ in 0..1_000_000 {
            let a: f64 = r.random();
            if a == 0.0 {
                continue;
            }
            worst = worst.max(power_map(&[a], 1.0).unwrap()[0].abs());
        }
        assert!(worst < 1.0);
    }

    #[test]
    fn noiseless_transmit_is_identity() {
        let cfg = ChannelConfig::noiseless(1.0).unwrap();
        assert_eq!(cfg.noise_var(), 0.0);
        let s = vec![0.3, -0.7, 0.9];
        assert_eq!(transmit(&s, &cfg, 4), s);
    }

    #[test]
    fn transmit_is_deterministic_per_seed() {
        let cfg = ChannelConfig::new(5.0, 1.0, 9600.0).unwrap();
        let s = vec![0.1; 32];
        assert_eq!(transmit(&s, &cfg, 77), transmit(&s, &cfg, 77));
        assert_ne!(transmit(&s, &cfg, 77), transmit(&s, &cfg, 78));
    }

    #[test]
    fn transmit_noise_statistics() {
        let cfg = ChannelConfig::new(0.0, 1.0, 9600.0).unwrap();
        let n = 100_000;
        let out = transmit(&vec![0.0; n], &cfg, 2024);
        let mean = out.iter().sum::<f64>() / n as f64;
        let var = out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() < 0.03);
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert_eq!(out.len(), n);
    }

    #[test]
    fn latency_examples() {
        let cfg = ChannelConfig::default();
        assert_eq!(latency(64, &cfg).unwrap(), 64.0 / 9600.0);
        assert!((latency(64, &cfg).unwrap() - 6.667e-3).abs() < 1e-6);
        assert_eq!(latency(9600, &cfg).unwrap(), 1.0);
        assert!((latency(32, &cfg).unwrap() - 3.333e-3).abs() < 1e-6);
        assert!(latency(0, &cfg).is_err());
    }

    #[test]
    fn config_parses_from_toml_section() {
        let c: ChannelConfig = toml::from_str("psnr_db = 10.0\npeak_power = 2.0").unwrap();
        assert!((c.noise_var() - 0.2).abs() < 1e-15);
        assert_eq!(c.symbol_rate(), 9600.0);
        assert!(toml::from_str::<ChannelConfig>("psnr_db = 10.0\npeak_power = -2.0").is_err());
    }

    proptest! {
        #[test]
        fn psnr_round_trip(psnr in -30.0..60.0f64, p in 0.01..100.0f64) {
            let nv = psnr_to_noise_var(psnr, p).unwrap();
            prop_assert!((noise_var_to_psnr(nv, p) - psnr).abs() < 1e-9);
        }

        #[test]
        fn latency_is_linear(d in 1usize..100_000) {
            let cfg = ChannelConfig::default();
            prop_assert_eq!(latency(2 * d, &cfg).unwrap(), 2.0 * latency(d, &cfg).unwrap());
        }

        #[test]
        fn power_map_is_monotone(a in 0.001..0.998f64, b in 0.0001..0.001f64, p in 0.1..10.0f64) {
            let s = power_map(&[a, a + b], p).unwrap();
            prop_assert!(s[0] < s[1]);
            prop_assert!(s[1].abs() <= p.sqrt());
        }
    }
}
