//! Wireless channel between encoder and decoder.
//!
//! Latents are `2k` reals read as `k` complex symbols `(re, im)`. SNR values
//! are in dB; the complex noise variance per symbol is `P / 10^(snr/10)`,
//! split evenly over the real and imaginary parts.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    #[serde(default = "default_snr_set")]
    pub snr_set_db: Vec<f64>,
    #[serde(default = "default_power")]
    pub transmit_power: f64,
    /// Divide by the fading coefficient at the receiver (perfect CSI).
    #[serde(default = "default_true")]
    pub equalize: bool,
}

fn default_snr_set() -> Vec<f64> {
    vec![1.0, 3.0, 5.0, 7.0, 9.0]
}

fn default_power() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            kind: ChannelKind::Awgn,
            snr_set_db: default_snr_set(),
            transmit_power: default_power(),
            equalize: true,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.transmit_power > 0.0 && self.transmit_power.is_finite()) {
            return Err(Error::Config(format!("transmit power must be positive, got {}", self.transmit_power)));
        }
        if self.snr_set_db.is_empty() {
            return Err(Error::Config("SNR set must not be empty".into()));
        }
        if self.snr_set_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("SNR values must be finite".into()));
        }
        Ok(())
    }
}

/// Fading draws with magnitude below this are redrawn.
pub const MIN_FADING_MAGNITUDE: f64 = 1e-6;

/// Euclidean norm that makes the mean complex-symbol power of `2k` reals equal `power`.
pub fn target_norm(symbols: usize, power: f64) -> f64 {
    (symbols as f64 * power).sqrt()
}

/// Scales `latent` so its mean complex-symbol power equals `power`.
pub fn power_normalize<T: Real>(latent: &[T], power: f64) -> Result<Vec<T>> {
    if latent.is_empty() || !latent.len().is_multiple_of(2) {
        return Err(Error::shape("power_normalize", format!("latent length {} is not a positive even number", latent.len())));
    }
    let norm = latent.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate("cannot normalise an all-zero latent".into()));
    }
    let scale = target_norm(latent.len() / 2, power) / norm;
    Ok(latent.iter().map(|&v| T::lit(v.f64() * scale)).collect())
}

/// Mean power `|x|^2` over the complex symbols of `latent`.
pub fn mean_symbol_power<T: Real>(latent: &[T]) -> f64 {
    let k = latent.len() / 2;
    latent.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / k as f64
}

/// Total complex noise variance per symbol.
pub fn snr_to_noise_variance(snr_db: f64, power: f64) -> f64 {
    power / 10f64.powf(snr_db / 10.0)
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> (f64, f64) {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    (re * s, im * s)
}

/// Passes one power-normalised latent through the channel.
///
/// Rayleigh uses one `h ~ CN(0, 1)` for the whole latent (block fading).
/// Draws with `|h| < MIN_FADING_MAGNITUDE` are redrawn.
pub fn transmit<T: Real, R: Rng + ?Sized>(latent: &[T], cfg: &ChannelConfig, snr_db: f64, rng: &mut R) -> Result<Vec<T>> {
    if !latent.len().is_multiple_of(2) {
        return Err(Error::shape("transmit", "latent length must be even"));
    }
    let sigma2 = snr_to_noise_variance(snr_db, cfg.transmit_power);
    let fading = match cfg.kind {
        ChannelKind::Awgn => None,
        ChannelKind::Rayleigh => loop {
            let h = complex_normal(rng, 1.0);
            if (h.0 * h.0 + h.1 * h.1).sqrt() >= MIN_FADING_MAGNITUDE {
                break Some(h);
            }
        },
    };
    let mut out = Vec::with_capacity(latent.len());
    for pair in latent.chunks(2) {
        let (xr, xi) = (pair[0].f64(), pair[1].f64());
        let (nr, ni) = complex_normal(rng, sigma2);
        let (yr, yi) = match fading {
            None => (xr + nr, xi + ni),
            Some((hr, hi)) => {
                let yr = hr * xr - hi * xi + nr;
                let yi = hr * xi + hi * xr + ni;
                if cfg.equalize {
                    let d = hr * hr + hi * hi;
                    ((yr * hr + yi * hi) / d, (yi * hr - yr * hi) / d)
                } else {
                    (yr, yi)
                }
            }
        };
        out.push(T::lit(yr));
        out.push(T::lit(yi));
    }
    Ok(out)
}

/// SNR reported to the codec for a channel at `snr_db`.
///
/// The codec only sees SNR values from the training set, so side information
/// is clamped to the range of that set while the noise itself uses `snr_db`.
pub fn conditioning_snr(cfg: &ChannelConfig, snr_db: f64) -> f64 {
    let lo = cfg.snr_set_db.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cfg.snr_set_db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo > hi {
        return snr_db;
    }
    snr_db.clamp(lo, hi)
}

/// Uniform draw from the configured SNR set.
pub fn sample_snr<R: Rng + ?Sized>(cfg: &ChannelConfig, rng: &mut R) -> f64 {
    *cfg.snr_set_db.choose(rng).expect("validated non-empty SNR set")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn conditioning_clamps_to_training_range() {
        let cfg = ChannelConfig::default();
        assert_eq!(conditioning_snr(&cfg, 13.0), 9.0);
        assert_eq!(conditioning_snr(&cfg, 0.0), 1.0);
        assert_eq!(conditioning_snr(&cfg, 4.0), 4.0);
    }

    #[test]
    fn normalize_examples() {
        let y = power_normalize(&[3.0f64, 4.0], 1.0).unwrap();
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
        let again = power_normalize(&y, 1.0).unwrap();
        assert!(again.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-7));
        assert!(matches!(power_normalize(&[0.0f64, 0.0], 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn noise_variance_examples() {
        assert_eq!(snr_to_noise_variance(0.0, 1.0), 1.0);
        assert!((snr_to_noise_variance(10.0, 1.0) - 0.1).abs() < 1e-15);
        assert!((snr_to_noise_variance(7.0, 1.0) - 0.199_526_231_496_888).abs() < 1e-12);
    }

    #[test]
    fn noiseless_limits_are_identity() {
        let mut r = rng::stream(3, &[]);
        let x = power_normalize(&(0..64).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(), 1.0).unwrap();
        let awgn = transmit(&x, &ChannelConfig::default(), 200.0, &mut r).unwrap();
        assert!(awgn.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-6));
        let cfg = ChannelConfig { kind: ChannelKind::Rayleigh, ..ChannelConfig::default() };
        let ray = transmit(&x, &cfg, 200.0, &mut r).unwrap();
        assert!(ray.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn unequalized_rayleigh_scales_by_one_coefficient() {
        let cfg = ChannelConfig { kind: ChannelKind::Rayleigh, equalize: false, ..ChannelConfig::default() };
        let x = [1.0f64, 0.0, 0.0, 1.0];
        let y = transmit(&x, &cfg, 300.0, &mut rng::stream(9, &[])).unwrap();
        // (h * 1, h * i) => second symbol is the first rotated by 90 degrees
        assert!((y[2] + y[1]).abs() < 1e-9 && (y[3] - y[0]).abs() < 1e-9);
    }

    #[test]
    fn singleton_snr_set() {
        let cfg = ChannelConfig { snr_set_db: vec![5.0], ..ChannelConfig::default() };
        let mut r = rng::stream(0, &[]);
        assert!((0..100).all(|_| sample_snr(&cfg, &mut r) == 5.0));
    }
}
