//! Periodicity scoring and fusion-weight diagnostics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PfrpError, Result};
use crate::io::write_atomic;
use crate::predictor::PfrpPrediction;

pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodicityConfig {
    pub lags: Vec<usize>,
    pub bins: usize,
}

impl PeriodicityConfig {
    /// Day and week lags for a sampling interval; `None` for unknown labels.
    pub fn for_freq(freq: &str) -> Option<Self> {
        let lags = match freq {
            "1h" | "h" | "60min" => vec![24, 168],
            "15min" | "15m" => vec![96, 672],
            "10min" | "10m" => vec![144, 1008],
            _ => return None,
        };
        Some(Self { lags, bins: DEFAULT_BINS })
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if self.lags.is_empty() {
            return Err(PfrpError::invalid("at least one lag is required"));
        }
        if let Some(&bad) = self.lags.iter().find(|&&l| l == 0 || l >= len) {
            return Err(PfrpError::invalid(format!("lag {bad} outside [1, {len})")));
        }
        if self.bins < 2 {
            return Err(PfrpError::invalid("bin count must be at least 2"));
        }
        Ok(())
    }
}

impl Default for PeriodicityConfig {
    fn default() -> Self {
        Self::for_freq("1h").expect("hourly lags")
    }
}

/// Sample autocorrelation at `lag`, normalized by the full-length variance sum.
pub fn acf(x: &[f64], lag: usize) -> Result<f64> {
    if lag == 0 || lag >= x.len() {
        return Err(PfrpError::invalid(format!("lag {lag} outside [1, {})", x.len())));
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let denom: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if denom / x.len() as f64 <= 1e-12 {
        return Err(PfrpError::data("autocorrelation of a constant series"));
    }
    let num: f64 = x.iter().zip(&x[lag..]).map(|(a, b)| (a - mean) * (b - mean)).sum();
    Ok(num / denom)
}

/// Shannon entropy of an equal-width histogram over `[min, max]`, divided by `ln bins`.
pub fn normalized_entropy(x: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(PfrpError::invalid("bin count must be at least 2"));
    }
    if x.is_empty() {
        return Err(PfrpError::invalid("entropy of an empty series"));
    }
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Ok(0.0);
    }
    let mut counts = vec![0usize; bins];
    for &v in x {
        let b = ((v - lo) / (hi - lo) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let n = x.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok((h / (bins as f64).ln()).clamp(0.0, 1.0))
}

pub fn inv_entropy(x: &[f64], bins: usize) -> Result<f64> {
    Ok(1.0 - normalized_entropy(x, bins)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicityReport {
    pub lags: Vec<usize>,
    pub acf: Vec<f64>,
    /// Mean ACF over the lags, clamped at 0.
    pub acf_score: f64,
    pub entropy: f64,
    pub inv_entropy: f64,
    pub score: f64,
}

pub fn periodicity_score(x: &[f64], config: &PeriodicityConfig) -> Result<PeriodicityReport> {
    config.validate(x.len())?;
    let acf_values = config.lags.iter().map(|&l| acf(x, l)).collect::<Result<Vec<_>>>()?;
    let acf_score = (acf_values.iter().sum::<f64>() / acf_values.len() as f64).max(0.0);
    let entropy = normalized_entropy(x, config.bins)?;
    let inv = 1.0 - entropy;
    Ok(PeriodicityReport {
        lags: config.lags.clone(),
        acf: acf_values,
        acf_score,
        entropy,
        inv_entropy: inv,
        score: (acf_score * inv).clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub count: usize,
    pub mean_w1: f64,
    pub std_w1: f64,
    pub min_w1: f64,
    pub median_w1: f64,
    pub max_w1: f64,
    /// Ten equal-width bins over [0, 1].
    pub histogram: Vec<usize>,
}

/// Summary statistics of the global-branch fusion weight.
pub fn weight_report(predictions: &[PfrpPrediction]) -> Result<WeightSummary> {
    weight_summary(&predictions.iter().map(|p| p.fusion.0).collect::<Vec<_>>())
}

pub fn weight_summary(w1: &[f64]) -> Result<WeightSummary> {
    if w1.is_empty() {
        return Err(PfrpError::invalid("weight report over no predictions"));
    }
    let n = w1.len() as f64;
    let mean = w1.iter().sum::<f64>() / n;
    let var = w1.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n;
    let mut sorted = w1.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    let mut histogram = vec![0; 10];
    for &w in w1 {
        histogram[((w * 10.0) as usize).min(9)] += 1;
    }
    Ok(WeightSummary {
        count: w1.len(),
        mean_w1: mean,
        std_w1: var.sqrt(),
        min_w1: sorted[0],
        median_w1: median,
        max_w1: sorted[sorted.len() - 1],
        histogram,
    })
}

/// Writes `index,w1` rows.
pub fn write_weight_csv(path: &Path, predictions: &[PfrpPrediction]) -> Result<()> {
    let mut out = String::from("index,w1\n");
    for (i, p) in predictions.iter().enumerate() {
        writeln!(out, "{i},{}", p.fusion.0).expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;

    fn sine(n: usize, period: f64) -> Vec<f64> {
        (0..n).map(|t| (2.0 * std::f64::consts::PI * t as f64 / period).sin()).collect()
    }

    #[test]
    fn acf_of_a_sine() {
        let x = sine(2400, 24.0);
        assert!(acf(&x, 24).unwrap() >= 0.95);
        assert!(acf(&x, 12).unwrap() <= -0.9);
        assert!(acf(&x, 0).is_err() && acf(&x, 2400).is_err());
        assert!(acf(&[1.0; 10], 2).is_err());
    }

    #[test]
    fn acf_of_white_noise_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        assert!(acf(&x, 24).unwrap().abs() < 0.05);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(normalized_entropy(&[2.0; 7], 20).unwrap(), 0.0);
        assert_eq!(inv_entropy(&[2.0; 7], 20).unwrap(), 1.0);
        let spread: Vec<f64> = (0..60).map(|i| (i % 20) as f64 / 20.0).collect();
        assert!((normalized_entropy(&spread, 20).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>()).collect();
        assert!(normalized_entropy(&u, 20).unwrap() > 0.95);
        assert!(normalized_entropy(&u, 1).is_err());
    }

    #[test]
    fn sine_outscores_noise() {
        let cfg = PeriodicityConfig::default();
        let x = sine(5000, 24.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<f64> = (0..5000).map(|_| rng.sample(StandardNormal)).collect();
        let a = periodicity_score(&x, &cfg).unwrap();
        let b = periodicity_score(&noise, &cfg).unwrap();
        assert!(a.score > b.score, "{a:?} {b:?}");
    }

    #[test]
    fn single_bin_series_scores_its_acf() {
        // Rare periodic spikes: almost all mass sits in the lowest bin.
        let x: Vec<f64> = (0..4000).map(|t| if t % 200 == 0 { 1e3 } else { 1e-3 * (t % 7) as f64 }).collect();
        let cfg = PeriodicityConfig { lags: vec![200], bins: 20 };
        let r = periodicity_score(&x, &cfg).unwrap();
        assert!(r.acf_score > 0.9 && r.inv_entropy > 0.98, "{r:?}");
        assert!((r.score - r.acf_score).abs() < 0.02);
    }

    #[test]
    fn weight_report_examples() {
        let s = weight_summary(&[0.2, 0.8]).unwrap();
        assert!((s.mean_w1 - 0.5).abs() < 1e-15);
        assert_eq!(s.median_w1, 0.5);
        assert_eq!(weight_summary(&[0.5; 3]).unwrap().mean_w1, 0.5);
        assert!(weight_summary(&[]).is_err());
    }

    #[test]
    fn lag_defaults() {
        assert_eq!(PeriodicityConfig::for_freq("15min").unwrap().lags, vec![96, 672]);
        assert_eq!(PeriodicityConfig::for_freq("10min").unwrap().lags, vec![144, 1008]);
        assert!(PeriodicityConfig::for_freq("1d").is_none());
    }

    proptest! {
        #[test]
        fn score_components_are_bounded(x in prop::collection::vec(-10f64..10.0, 30..120), lag in 1usize..29) {
            let cfg = PeriodicityConfig { lags: vec![lag], bins: 7 };
            if let Ok(r) = periodicity_score(&x, &cfg) {
                prop_assert!((0.0..=1.0).contains(&r.score));
                prop_assert!((0.0..=1.0).contains(&r.entropy));
                prop_assert!(r.acf[0] >= -1.0 - 1e-9 && r.acf[0] <= 1.0 + 1e-9);
            }
        }
    }
}
