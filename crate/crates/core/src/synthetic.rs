//! Seeded synthetic series for experiments and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::series::TimeSeries;

pub const DAY: usize = 24;

/// Day pattern over a week. Every cyclic run of four days is distinct, so
/// four days of history pin down the position in the week.
pub const WEEK: [usize; 7] = [0, 0, 1, 2, 0, 1, 1];

/// Value of daily motif `m` at hour `h`.
pub fn motif(m: usize, h: usize) -> f64 {
    let h = h as f64;
    match m {
        0 => (2.0 * std::f64::consts::PI * h / DAY as f64).sin(),
        1 => {
            if (7.0..19.0).contains(&h) {
                1.2
            } else {
                -0.8
            }
        }
        _ => {
            let bump = |c: f64| (-((h - c) / 2.5).powi(2)).exp();
            1.5 * bump(5.0) + 1.5 * bump(17.0) - 0.6
        }
    }
}

/// Hourly series built from three daily motifs on a weekly schedule plus
/// Gaussian noise.
pub fn motif_series(len: usize, noise_std: f64, seed: u64) -> Result<TimeSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..len)
        .map(|t| {
            let day = WEEK[(t / DAY) % WEEK.len()];
            let eps: f64 = rng.sample(StandardNormal);
            motif(day, t % DAY) + noise_std * eps
        })
        .collect();
    Ok(TimeSeries::new(format!("motifs-{seed}"), values)?.with_freq("1h"))
}

/// Standard normal white noise.
pub fn white_noise(len: usize, seed: u64) -> Result<TimeSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    Ok(TimeSeries::new(format!("noise-{seed}"), values)?.with_freq("1h"))
}
