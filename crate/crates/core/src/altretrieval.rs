//! Retrieval criteria over the bank: learned-feature cosine, and three raw
//! lookback-window comparisons (MSE, DTW, Pearson correlation).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, PfrpError, Result};
use crate::gmb::{slice_horizon, MemoryBank};
use crate::pcl::Encoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalCriterion {
    #[default]
    FeatureCosine,
    WindowMse,
    WindowDtw,
    WindowPcc,
}

impl RetrievalCriterion {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "feature" | "feature_cosine" | "cosine" => Ok(Self::FeatureCosine),
            "mse" | "window_mse" => Ok(Self::WindowMse),
            "dtw" | "window_dtw" => Ok(Self::WindowDtw),
            "pcc" | "window_pcc" => Ok(Self::WindowPcc),
            other => Err(PfrpError::invalid(format!(
                "unknown retrieval criterion {other:?} (feature, mse, dtw, pcc)"
            ))),
        }
    }

    /// Whether larger scores mean more similar.
    pub fn descending(self) -> bool {
        matches!(self, Self::FeatureCosine | Self::WindowPcc)
    }

    pub fn needs_raw_windows(self) -> bool {
        self != Self::FeatureCosine
    }
}

/// Top-k retrieval result, best match first.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub indices: Vec<usize>,
    /// Criterion values (similarity or distance).
    pub scores: Vec<f64>,
    /// Similarities fed to weight modulation: the score for cosine and PCC,
    /// the negated distance for MSE and DTW.
    pub weights: Vec<f64>,
    /// Stored futures cut to the serving horizon, one per index.
    pub values: Vec<Vec<f64>>,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dynamic time warping with absolute-difference local cost and no band.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(PfrpError::invalid("dtw needs non-empty sequences"));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &ai in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = (ai - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Pearson correlation, clamped to [-1, 1].
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("pcc inputs", a.len(), b.len())?;
    if a.len() < 2 {
        return Err(PfrpError::invalid("pcc needs at least two points"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa / n <= 1e-12 || sbb / n <= 1e-12 {
        return Err(PfrpError::invalid("pcc of a zero-variance sequence"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn window_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Indices of the `k` best scores; ties go to the lower index.
pub(crate) fn top_k(scores: &[f64], k: usize, descending: bool) -> Vec<usize> {
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        let by_score = if descending {
            scores[b].total_cmp(&scores[a])
        } else {
            scores[a].total_cmp(&scores[b])
        };
        by_score.then(a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

fn check_k(bank: &MemoryBank, k: usize) -> Result<()> {
    if k == 0 || k > bank.len() {
        return Err(PfrpError::invalid(format!(
            "k = {k} must lie in [1, {}] (bank size)",
            bank.len()
        )));
    }
    Ok(())
}

fn gather(bank: &MemoryBank, indices: Vec<usize>, scores: &[f64], negate: bool, horizon: usize) -> Result<Retrieved> {
    let values = indices
        .iter()
        .map(|&i| slice_horizon(bank.value(i), horizon).map(<[f64]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let picked: Vec<f64> = indices.iter().map(|&i| scores[i]).collect();
    Ok(Retrieved {
        weights: picked.iter().map(|&s| if negate { -s } else { s }).collect(),
        scores: picked,
        indices,
        values,
    })
}

/// Cosine top-k over the bank keys for a unit-norm query feature.
pub fn retrieve_topk(bank: &MemoryBank, eps: &[f64], k: usize, horizon: usize) -> Result<Retrieved> {
    check_k(bank, k)?;
    check_len("query feature", bank.feature_dim, eps.len())?;
    let scores: Vec<f64> = (0..bank.len()).map(|i| dot(eps, bank.key(i))).collect();
    gather(bank, top_k(&scores, k, true), &scores, false, horizon)
}

/// Top-k under any criterion. The feature criterion encodes `x` first.
pub fn retrieve_topk_by(
    criterion: RetrievalCriterion,
    bank: &MemoryBank,
    encoder: &Encoder,
    x: &[f64],
    k: usize,
    horizon: usize,
) -> Result<Retrieved> {
    if criterion == RetrievalCriterion::FeatureCosine {
        return retrieve_topk(bank, &encoder.encode(x)?, k, horizon);
    }
    check_k(bank, k)?;
    check_len("query window", bank.lookback, x.len())?;
    if bank.raw_x.is_none() {
        return Err(PfrpError::invalid(
            "this retrieval criterion needs a bank built with raw lookback windows (--store-raw-x)",
        ));
    }
    let scores = (0..bank.len())
        .map(|i| {
            let w = bank.raw_window(i).expect("raw windows present");
            match criterion {
                RetrievalCriterion::WindowMse => Ok(window_mse(x, w)),
                RetrievalCriterion::WindowDtw => dtw_distance(x, w),
                RetrievalCriterion::WindowPcc => pcc(x, w),
                RetrievalCriterion::FeatureCosine => unreachable!(),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let descending = criterion.descending();
    gather(bank, top_k(&scores, k, descending), &scores, !descending, horizon)
}
