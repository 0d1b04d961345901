//! Lookback-window encoder trained with predictive contrastive learning.
//!
//! Positives are picked by the distance between *horizon* sequences: two
//! windows whose futures look alike should land close in feature space.
//! The lookback-similarity (`Cl`) and prediction-head (`Pl`) strategies are
//! available for comparison.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, PfrpError, Result};
use crate::nn::{AdamState, Mlp, OutputActivation};
use crate::series::WindowSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingStrategy {
    /// Positives by horizon-sequence squared distance.
    Pcl,
    /// Positives by lookback-window squared distance.
    Cl,
    /// Encoder trained through a linear prediction head with an L2 loss.
    Pl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub lookback: usize,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub tau: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Maximum number of shared lookback timestamps for a valid pair.
    pub overlap_threshold: usize,
    pub seed: u64,
    pub strategy: TrainingStrategy,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            feature_dim: 128,
            hidden: vec![256, 256],
            tau: 0.05,
            batch_size: 256,
            lr: 1e-3,
            epochs: 10,
            overlap_threshold: 48,
            seed: 0,
            strategy: TrainingStrategy::Pcl,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(PfrpError::invalid(format!("tau {} must be > 0", self.tau)));
        }
        if self.batch_size < 3 {
            return Err(PfrpError::invalid("batch size must be >= 3"));
        }
        if self.overlap_threshold > self.lookback {
            return Err(PfrpError::invalid(format!(
                "overlap threshold {} exceeds lookback {}",
                self.overlap_threshold, self.lookback
            )));
        }
        if self.lookback == 0 || self.feature_dim == 0 {
            return Err(PfrpError::invalid("lookback and feature dim must be >= 1"));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.lookback)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.feature_dim))
            .collect()
    }
}

/// A trained lookback encoder. Its outputs are always unit-norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Encoder {
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub eps: Vec<f64>,
    pub y: Vec<f64>,
    pub start_index: usize,
}

impl Encoder {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            mlp: Mlp::new(&config.layer_dims(), OutputActivation::Identity, &mut rng)?,
        })
    }

    pub fn lookback(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Content hash of the checkpoint form, used to pair banks with encoders.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(&self.mlp).expect("mlp serializes");
        hex::encode(&Sha256::digest(&json)[..16])
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("encoder input", self.lookback(), x.len())?;
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        Ok(self.encode_batch(view)?.row(0).to_vec())
    }

    /// Encodes each row of `batch`; rows of the result are unit vectors.
    pub fn encode_batch(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("encoder input", self.lookback(), batch.ncols())?;
        let mut raw = self.mlp.predict(batch)?;
        normalize_rows(&mut raw);
        Ok(raw)
    }

    pub fn encode_samples(&self, samples: &[WindowSample]) -> Result<Vec<EncodedSample>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(1024) {
            let feats = self.encode_batch(stack_rows(chunk.iter().map(|s| &s.x[..]))?.view())?;
            for (s, f) in chunk.iter().zip(feats.rows()) {
                out.push(EncodedSample {
                    eps: f.to_vec(),
                    y: s.y.clone(),
                    start_index: s.start_index,
                });
            }
        }
        Ok(out)
    }
}

pub(crate) fn stack_rows<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Result<Array2<f64>> {
    let rows: Vec<&[f64]> = rows.collect();
    let width = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in &rows {
        check_len("row width", width, r.len())?;
        data.extend_from_slice(r);
    }
    Ok(Array2::from_shape_vec((rows.len(), width), data).expect("sizes checked"))
}

/// L2-normalizes rows in place. A zero row becomes the first basis vector.
pub fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            row.fill(0.0);
            row[0] = 1.0;
        } else {
            row /= norm;
        }
    }
}

/// Pulls a gradient w.r.t. normalized rows back to the raw rows.
fn normalize_rows_backward(raw: &Array2<f64>, unit: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = grad.clone();
    for ((mut o, r), u) in out.rows_mut().into_iter().zip(raw.rows()).zip(unit.rows()) {
        let norm = r.dot(&r).sqrt();
        if norm == 0.0 {
            o.fill(0.0);
            continue;
        }
        let proj = u.dot(&o);
        o.zip_mut_with(&u, |g, &ui| *g = (*g - ui * proj) / norm);
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Whether two windows share at most `overlap_threshold` lookback timestamps.
pub fn eligible(start_a: usize, start_b: usize, lookback: usize, overlap_threshold: usize) -> bool {
    start_a.abs_diff(start_b) >= lookback.saturating_sub(overlap_threshold)
}

/// Positive for anchor `i`: the eligible `j != i` whose `key` is closest in
/// squared distance. Ties go to the smallest `j`.
pub fn select_positive_by(
    keys: &[&[f64]],
    starts: &[usize],
    i: usize,
    lookback: usize,
    overlap_threshold: usize,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..keys.len() {
        if j == i || !eligible(starts[i], starts[j], lookback, overlap_threshold) {
            continue;
        }
        let d = sq_dist(keys[i], keys[j]);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j)
}

/// Horizon-based positive for anchor `i` within `batch`.
pub fn select_positive(batch: &[WindowSample], i: usize, overlap_threshold: usize) -> Option<usize> {
    let keys: Vec<&[f64]> = batch.iter().map(|s| &s.y[..]).collect();
    let starts: Vec<usize> = batch.iter().map(|s| s.start_index).collect();
    select_positive_by(&keys, &starts, i, batch[i].x.len(), overlap_threshold)
}

/// Contrastive loss over a batch of features and its gradient w.r.t. the
/// features.
///
/// Row `i` contributes `-log(exp(s_ip) / Σ_{j≠i} exp(s_ij))` with
/// `s_ij = f_i·f_j / tau`; rows without a positive are left out of the mean.
pub fn pcl_loss(
    features: ArrayView2<f64>,
    positives: &[Option<usize>],
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    let b = features.nrows();
    check_len("positives per row", b, positives.len())?;
    let active = positives.iter().filter(|p| p.is_some()).count();
    if active == 0 {
        return Err(PfrpError::invalid("no row in the batch has a positive"));
    }
    let sims = features.dot(&features.t()) / tau;
    let mut coeff = Array2::<f64>::zeros((b, b));
    let mut total = 0.0;
    let scale = 1.0 / active as f64;
    for i in 0..b {
        let Some(p) = positives[i] else { continue };
        if p == i || p >= b {
            return Err(PfrpError::invalid(format!("row {i} has invalid positive {p}")));
        }
        let row = sims.row(i);
        let max = (0..b)
            .filter(|&j| j != i)
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..b).filter(|&j| j != i).map(|j| (row[j] - max).exp()).sum();
        let lse = max + denom.ln();
        total += lse - row[p];
        for j in (0..b).filter(|&j| j != i) {
            coeff[[i, j]] = scale * (row[j] - lse).exp();
        }
        coeff[[i, p]] -= scale;
    }
    let loss = total * scale;
    let sym = &coeff + &coeff.t();
    let grad = sym.dot(&features) / tau;
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct EncoderTraining {
    pub encoder: Encoder,
    /// Entry 0 is the loss before any update; entry `e` the mean batch loss
    /// of epoch `e`.
    pub loss_curve: Vec<f64>,
    pub adam: AdamState,
}

struct BatchLoss {
    loss: f64,
    feature_grad: Array2<f64>,
    head_grads: Option<crate::nn::MlpGrads>,
}

fn batch_loss(
    config: &EncoderConfig,
    batch: &[&WindowSample],
    feats: &Array2<f64>,
    head: Option<&Mlp>,
) -> Result<Option<BatchLoss>> {
    match config.strategy {
        TrainingStrategy::Pcl | TrainingStrategy::Cl => {
            let keys: Vec<&[f64]> = batch
                .iter()
                .map(|s| match config.strategy {
                    TrainingStrategy::Cl => &s.x[..],
                    _ => &s.y[..],
                })
                .collect();
            let starts: Vec<usize> = batch.iter().map(|s| s.start_index).collect();
            let positives: Vec<Option<usize>> = (0..batch.len())
                .map(|i| select_positive_by(&keys, &starts, i, config.lookback, config.overlap_threshold))
                .collect();
            if positives.iter().all(Option::is_none) {
                return Ok(None);
            }
            let (loss, feature_grad) = pcl_loss(feats.view(), &positives, config.tau)?;
            Ok(Some(BatchLoss {
                loss,
                feature_grad,
                head_grads: None,
            }))
        }
        TrainingStrategy::Pl => {
            let head = head.expect("prediction head present for Pl");
            let targets = stack_rows(batch.iter().map(|s| &s.y[..]))?;
            let (pred, cache) = head.forward(feats.view())?;
            let diff = &pred - &targets;
            let n = diff.len() as f64;
            let loss = diff.mapv(|d| d * d).sum() / n;
            let upstream = diff * (2.0 / n);
            let (g, feature_grad) = head.backward(&cache, upstream.view())?;
            Ok(Some(BatchLoss {
                loss,
                feature_grad,
                head_grads: Some(g),
            }))
        }
    }
}

fn batch_gradient(
    encoder: &Encoder,
    config: &EncoderConfig,
    batch: &[&WindowSample],
    head: Option<&Mlp>,
) -> Result<Option<(BatchLoss, crate::nn::MlpGrads)>> {
    let x = stack_rows(batch.iter().map(|s| &s.x[..]))?;
    let (raw, cache) = encoder.mlp.forward(x.view())?;
    let mut feats = raw.clone();
    normalize_rows(&mut feats);
    let Some(bl) = batch_loss(config, batch, &feats, head)? else {
        return Ok(None);
    };
    let raw_grad = normalize_rows_backward(&raw, &feats, &bl.feature_grad);
    let (grads, _) = encoder.mlp.backward(&cache, raw_grad.view())?;
    Ok(Some((bl, grads)))
}

/// Contrastive loss of one batch and its gradient w.r.t. the encoder
/// parameters. `None` when no sample has an eligible positive.
pub fn encoder_loss_and_grads(
    encoder: &Encoder,
    config: &EncoderConfig,
    batch: &[&WindowSample],
) -> Result<Option<(f64, crate::nn::MlpGrads)>> {
    if config.strategy == TrainingStrategy::Pl {
        return Err(PfrpError::invalid("the prediction strategy trains a separate head"));
    }
    Ok(batch_gradient(encoder, config, batch, None)?.map(|(bl, g)| (bl.loss, g)))
}

/// Trains an encoder on `samples` (horizons of any fixed length).
pub fn train_encoder(samples: &[WindowSample], config: &EncoderConfig) -> Result<EncoderTraining> {
    config.validate()?;
    if samples.len() < config.batch_size {
        return Err(PfrpError::data(format!(
            "{} training samples, fewer than one batch of {}",
            samples.len(),
            config.batch_size
        )));
    }
    for s in samples {
        check_len("sample lookback", config.lookback, s.x.len())?;
    }
    let horizon = samples[0].y.len();
    let mut encoder = Encoder::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut head = match config.strategy {
        TrainingStrategy::Pl => Some(Mlp::new(
            &[config.feature_dim, horizon],
            OutputActivation::Identity,
            &mut rng,
        )?),
        _ => None,
    };
    let mut adam = AdamState::new(config.lr);

    let initial = {
        let mut sum = 0.0;
        let mut n = 0usize;
        let all: Vec<&WindowSample> = samples.iter().collect();
        for chunk in all.chunks(config.batch_size) {
            let x = stack_rows(chunk.iter().map(|s| &s.x[..]))?;
            let feats = encoder.encode_batch(x.view())?;
            if let Some(bl) = batch_loss(config, chunk, &feats, head.as_ref())? {
                sum += bl.loss;
                n += 1;
            }
        }
        if n == 0 {
            return Err(PfrpError::data("no batch contains an eligible positive pair"));
        }
        sum / n as f64
    };
    let mut loss_curve = vec![initial];

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let Some((bl, grads)) = batch_gradient(&encoder, config, &batch, head.as_ref())? else {
                continue;
            };
            if !bl.loss.is_finite() {
                return Err(PfrpError::Numeric(format!("encoder loss in epoch {}", epoch + 1)));
            }
            let mut slices: Vec<&[f64]> = grads.slices();
            let mut params = encoder.mlp.parameters_mut();
            if let (Some(h), Some(hg)) = (head.as_mut(), bl.head_grads.as_ref()) {
                slices.extend(hg.slices());
                params.extend(h.parameters_mut());
            }
            adam.step(params, &slices)?;
            sum += bl.loss;
            n += 1;
        }
        loss_curve.push(if n == 0 { f64::NAN } else { sum / n as f64 });
        log::debug!("encoder epoch {} loss {:.6}", epoch + 1, loss_curve[epoch + 1]);
    }
    Ok(EncoderTraining {
        encoder,
        loss_curve,
        adam,
    })
}

/// Mean cosine similarity between all feature pairs in `a` x `b`
/// (excluding identical indices when `a` and `b` are the same set).
pub fn mean_cosine(a: ArrayView2<f64>, b: ArrayView2<f64>, same_set: bool) -> f64 {
    let sims = a.dot(&b.t());
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((i, j), &s) in sims.indexed_iter() {
        if same_set && i == j {
            continue;
        }
        sum += s;
        n += 1;
    }
    sum / n.max(1) as f64
}

/// Row norms, handy for asserting unit-norm features.
pub fn row_norms(m: ArrayView2<f64>) -> Vec<f64> {
    m.map_axis(Axis(1), |r| r.dot(&r).sqrt()).to_vec()
}
