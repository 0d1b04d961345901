//! Retrieval-augmented prediction.
//!
//! For a lookback window `x` the model retrieves the top-k stored futures,
//! scores each `[x; future]` with the confidence gate, re-weights the
//! similarities with a softmax, rescales the weighted future with the
//! output gate and finally blends this global prediction with a local
//! model's output using weights computed from the modulated similarities.
//!
//! The encoder and memory bank are frozen here. Retrieved indices and
//! similarities are constants of the training graph.

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::altretrieval::{retrieve_topk, retrieve_topk_by, Retrieved, RetrievalCriterion};
use crate::error::{check_len, PfrpError, Result, StageExt};
use crate::gmb::{slice_horizon, MemoryBank};
use crate::local::{LocalCache, LocalKind, LocalPredictor};
use crate::nn::{softmax, softmax_backward, AdamState, Mlp, MlpCache, OutputActivation};
use crate::pcl::{stack_rows, Encoder};
use crate::series::WindowSample;

/// Components switched off for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Confidences fixed at 1.
    pub no_confidence_gate: bool,
    /// Scale fixed at 1 and shift at 0.
    pub no_output_gate: bool,
    /// The global prediction is returned as is.
    pub no_local_model: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PfrpConfig {
    pub k: usize,
    pub horizon: usize,
    pub confidence_hidden: Vec<usize>,
    pub output_hidden: Vec<usize>,
    pub fusion_hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub retrieval: RetrievalCriterion,
    pub local_kind: LocalKind,
    pub ablation: Ablation,
    /// Keep the local model's parameters fixed during training.
    pub freeze_local: bool,
}

impl Default for PfrpConfig {
    fn default() -> Self {
        Self {
            k: 10,
            horizon: 96,
            confidence_hidden: vec![128],
            output_hidden: vec![128],
            fusion_hidden: vec![32],
            lr: 1e-4,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            retrieval: RetrievalCriterion::FeatureCosine,
            local_kind: LocalKind::Linear,
            ablation: Ablation::default(),
            freeze_local: false,
        }
    }
}

/// Everything computed for one query window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfrpPrediction {
    pub indices: Vec<usize>,
    pub raw_weights: Vec<f64>,
    pub confidences: Vec<f64>,
    pub mod_weights: Vec<f64>,
    pub y1_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub y1: Vec<f64>,
    /// `None` when the local model is ablated.
    pub y2: Option<Vec<f64>>,
    pub fusion: (f64, f64),
    pub y: Vec<f64>,
}

/// Frozen retrieval context: encoder, bank and criterion.
#[derive(Debug, Clone, Copy)]
pub struct Retriever<'a> {
    pub encoder: &'a Encoder,
    pub bank: &'a MemoryBank,
    pub criterion: RetrievalCriterion,
    pub k: usize,
    pub horizon: usize,
}

impl<'a> Retriever<'a> {
    pub fn new(encoder: &'a Encoder, bank: &'a MemoryBank, config: &PfrpConfig) -> Result<Self> {
        if let Some(msg) = bank.encoder_mismatch(encoder) {
            return Err(PfrpError::invalid(msg));
        }
        check_len("bank lookback vs encoder", encoder.lookback(), bank.lookback)?;
        check_len("bank feature dim vs encoder", encoder.feature_dim(), bank.feature_dim)?;
        if config.horizon > bank.horizon {
            return Err(PfrpError::invalid(format!(
                "horizon {} exceeds the bank horizon {}",
                config.horizon, bank.horizon
            )));
        }
        if config.k == 0 || config.k > bank.len() {
            return Err(PfrpError::invalid(format!(
                "k = {} must lie in [1, {}]",
                config.k,
                bank.len()
            )));
        }
        if config.retrieval.needs_raw_windows() && bank.raw_x.is_none() {
            return Err(PfrpError::invalid(
                "the bank holds no raw lookback windows; rebuild it with --store-raw-x",
            ));
        }
        Ok(Self {
            encoder,
            bank,
            criterion: config.retrieval,
            k: config.k,
            horizon: config.horizon,
        })
    }

    pub fn retrieve(&self, x: &[f64]) -> Result<Retrieved> {
        retrieve_topk_by(self.criterion, self.bank, self.encoder, x, self.k, self.horizon)
    }

    /// Retrieval for many windows; the feature criterion encodes them as one batch.
    pub fn retrieve_many(&self, xs: &[&[f64]]) -> Result<Vec<Retrieved>> {
        if self.criterion != RetrievalCriterion::FeatureCosine {
            return xs.iter().map(|x| self.retrieve(x)).collect();
        }
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(1024) {
            let feats = self.encoder.encode_batch(stack_rows(chunk.iter().copied())?.view())?;
            for f in feats.rows() {
                out.push(retrieve_topk(
                    self.bank,
                    f.as_slice().expect("standard layout"),
                    self.k,
                    self.horizon,
                )?);
            }
        }
        Ok(out)
    }
}

/// Existence probability of each `[x; value]`, evaluated as one batch.
pub fn confidence_gate(gate: &Mlp, x: &[f64], values: &[Vec<f64>]) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = values
        .iter()
        .map(|v| x.iter().chain(v).copied().collect())
        .collect();
    let input = stack_rows(rows.iter().map(|r| &r[..]))?;
    check_len("confidence gate input", gate.input_dim(), input.ncols())?;
    Ok(gate.predict(input.view())?.column(0).to_vec())
}

/// `softmax(raw ⊙ p)`.
pub fn modulate_weights(raw: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    check_len("confidences", raw.len(), p.len())?;
    let products: Vec<f64> = raw.iter().zip(p).map(|(w, c)| w * c).collect();
    Ok(softmax(&products))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPrediction {
    pub y1_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub y1: Vec<f64>,
}

/// Weighted sum of retrieved futures, then `alpha ⊙ ȳ₁ + beta` from the
/// output gate (`None` gives alpha = 1, beta = 0).
pub fn global_prediction(
    mod_weights: &[f64],
    values: &[Vec<f64>],
    output_gate: Option<&Mlp>,
    x: &[f64],
) -> Result<GlobalPrediction> {
    check_len("retrieved values", mod_weights.len(), values.len())?;
    let h = values.first().map_or(0, Vec::len);
    let mut y1_bar = vec![0.0; h];
    for (w, v) in mod_weights.iter().zip(values) {
        check_len("retrieved value length", h, v.len())?;
        for (acc, vi) in y1_bar.iter_mut().zip(v) {
            *acc += w * vi;
        }
    }
    let (alpha, beta) = match output_gate {
        Some(gate) => {
            check_len("output gate width", 2 * h, gate.output_dim())?;
            let out = gate.predict_one(x)?;
            (out[..h].iter().map(|a| 1.0 + a).collect(), out[h..].to_vec())
        }
        None => (vec![1.0; h], vec![0.0; h]),
    };
    let y1 = y1_bar
        .iter()
        .zip(&alpha)
        .zip(&beta)
        .map(|((y, a), b)| a * y + b)
        .collect();
    Ok(GlobalPrediction {
        y1_bar,
        alpha,
        beta,
        y1,
    })
}

/// `(w₁, w₂) = softmax(MLP(w̄))`, `y = w₁y₁ + w₂y₂`.
pub fn dynamic_fusion(fusion: &Mlp, mod_weights: &[f64], y1: &[f64], y2: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
    check_len("fusion input", fusion.input_dim(), mod_weights.len())?;
    check_len("fusion output", 2, fusion.output_dim())?;
    check_len("local prediction", y1.len(), y2.len())?;
    let w = softmax(&fusion.predict_one(mod_weights)?);
    let y = y1.iter().zip(y2).map(|(a, b)| w[0] * a + w[1] * b).collect();
    Ok((w[0], w[1], y))
}

/// Trainable stage-2 components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfrpModel {
    pub lookback: usize,
    pub horizon: usize,
    pub k: usize,
    pub confidence_gate: Mlp,
    pub output_gate: Mlp,
    pub fusion: Mlp,
    pub local: LocalPredictor,
    pub ablation: Ablation,
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

impl PfrpModel {
    /// Fresh components. The output gate and fusion heads start at zero, so
    /// initially `y₁ = ȳ₁` and `(w₁, w₂) = (½, ½)`.
    pub fn new(lookback: usize, config: &PfrpConfig) -> Result<Self> {
        let (h, k) = (config.horizon, config.k);
        if h == 0 || k == 0 || lookback == 0 {
            return Err(PfrpError::invalid("lookback, horizon and k must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let confidence_gate = Mlp::new(
            &dims(lookback + h, &config.confidence_hidden, 1),
            OutputActivation::Sigmoid,
            &mut rng,
        )?;
        let mut output_gate = Mlp::new(
            &dims(lookback, &config.output_hidden, 2 * h),
            OutputActivation::Identity,
            &mut rng,
        )?;
        output_gate.zero_output_layer();
        let mut fusion = Mlp::new(&dims(k, &config.fusion_hidden, 2), OutputActivation::Identity, &mut rng)?;
        fusion.zero_output_layer();
        let local = LocalPredictor::new(config.local_kind, lookback, h, &mut rng)?;
        Ok(Self {
            lookback,
            horizon: h,
            k,
            confidence_gate,
            output_gate,
            fusion,
            local,
            ablation: config.ablation,
        })
    }

    /// Swaps in an already trained local model.
    pub fn with_local(mut self, local: LocalPredictor) -> Result<Self> {
        check_len("local model lookback", self.lookback, local.lookback())?;
        check_len("local model horizon", self.horizon, local.horizon())?;
        self.local = local;
        Ok(self)
    }

    pub fn num_parameters(&self) -> usize {
        self.confidence_gate.num_parameters()
            + self.output_gate.num_parameters()
            + self.fusion.num_parameters()
            + self.local.num_parameters()
    }

    pub fn trainable_parameters(&self, freeze_local: bool) -> Vec<&[f64]> {
        let mut p = self.confidence_gate.parameters();
        p.extend(self.output_gate.parameters());
        p.extend(self.fusion.parameters());
        if !freeze_local {
            p.extend(self.local.parameters());
        }
        p
    }

    pub fn trainable_parameters_mut(&mut self, freeze_local: bool) -> Vec<&mut [f64]> {
        let mut p = self.confidence_gate.parameters_mut();
        p.extend(self.output_gate.parameters_mut());
        p.extend(self.fusion.parameters_mut());
        if !freeze_local {
            p.extend(self.local.parameters_mut());
        }
        p
    }

    /// Full record for one window, from an already computed retrieval.
    pub fn forward_retrieved(&self, x: &[f64], retrieved: &Retrieved) -> Result<PfrpPrediction> {
        check_len("lookback window", self.lookback, x.len())?;
        check_len("retrieved count", self.k, retrieved.indices.len())?;
        let confidences = if self.ablation.no_confidence_gate {
            vec![1.0; self.k]
        } else {
            confidence_gate(&self.confidence_gate, x, &retrieved.values).stage("confidence gate")?
        };
        let mod_weights = modulate_weights(&retrieved.weights, &confidences).stage("weight modulation")?;
        let gate = (!self.ablation.no_output_gate).then_some(&self.output_gate);
        let global = global_prediction(&mod_weights, &retrieved.values, gate, x).stage("output gate")?;
        let (y2, fusion, y) = if self.ablation.no_local_model {
            (None, (1.0, 0.0), global.y1.clone())
        } else {
            let y2 = self.local.predict_one(x).stage("local model")?;
            let (w1, w2, y) = dynamic_fusion(&self.fusion, &mod_weights, &global.y1, &y2).stage("dynamic fusion")?;
            (Some(y2), (w1, w2), y)
        };
        Ok(PfrpPrediction {
            indices: retrieved.indices.clone(),
            raw_weights: retrieved.weights.clone(),
            confidences,
            mod_weights,
            y1_bar: global.y1_bar,
            alpha: global.alpha,
            beta: global.beta,
            y1: global.y1,
            y2,
            fusion,
            y,
        })
    }

    /// encode → retrieve → confidence gate → modulation → output gate →
    /// local model → fusion.
    pub fn forward(&self, retriever: &Retriever, x: &[f64]) -> Result<PfrpPrediction> {
        check_len("retriever horizon", self.horizon, retriever.horizon)?;
        let retrieved = retriever.retrieve(x).stage("retrieval")?;
        self.forward_retrieved(x, &retrieved)
    }
}

/// A training batch with retrieval already resolved.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `B x L`
    pub x: Array2<f64>,
    /// `B x k` raw similarities.
    pub weights: Array2<f64>,
    /// `(B·k) x H`, row `b·k + i` is the i-th retrieved future of sample b.
    pub values: Array2<f64>,
    /// `B x H`
    pub target: Array2<f64>,
}

impl Batch {
    pub fn new(xs: &[&[f64]], retrieved: &[&Retrieved], targets: &[&[f64]]) -> Result<Self> {
        check_len("batch retrievals", xs.len(), retrieved.len())?;
        check_len("batch targets", xs.len(), targets.len())?;
        Ok(Self {
            x: stack_rows(xs.iter().copied())?,
            weights: stack_rows(retrieved.iter().map(|r| &r.weights[..]))?,
            values: stack_rows(retrieved.iter().flat_map(|r| r.values.iter().map(|v| &v[..])))?,
            target: stack_rows(targets.iter().copied())?,
        })
    }
}

/// Intermediate values of a batched forward pass.
pub struct BatchForward {
    pub confidences: Array2<f64>,
    pub mod_weights: Array2<f64>,
    pub y1_bar: Array2<f64>,
    pub alpha: Array2<f64>,
    pub y1: Array2<f64>,
    pub y2: Option<Array2<f64>>,
    /// `B x 2`
    pub fusion: Array2<f64>,
    pub y: Array2<f64>,
    conf_cache: Option<MlpCache>,
    out_cache: Option<MlpCache>,
    fusion_cache: Option<MlpCache>,
    local_cache: Option<LocalCache>,
}

impl PfrpModel {
    pub fn forward_batch(&self, batch: &Batch) -> Result<BatchForward> {
        let (b, k, h, l) = (batch.x.nrows(), self.k, self.horizon, self.lookback);
        check_len("batch lookback", l, batch.x.ncols())?;
        check_len("batch weights", k, batch.weights.ncols())?;
        check_len("batch values", b * k, batch.values.nrows())?;
        check_len("batch value length", h, batch.values.ncols())?;

        let (confidences, conf_cache) = if self.ablation.no_confidence_gate {
            (Array2::ones((b * k, 1)), None)
        } else {
            let mut input = Array2::zeros((b * k, l + h));
            for bi in 0..b {
                for i in 0..k {
                    let r = bi * k + i;
                    input.slice_mut(s![r, ..l]).assign(&batch.x.row(bi));
                    input.slice_mut(s![r, l..]).assign(&batch.values.row(r));
                }
            }
            let (p, c) = self.confidence_gate.forward(input.view())?;
            (p, Some(c))
        };

        let mut mod_weights = Array2::zeros((b, k));
        let mut y1_bar = Array2::zeros((b, h));
        for bi in 0..b {
            let q: Vec<f64> = (0..k)
                .map(|i| batch.weights[[bi, i]] * confidences[[bi * k + i, 0]])
                .collect();
            let wbar = softmax(&q);
            for (i, w) in wbar.iter().enumerate() {
                mod_weights[[bi, i]] = *w;
                y1_bar
                    .row_mut(bi)
                    .scaled_add(*w, &batch.values.row(bi * k + i));
            }
        }

        let (alpha, beta, out_cache) = if self.ablation.no_output_gate {
            (Array2::ones((b, h)), Array2::zeros((b, h)), None)
        } else {
            let (out, c) = self.output_gate.forward(batch.x.view())?;
            let alpha = out.slice(s![.., ..h]).mapv(|a| 1.0 + a);
            let beta = out.slice(s![.., h..]).to_owned();
            (alpha, beta, Some(c))
        };
        let y1 = &alpha * &y1_bar + &beta;

        let (y2, fusion, y, fusion_cache, local_cache) = if self.ablation.no_local_model {
            let mut fusion = Array2::zeros((b, 2));
            fusion.column_mut(0).fill(1.0);
            (None, fusion, y1.clone(), None, None)
        } else {
            let (y2, lc) = self.local.forward(batch.x.view())?;
            let (logits, fc) = self.fusion.forward(mod_weights.view())?;
            let mut fusion = Array2::zeros((b, 2));
            let mut y = Array2::zeros((b, h));
            for bi in 0..b {
                let w = softmax(&[logits[[bi, 0]], logits[[bi, 1]]]);
                fusion[[bi, 0]] = w[0];
                fusion[[bi, 1]] = w[1];
                for t in 0..h {
                    y[[bi, t]] = w[0] * y1[[bi, t]] + w[1] * y2[[bi, t]];
                }
            }
            (Some(y2), fusion, y, Some(fc), Some(lc))
        };

        Ok(BatchForward {
            confidences,
            mod_weights,
            y1_bar,
            alpha,
            y1,
            y2,
            fusion,
            y,
            conf_cache,
            out_cache,
            fusion_cache,
            local_cache,
        })
    }

    /// Mean squared error over the batch and its gradient, aligned with
    /// [`Self::trainable_parameters`].
    pub fn loss_and_grads(&self, batch: &Batch, freeze_local: bool) -> Result<(f64, Vec<Vec<f64>>)> {
        let fw = self.forward_batch(batch)?;
        let (b, k, h) = (batch.x.nrows(), self.k, self.horizon);
        check_len("batch target", h, batch.target.ncols())?;
        let diff = &fw.y - &batch.target;
        let n = diff.len() as f64;
        let loss = diff.mapv(|d| d * d).sum() / n;
        let dy = diff * (2.0 / n);

        let zeros_like = |m: &Mlp| m.parameters().iter().map(|s| vec![0.0; s.len()]).collect::<Vec<_>>();
        let mut fusion_grads = zeros_like(&self.fusion);
        let mut local_grads: Vec<Vec<f64>> = self.local.parameters().iter().map(|s| vec![0.0; s.len()]).collect();
        let mut dwbar = Array2::<f64>::zeros((b, k));

        let dy1 = if let (Some(y2), Some(fc), Some(lc)) = (&fw.y2, &fw.fusion_cache, &fw.local_cache) {
            let w1 = fw.fusion.column(0).insert_axis(Axis(1)).to_owned();
            let w2 = fw.fusion.column(1).insert_axis(Axis(1)).to_owned();
            let dy1 = &dy * &w1;
            let dy2 = &dy * &w2;
            let mut dlogits = Array2::zeros((b, 2));
            for bi in 0..b {
                let dw1 = dy.row(bi).dot(&fw.y1.row(bi));
                let dw2 = dy.row(bi).dot(&y2.row(bi));
                let g = softmax_backward(&[fw.fusion[[bi, 0]], fw.fusion[[bi, 1]]], &[dw1, dw2]);
                dlogits[[bi, 0]] = g[0];
                dlogits[[bi, 1]] = g[1];
            }
            let (fg, dinput) = self.fusion.backward(fc, dlogits.view())?;
            fusion_grads = fg.slices().into_iter().map(<[f64]>::to_vec).collect();
            dwbar += &dinput;
            local_grads = self.local.backward(lc, dy2.view())?;
            dy1
        } else {
            dy
        };

        let dy1_bar = &dy1 * &fw.alpha;
        let out_grads = match &fw.out_cache {
            Some(c) => {
                let mut upstream = Array2::zeros((b, 2 * h));
                upstream.slice_mut(s![.., ..h]).assign(&(&dy1 * &fw.y1_bar));
                upstream.slice_mut(s![.., h..]).assign(&dy1);
                let (g, _) = self.output_gate.backward(c, upstream.view())?;
                g.slices().into_iter().map(<[f64]>::to_vec).collect()
            }
            None => zeros_like(&self.output_gate),
        };

        for bi in 0..b {
            for i in 0..k {
                dwbar[[bi, i]] += dy1_bar.row(bi).dot(&batch.values.row(bi * k + i));
            }
        }
        let conf_grads = match &fw.conf_cache {
            Some(c) => {
                let mut dp = Array2::zeros((b * k, 1));
                for bi in 0..b {
                    let wbar: Vec<f64> = fw.mod_weights.row(bi).to_vec();
                    let dq = softmax_backward(&wbar, &dwbar.row(bi).to_vec());
                    for i in 0..k {
                        dp[[bi * k + i, 0]] = dq[i] * batch.weights[[bi, i]];
                    }
                }
                let (g, _) = self.confidence_gate.backward(c, dp.view())?;
                g.slices().into_iter().map(<[f64]>::to_vec).collect()
            }
            None => zeros_like(&self.confidence_gate),
        };

        let mut grads = conf_grads;
        grads.extend(out_grads);
        grads.extend(fusion_grads);
        if !freeze_local {
            grads.extend(local_grads);
        }
        Ok((loss, grads))
    }
}

/// Pre-resolved retrieval for a fixed training set.
pub struct TrainingSet<'s> {
    pub samples: &'s [WindowSample],
    pub retrieved: Vec<Retrieved>,
}

impl<'s> TrainingSet<'s> {
    pub fn new(retriever: &Retriever, samples: &'s [WindowSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(PfrpError::data("empty training set"));
        }
        for s in samples {
            check_len("training target horizon", retriever.horizon, s.y.len())?;
        }
        let xs: Vec<&[f64]> = samples.iter().map(|s| &s.x[..]).collect();
        Ok(Self {
            samples,
            retrieved: retriever.retrieve_many(&xs)?,
        })
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let xs: Vec<&[f64]> = idx.iter().map(|&i| &self.samples[i].x[..]).collect();
        let rs: Vec<&Retrieved> = idx.iter().map(|&i| &self.retrieved[i]).collect();
        let ts: Vec<&[f64]> = idx.iter().map(|&i| &self.samples[i].y[..]).collect();
        Batch::new(&xs, &rs, &ts)
    }
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn epoch_rng(seed: u64, adam: &AdamState) -> ChaCha8Rng {
    // Offsetting by the optimizer step keeps resumed runs on a fresh stream.
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15 ^ adam.step)
}

/// Trains the gates, the fusion head and (unless frozen) the local model
/// with Adam on the batch-mean squared error. Returns per-epoch mean loss.
pub fn train_pfrp(
    model: &mut PfrpModel,
    adam: &mut AdamState,
    data: &TrainingSet,
    config: &PfrpConfig,
) -> Result<Vec<f64>> {
    let mut rng = epoch_rng(config.seed, adam);
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        let batches = shuffled_batches(data.samples.len(), config.batch_size, &mut rng);
        for idx in &batches {
            let batch = data.batch(idx)?;
            let (loss, grads) = model.loss_and_grads(&batch, config.freeze_local)?;
            if !loss.is_finite() {
                return Err(PfrpError::Numeric(format!("training loss in epoch {}", epoch + 1)));
            }
            let slices: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            adam.step(model.trainable_parameters_mut(config.freeze_local), &slices)?;
            sum += loss;
        }
        curve.push(sum / batches.len() as f64);
        log::debug!("stage-2 epoch {} loss {:.6}", epoch + 1, curve[epoch]);
    }
    Ok(curve)
}

/// Trains a local model on its own with the same optimizer settings.
pub fn train_local(
    local: &mut LocalPredictor,
    adam: &mut AdamState,
    samples: &[WindowSample],
    config: &PfrpConfig,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(PfrpError::data("empty training set"));
    }
    let mut rng = epoch_rng(config.seed, adam);
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        let batches = shuffled_batches(samples.len(), config.batch_size, &mut rng);
        for idx in &batches {
            let x = stack_rows(idx.iter().map(|&i| &samples[i].x[..]))?;
            let t = stack_rows(idx.iter().map(|&i| &samples[i].y[..]))?;
            let (y, cache) = local.forward(x.view())?;
            let diff = y - t;
            let n = diff.len() as f64;
            let loss = diff.mapv(|d| d * d).sum() / n;
            if !loss.is_finite() {
                return Err(PfrpError::Numeric(format!("local training loss in epoch {}", epoch + 1)));
            }
            let grads = local.backward(&cache, (diff * (2.0 / n)).view())?;
            let slices: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            adam.step(local.parameters_mut(), &slices)?;
            sum += loss;
        }
        curve.push(sum / batches.len() as f64);
    }
    Ok(curve)
}

/// Future values for `indices`, cut to `horizon`. Useful for display.
pub fn retrieved_values(bank: &MemoryBank, indices: &[usize], horizon: usize) -> Result<Vec<Vec<f64>>> {
    indices
        .iter()
        .map(|&i| slice_horizon(bank.value(i), horizon).map(<[f64]>::to_vec))
        .collect()
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pcl::EncoderConfig;

    const L: usize = 8;
    const H: usize = 4;
    const D: usize = 4;
    const K: usize = 6;

    fn uniform(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-a..a)).collect()
    }

    fn tiny_encoder() -> Encoder {
        Encoder::new(&EncoderConfig {
            lookback: L,
            feature_dim: D,
            hidden: vec![6],
            overlap_threshold: 3,
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    fn tiny_bank(encoder: &Encoder, seed: u64) -> MemoryBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keys = Array2::from_shape_vec((K, D), uniform(&mut rng, K * D, 1.0)).unwrap();
        crate::pcl::normalize_rows(&mut keys);
        MemoryBank {
            lookback: L,
            horizon: H + 2,
            feature_dim: D,
            keys,
            values: Array2::from_shape_vec((K, H + 2), uniform(&mut rng, K * (H + 2), 1.0)).unwrap(),
            raw_x: Some(Array2::from_shape_vec((K, L), uniform(&mut rng, K * L, 1.0)).unwrap()),
            start_indices: (0..K as u64).collect(),
            encoder_hash: encoder.content_hash(),
            seed,
            dataset: "tiny".into(),
        }
    }

    fn tiny_config(k: usize) -> PfrpConfig {
        PfrpConfig {
            k,
            horizon: H,
            confidence_hidden: vec![5],
            output_hidden: vec![5],
            fusion_hidden: vec![3],
            batch_size: 3,
            ..PfrpConfig::default()
        }
    }

    fn randomize(model: &mut PfrpModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.trainable_parameters_mut(false) {
            for v in p.iter_mut() {
                *v = rng.gen_range(-0.6..0.6);
            }
        }
    }

    fn samples(n: usize, seed: u64) -> Vec<WindowSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| WindowSample {
                x: uniform(&mut rng, L, 1.0),
                y: uniform(&mut rng, H, 1.0),
                start_index: i,
            })
            .collect()
    }

    fn max_fd_error(model: &PfrpModel, batch: &Batch) -> f64 {
        let (_, grads) = model.loss_and_grads(batch, false).unwrap();
        let mut probe = model.clone();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (pi, g) in grads.iter().enumerate() {
            for (j, &analytic) in g.iter().enumerate() {
                let orig = probe.trainable_parameters(false)[pi][j];
                probe.trainable_parameters_mut(false)[pi][j] = orig + h;
                let up = probe.loss_and_grads(batch, false).unwrap().0;
                probe.trainable_parameters_mut(false)[pi][j] = orig - h;
                let down = probe.loss_and_grads(batch, false).unwrap().0;
                probe.trainable_parameters_mut(false)[pi][j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic - numeric).abs() / scale);
            }
        }
        worst
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let encoder = tiny_encoder();
        let bank = tiny_bank(&encoder, 1);
        let ablations = [
            Ablation::default(),
            Ablation { no_confidence_gate: true, ..Ablation::default() },
            Ablation { no_output_gate: true, ..Ablation::default() },
            Ablation { no_local_model: true, ..Ablation::default() },
        ];
        for (case, kind) in [LocalKind::Linear, LocalKind::Dlinear].into_iter().enumerate() {
            for ablation in ablations {
                let cfg = PfrpConfig { local_kind: kind, ablation, ..tiny_config(2) };
                let retriever = Retriever::new(&encoder, &bank, &cfg).unwrap();
                let data = samples(3, 7 + case as u64);
                let set = TrainingSet::new(&retriever, &data).unwrap();
                let mut model = PfrpModel::new(L, &cfg).unwrap();
                randomize(&mut model, 11);
                let err = max_fd_error(&model, &set.batch(&[0, 1, 2]).unwrap());
                assert!(err < 1e-4, "{kind:?} {ablation:?}: {err}");
            }
        }
    }

    #[test]
    fn fresh_model_passes_global_prediction_through() {
        let encoder = tiny_encoder();
        let bank = tiny_bank(&encoder, 2);
        let cfg = tiny_config(3);
        let retriever = Retriever::new(&encoder, &bank, &cfg).unwrap();
        let model = PfrpModel::new(L, &cfg).unwrap();
        for s in samples(20, 3) {
            let pred = model.forward(&retriever, &s.x).unwrap();
            assert_eq!(pred.y1, pred.y1_bar);
            assert_eq!(pred.fusion, (0.5, 0.5));
            assert!(pred.alpha.iter().all(|&a| a == 1.0) && pred.beta.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn disabled_gates_reduce_to_similarity_softmax() {
        let encoder = tiny_encoder();
        let bank = tiny_bank(&encoder, 4);
        let ablation = Ablation { no_confidence_gate: true, no_output_gate: true, no_local_model: false };
        let cfg = PfrpConfig { ablation, ..tiny_config(4) };
        let retriever = Retriever::new(&encoder, &bank, &cfg).unwrap();
        let mut model = PfrpModel::new(L, &cfg).unwrap();
        randomize(&mut model, 5);
        for s in samples(20, 6) {
            let pred = model.forward(&retriever, &s.x).unwrap();
            let r = retriever.retrieve(&s.x).unwrap();
            let m = r.weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.weights.iter().map(|w| (w - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..H {
                let attn: f64 = e.iter().zip(&r.values).map(|(ei, v)| ei / z * v[t]).sum();
                assert!((pred.y1[t] - attn).abs() < 1e-12);
            }
            assert!(pred.confidences.iter().all(|&p| p == 1.0));
        }
    }

    #[test]
    fn without_local_model_output_is_global() {
        let encoder = tiny_encoder();
        let bank = tiny_bank(&encoder, 8);
        let cfg = PfrpConfig {
            ablation: Ablation { no_local_model: true, ..Ablation::default() },
            ..tiny_config(2)
        };
        let retriever = Retriever::new(&encoder, &bank, &cfg).unwrap();
        let mut model = PfrpModel::new(L, &cfg).unwrap();
        randomize(&mut model, 9);
        let pred = model.forward(&retriever, &samples(1, 1)[0].x).unwrap();
        assert_eq!(pred.y, pred.y1);
        assert!(pred.y2.is_none());
    }

    #[test]
    fn operation_examples() {
        let w = modulate_weights(&[3f64.ln(), 0.0], &[1.0, 1.0]).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        assert_eq!(modulate_weights(&[0.3; 4], &[0.5; 4]).unwrap(), vec![0.25; 4]);
        assert!(modulate_weights(&[1.0], &[1.0, 2.0]).is_err());

        let g = global_prediction(&[0.5, 0.5], &[vec![0.0, 2.0], vec![2.0, 0.0]], None, &[0.0]).unwrap();
        assert_eq!(g.y1, vec![1.0, 1.0]);
        let g = global_prediction(&[1.0], &[vec![0.3, -0.7]], None, &[0.0]).unwrap();
        assert_eq!(g.y1_bar, vec![0.3, -0.7]);

        let fusion = Mlp::zeros(&[3, 4, 2], OutputActivation::Identity).unwrap();
        let (w1, w2, y) = dynamic_fusion(&fusion, &[0.2, 0.3, 0.5], &[1.0, 3.0], &[3.0, 5.0]).unwrap();
        assert_eq!((w1, w2), (0.5, 0.5));
        assert_eq!(y, vec![2.0, 4.0]);

        let gate = Mlp::zeros(&[3, 2, 1], OutputActivation::Sigmoid).unwrap();
        let p = confidence_gate(&gate, &[1.0, 2.0], &[vec![1.0], vec![-4.0]]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(confidence_gate(&gate, &[1.0], &[vec![1.0]]).is_err());
    }

    #[test]
    fn batched_and_single_paths_agree() {
        let encoder = tiny_encoder();
        let bank = tiny_bank(&encoder, 12);
        for kind in [LocalKind::Linear, LocalKind::Dlinear] {
            let cfg = PfrpConfig { local_kind: kind, ..tiny_config(3) };
            let retriever = Retriever::new(&encoder, &bank, &cfg).unwrap();
            let mut model = PfrpModel::new(L, &cfg).unwrap();
            randomize(&mut model, 13);
            let data = samples(5, 14);
            let set = TrainingSet::new(&retriever, &data).unwrap();
            let fw = model.forward_batch(&set.batch(&[0, 1, 2, 3, 4]).unwrap()).unwrap();
            for (i, s) in data.iter().enumerate() {
                let pred = model.forward(&retriever, &s.x).unwrap();
                for t in 0..H {
                    assert!((pred.y[t] - fw.y[[i, t]]).abs() < 1e-12);
                }
                assert!((pred.fusion.0 - fw.fusion[[i, 0]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_zero_epochs_is_identity() {
        let encoder = tiny_encoder();
        let bank = tiny_bank(&encoder, 15);
        let cfg = PfrpConfig { lr: 1e-2, epochs: 30, ..tiny_config(2) };
        let retriever = Retriever::new(&encoder, &bank, &cfg).unwrap();
        let data = samples(12, 16);
        let set = TrainingSet::new(&retriever, &data).unwrap();
        let initial = PfrpModel::new(L, &cfg).unwrap();

        let mut model = initial.clone();
        let mut adam = AdamState::new(cfg.lr);
        let none = train_pfrp(&mut model, &mut adam, &set, &PfrpConfig { epochs: 0, ..cfg.clone() }).unwrap();
        assert!(none.is_empty());
        assert_eq!(model, initial);

        let curve = train_pfrp(&mut model, &mut adam, &set, &cfg).unwrap();
        assert_eq!(curve.len(), 30);
        assert!(curve[29] < 0.5 * curve[0], "{curve:?}");

        let mut again = initial.clone();
        train_pfrp(&mut again, &mut AdamState::new(cfg.lr), &set, &cfg).unwrap();
        assert_eq!(again, model);
    }

    #[test]
    fn frozen_local_model_is_untouched() {
        let encoder = tiny_encoder();
        let bank = tiny_bank(&encoder, 17);
        let cfg = PfrpConfig { lr: 1e-2, epochs: 3, freeze_local: true, ..tiny_config(2) };
        let retriever = Retriever::new(&encoder, &bank, &cfg).unwrap();
        let data = samples(6, 18);
        let set = TrainingSet::new(&retriever, &data).unwrap();
        let mut model = PfrpModel::new(L, &cfg).unwrap();
        let local = model.local.clone();
        train_pfrp(&mut model, &mut AdamState::new(cfg.lr), &set, &cfg).unwrap();
        assert_eq!(model.local, local);
    }

    #[test]
    fn retriever_validates_its_inputs() {
        let encoder = tiny_encoder();
        let mut bank = tiny_bank(&encoder, 19);
        assert!(Retriever::new(&encoder, &bank, &tiny_config(K + 1)).is_err());
        assert!(Retriever::new(&encoder, &bank, &PfrpConfig { horizon: H + 3, ..tiny_config(2) }).is_err());
        bank.raw_x = None;
        let dtw = PfrpConfig { retrieval: RetrievalCriterion::WindowDtw, ..tiny_config(2) };
        assert!(Retriever::new(&encoder, &bank, &dtw).is_err());
        bank.encoder_hash = "0".repeat(32);
        assert!(Retriever::new(&encoder, &bank, &tiny_config(2)).is_err());
    }
}
