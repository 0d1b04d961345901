//! Dense MLPs with hand-written backward passes and an Adam optimizer.
//!
//! Hidden layers always use ReLU. The output layer is either the identity or
//! a sigmoid. Weights are stored `out x in`, so a layer computes
//! `a_out = a_in · Wᵀ + b` on row-major batches.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, PfrpError, Result};

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MlpCheckpoint", into = "MlpCheckpoint")]
pub struct Mlp {
    layers: Vec<Dense>,
    hidden_activation: HiddenActivation,
    output_activation: OutputActivation,
    // Bumped on every mutable parameter access so stale caches are caught.
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.hidden_activation == other.hidden_activation
            && self.output_activation == other.output_activation
    }
}

/// Activations recorded by [`Mlp::forward`]; `activations[0]` is the input.
#[derive(Debug, Clone)]
pub struct MlpCache {
    activations: Vec<Array2<f64>>,
    generation: u64,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds the input at least")
    }
}

/// Gradients shaped exactly like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        dense_slices(&self.layers)
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&g| g == 0.0))
    }
}

fn dense_slices(layers: &[Dense]) -> Vec<&[f64]> {
    layers
        .iter()
        .flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
        .collect()
}

impl Mlp {
    /// Randomly initialized network. Hidden layers use He-uniform weights,
    /// the output layer uniform weights in `±1/sqrt(fan_in)`; biases start at 0.
    pub fn new<R: Rng + ?Sized>(
        layer_dims: &[usize],
        output_activation: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mlp = Self::zeros(layer_dims, output_activation)?;
        let n = mlp.layers.len();
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            let fan_in = layer.input_dim() as f64;
            let bound = if i + 1 < n {
                (6.0 / fan_in).sqrt()
            } else {
                1.0 / fan_in.sqrt()
            };
            layer
                .weight
                .iter_mut()
                .for_each(|w| *w = rng.gen_range(-bound..bound));
        }
        Ok(mlp)
    }

    pub fn zeros(layer_dims: &[usize], output_activation: OutputActivation) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(PfrpError::invalid(format!(
                "layer dims {layer_dims:?} need at least two positive entries"
            )));
        }
        Ok(Self {
            layers: layer_dims
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
            hidden_activation: HiddenActivation::Relu,
            output_activation,
            generation: fresh_generation(),
        })
    }

    pub fn from_layers(layers: Vec<Dense>, output_activation: OutputActivation) -> Result<Self> {
        if layers.is_empty() {
            return Err(PfrpError::invalid("an MLP needs at least one layer"));
        }
        for pair in layers.windows(2) {
            check_len("layer chaining", pair[0].output_dim(), pair[1].input_dim())?;
        }
        for l in &layers {
            check_len("bias length", l.output_dim(), l.bias.len())?;
        }
        Ok(Self {
            layers,
            hidden_activation: HiddenActivation::Relu,
            output_activation,
            generation: fresh_generation(),
        })
    }

    /// Zeroes the final layer (weights and bias).
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        self.generation = fresh_generation();
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::output_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").output_dim()
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        dense_slices(&self.layers)
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation = fresh_generation();
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        check_len("mlp input width", self.input_dim(), batch.ncols())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(batch.to_owned());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = activations[i].dot(&layer.weight.t());
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            } else if self.output_activation == OutputActivation::Sigmoid {
                z.mapv_inplace(sigmoid);
            }
            activations.push(z);
        }
        let out = activations.last().expect("non-empty").clone();
        Ok((
            out,
            MlpCache {
                activations,
                generation: self.generation,
            },
        ))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("mlp input width", self.input_dim(), batch.ncols())?;
        let last = self.layers.len() - 1;
        let mut a = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight.t());
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            } else if self.output_activation == OutputActivation::Sigmoid {
                z.mapv_inplace(sigmoid);
            }
            a = z;
        }
        Ok(a)
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Gradients of `sum(upstream ⊙ output)` with respect to every parameter
    /// and to the input batch.
    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        if cache.generation != self.generation
            || cache.activations.len() != self.layers.len() + 1
        {
            return Err(PfrpError::StaleCache(
                "cache was produced by a different or since-updated model",
            ));
        }
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(PfrpError::Shape {
                context: "mlp upstream gradient",
                expected: out.len(),
                actual: upstream.len(),
            });
        }
        let mut delta = upstream.to_owned();
        if self.output_activation == OutputActivation::Sigmoid {
            delta.zip_mut_with(out, |d, &s| *d *= s * (1.0 - s));
        }
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let input = &cache.activations[i];
            let layer = &self.layers[i];
            let weight = delta.t().dot(input);
            let bias = delta.sum_axis(Axis(0));
            grads.push(Dense { weight, bias });
            let mut next = delta.dot(&layer.weight);
            if i > 0 {
                next.zip_mut_with(input, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            delta = next;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MlpCheckpoint {
    version: u32,
    layer_dims: Vec<usize>,
    hidden_activation: HiddenActivation,
    output_activation: OutputActivation,
    /// Row-major `out x in` per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<Mlp> for MlpCheckpoint {
    fn from(m: Mlp) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            layer_dims: m.layer_dims(),
            hidden_activation: m.hidden_activation,
            output_activation: m.output_activation,
            weights: m
                .layers
                .iter()
                .map(|l| l.weight.iter().copied().collect())
                .collect(),
            biases: m.layers.iter().map(|l| l.bias.to_vec()).collect(),
        }
    }
}

impl TryFrom<MlpCheckpoint> for Mlp {
    type Error = PfrpError;

    fn try_from(c: MlpCheckpoint) -> Result<Self> {
        if c.version != CHECKPOINT_VERSION {
            return Err(PfrpError::Version(format!(
                "mlp checkpoint version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        let n = c.layer_dims.len().saturating_sub(1);
        if n == 0 || c.weights.len() != n || c.biases.len() != n {
            return Err(PfrpError::data("mlp checkpoint layer count mismatch"));
        }
        let mut layers = Vec::with_capacity(n);
        for (i, (w, b)) in c.weights.into_iter().zip(c.biases).enumerate() {
            let (fan_in, fan_out) = (c.layer_dims[i], c.layer_dims[i + 1]);
            let weight = Array2::from_shape_vec((fan_out, fan_in), w)
                .map_err(|e| PfrpError::data(format!("layer {i} weights: {e}")))?;
            check_len("checkpoint bias", fan_out, b.len())?;
            if weight.iter().chain(&b).any(|v| !v.is_finite()) {
                return Err(PfrpError::data(format!("layer {i} has non-finite parameters")));
            }
            layers.push(Dense {
                weight,
                bias: Array1::from(b),
            });
        }
        let mut mlp = Mlp::from_layers(layers, c.output_activation)?;
        mlp.hidden_activation = c.hidden_activation;
        Ok(mlp)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward of softmax: given `s = softmax(z)` and `dL/ds`, returns `dL/dz`.
pub fn softmax_backward(s: &[f64], ds: &[f64]) -> Vec<f64> {
    let dot: f64 = s.iter().zip(ds).map(|(a, b)| a * b).sum();
    s.iter().zip(ds).map(|(si, di)| si * (di - dot)).collect()
}

/// Bias-corrected Adam over an ordered list of parameter slices.
///
/// Moment buffers are allocated on the first step and must keep matching
/// the parameter shapes afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(PfrpError::invalid(format!("learning rate {} must be > 0", self.lr)));
        }
        check_len("adam parameter groups", params.len(), grads.len())?;
        for (p, g) in params.iter().zip(grads) {
            check_len("adam gradient", p.len(), g.len())?;
        }
        if self.m.is_empty() && self.step == 0 {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        check_len("adam moment groups", self.m.len(), params.len())?;
        for (p, m) in params.iter().zip(&self.m) {
            check_len("adam moment buffer", m.len(), p.len())?;
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_mlp(&mut self, model: &mut Mlp, grads: &MlpGrads) -> Result<()> {
        self.step(model.parameters_mut(), &grads.slices())
    }
}
