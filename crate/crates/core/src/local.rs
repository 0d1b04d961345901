//! Local prediction models: a direct linear map and a decomposition-linear
//! model (moving-average trend + seasonal remainder, one affine map each).

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, PfrpError, Result};
use crate::nn::{Mlp, MlpCache, OutputActivation};

pub const DEFAULT_KERNEL: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalKind {
    Linear,
    Dlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LocalPredictor {
    Linear {
        model: Mlp,
    },
    Dlinear {
        kernel: usize,
        trend: Mlp,
        seasonal: Mlp,
    },
}

#[derive(Debug)]
pub enum LocalCache {
    Linear(MlpCache),
    Dlinear { trend: MlpCache, seasonal: MlpCache },
}

/// Centered moving average with edge replication; `trend + seasonal == x`.
pub fn moving_average_decompose(x: &[f64], kernel: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(PfrpError::invalid(format!("kernel {kernel} must be odd")));
    }
    if kernel > x.len() {
        return Err(PfrpError::invalid(format!(
            "kernel {kernel} exceeds window length {}",
            x.len()
        )));
    }
    let half = kernel / 2;
    let n = x.len();
    let at = |i: isize| x[i.clamp(0, n as isize - 1) as usize];
    let trend: Vec<f64> = (0..n as isize)
        .map(|t| (t - half as isize..=t + half as isize).map(at).sum::<f64>() / kernel as f64)
        .collect();
    let seasonal = x.iter().zip(&trend).map(|(v, t)| v - t).collect();
    Ok((trend, seasonal))
}

fn decompose_batch(x: ArrayView2<f64>, kernel: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut trend = Array2::zeros(x.raw_dim());
    let mut seasonal = Array2::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let (t, s) = moving_average_decompose(&row.to_vec(), kernel)?;
        trend.row_mut(i).assign(&ndarray::ArrayView1::from(&t));
        seasonal.row_mut(i).assign(&ndarray::ArrayView1::from(&s));
    }
    Ok((trend, seasonal))
}

impl LocalPredictor {
    pub fn new<R: Rng + ?Sized>(kind: LocalKind, lookback: usize, horizon: usize, rng: &mut R) -> Result<Self> {
        let dims = [lookback, horizon];
        Ok(match kind {
            LocalKind::Linear => LocalPredictor::Linear {
                model: Mlp::new(&dims, OutputActivation::Identity, rng)?,
            },
            LocalKind::Dlinear => {
                let kernel = DEFAULT_KERNEL.min(if lookback % 2 == 1 { lookback } else { lookback - 1 });
                LocalPredictor::Dlinear {
                    kernel,
                    trend: Mlp::new(&dims, OutputActivation::Identity, rng)?,
                    seasonal: Mlp::new(&dims, OutputActivation::Identity, rng)?,
                }
            }
        })
    }

    pub fn kind(&self) -> LocalKind {
        match self {
            LocalPredictor::Linear { .. } => LocalKind::Linear,
            LocalPredictor::Dlinear { .. } => LocalKind::Dlinear,
        }
    }

    fn first(&self) -> &Mlp {
        match self {
            LocalPredictor::Linear { model } => model,
            LocalPredictor::Dlinear { trend, .. } => trend,
        }
    }

    pub fn lookback(&self) -> usize {
        self.first().input_dim()
    }

    pub fn horizon(&self) -> usize {
        self.first().output_dim()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|s| s.len()).sum()
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        match self {
            LocalPredictor::Linear { model } => model.parameters(),
            LocalPredictor::Dlinear { trend, seasonal, .. } => {
                let mut p = trend.parameters();
                p.extend(seasonal.parameters());
                p
            }
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LocalPredictor::Linear { model } => model.parameters_mut(),
            LocalPredictor::Dlinear { trend, seasonal, .. } => {
                let mut p = trend.parameters_mut();
                p.extend(seasonal.parameters_mut());
                p
            }
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, LocalCache)> {
        check_len("local model lookback", self.lookback(), x.ncols())?;
        match self {
            LocalPredictor::Linear { model } => {
                let (y, cache) = model.forward(x)?;
                Ok((y, LocalCache::Linear(cache)))
            }
            LocalPredictor::Dlinear { kernel, trend, seasonal } => {
                let (t, s) = decompose_batch(x, *kernel)?;
                let (yt, ct) = trend.forward(t.view())?;
                let (ys, cs) = seasonal.forward(s.view())?;
                Ok((yt + ys, LocalCache::Dlinear { trend: ct, seasonal: cs }))
            }
        }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.0)
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| PfrpError::invalid(e.to_string()))?;
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Parameter gradients, aligned with [`Self::parameters`].
    pub fn backward(&self, cache: &LocalCache, upstream: ArrayView2<f64>) -> Result<Vec<Vec<f64>>> {
        let flat = |g: crate::nn::MlpGrads| g.slices().into_iter().map(<[f64]>::to_vec).collect::<Vec<_>>();
        match (self, cache) {
            (LocalPredictor::Linear { model }, LocalCache::Linear(c)) => Ok(flat(model.backward(c, upstream)?.0)),
            (LocalPredictor::Dlinear { trend, seasonal, .. }, LocalCache::Dlinear { trend: ct, seasonal: cs }) => {
                let mut g = flat(trend.backward(ct, upstream)?.0);
                g.extend(flat(seasonal.backward(cs, upstream)?.0));
                Ok(g)
            }
            _ => Err(PfrpError::StaleCache("local cache kind does not match the model")),
        }
    }
}

#[cfg(test)]
mod tests {
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Dense;

    #[test]
    fn zero_linear_outputs_zero_and_identity_copies() {
        let zero = LocalPredictor::Linear {
            model: Mlp::zeros(&[4, 3], OutputActivation::Identity).unwrap(),
        };
        assert_eq!(zero.predict_one(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
        let ident = LocalPredictor::Linear {
            model: Mlp::from_layers(
                vec![Dense {
                    weight: Array2::eye(3),
                    bias: Array1::zeros(3),
                }],
                OutputActivation::Identity,
            )
            .unwrap(),
        };
        assert_eq!(ident.predict_one(&[1.5, -2.0, 3.0]).unwrap(), vec![1.5, -2.0, 3.0]);
        assert!(ident.predict_one(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn decomposition_examples() {
        let (t, s) = moving_average_decompose(&[2.0; 7], 3).unwrap();
        assert_eq!(t, vec![2.0; 7]);
        assert_eq!(s, vec![0.0; 7]);
        let x = [0.3, -1.0, 2.5];
        let (t, s) = moving_average_decompose(&x, 1).unwrap();
        assert_eq!(t, x.to_vec());
        assert_eq!(s, vec![0.0; 3]);
        // Padded sequence [0,0,2,0,2,0,0]: windows of three.
        let (t, _) = moving_average_decompose(&[0.0, 2.0, 0.0, 2.0, 0.0], 3).unwrap();
        let expected = [2.0 / 3.0, 2.0 / 3.0, 4.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        for (a, b) in t.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(moving_average_decompose(&x, 2).is_err());
        assert!(moving_average_decompose(&x, 5).is_err());
    }

    #[test]
    fn decomposition_matches_brute_force_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..30).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let k = 7;
        let mut padded = vec![x[0]; k / 2];
        padded.extend_from_slice(&x);
        padded.extend(std::iter::repeat_n(x[29], k / 2));
        let (t, _) = moving_average_decompose(&x, k).unwrap();
        for i in 0..30 {
            let mut acc = 0.0;
            for j in 0..k {
                acc += padded[i + j];
            }
            assert!((t[i] - acc / k as f64).abs() < 1e-14);
        }
    }

    #[test]
    fn dlinear_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = LocalPredictor::new(LocalKind::Dlinear, 5, 2, &mut rng).unwrap();
        let LocalPredictor::Dlinear { kernel, trend, seasonal } = &mut m else { unreachable!() };
        assert_eq!(*kernel, 5);
        seasonal.parameters_mut().iter_mut().for_each(|p| p.fill(0.0));
        let constant = [1.5; 5];
        let expected = trend.predict_one(&constant).unwrap();
        assert_eq!(m.predict_one(&constant).unwrap(), expected);

        let LocalPredictor::Dlinear { trend, seasonal, .. } = &mut m else { unreachable!() };
        trend.parameters_mut()[0].fill(0.0);
        trend.parameters_mut()[1].copy_from_slice(&[0.25, -1.0]);
        seasonal.parameters_mut()[1].copy_from_slice(&[0.5, 0.5]);
        assert_eq!(m.predict_one(&[3.0, 1.0, 4.0, 1.0, 5.0]).unwrap(), vec![0.75, -0.5]);
    }

    fn fd_check(model: &LocalPredictor, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((4, model.lookback()), |_| rng.gen_range(-1.0..1.0));
        let r = Array2::from_shape_fn((4, model.horizon()), |_| rng.gen_range(-1.0..1.0));
        let f = |m: &LocalPredictor| (m.predict(x.view()).unwrap() * &r).sum();
        let (_, cache) = model.forward(x.view()).unwrap();
        let grads = model.backward(&cache, r.view()).unwrap();
        let h = 1e-5;
        for (g, grad) in grads.iter().enumerate() {
            for j in 0..grad.len() {
                let mut p = model.clone();
                p.parameters_mut()[g][j] += h;
                let mut m = model.clone();
                m.parameters_mut()[g][j] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                let err = (fd - grad[j]).abs() / fd.abs().max(grad[j].abs()).max(1e-6);
                assert!(err < 1e-4, "{g}/{j}: {fd} vs {}", grad[j]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        fd_check(&LocalPredictor::new(LocalKind::Linear, 6, 3, &mut rng).unwrap(), 1);
        fd_check(&LocalPredictor::new(LocalKind::Dlinear, 7, 3, &mut rng).unwrap(), 2);
    }

    #[test]
    fn checkpoint_carries_kind_tag() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = LocalPredictor::new(LocalKind::Dlinear, 6, 2, &mut rng).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.starts_with("{\"kind\":\"dlinear\""));
        assert_eq!(serde_json::from_str::<LocalPredictor>(&json).unwrap(), m);
    }

    proptest! {
        #[test]
        fn decomposition_is_exact(x in prop::collection::vec(-1e3f64..1e3, 1..60), k in 0usize..10) {
            let kernel = 2 * k + 1;
            prop_assume!(kernel <= x.len());
            let (t, s) = moving_average_decompose(&x, kernel).unwrap();
            for i in 0..x.len() {
                prop_assert!((t[i] + s[i] - x[i]).abs() <= 1e-12 * x[i].abs().max(1.0));
            }
        }
    }
}
