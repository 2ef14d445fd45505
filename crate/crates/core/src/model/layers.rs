//! Row-batched building blocks: affine maps, layer normalization, pointwise
//! activations and inverted dropout. Every routine works on flat row-major
//! buffers of `rows x features` scalars.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::Activation;
use crate::tensor::{gemm, rand_init, InitScheme, MatRef, Scalar, SeededRng, Tensor};

/// Epsilon added to the variance inside the LayerNorm square root.
pub const LN_EPS: f64 = 1e-5;

/// Affine map `y = x W^T + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    /// He-initialized weights, zero bias.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            weight: rand_init(&[out_dim, in_dim], InitScheme::HeFanIn, rng)?,
            bias: Tensor::zeros(&[out_dim]),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Result<Vec<T>> {
        let out_dim = self.out_dim();
        let mut y = Vec::with_capacity(rows * out_dim);
        for _ in 0..rows {
            y.extend_from_slice(self.bias.data());
        }
        let xm = MatRef::new(x, rows, self.in_dim())?;
        gemm(T::one(), xm, self.weight.as_mat().t(), T::one(), &mut y)?;
        Ok(y)
    }

    /// Writes parameter gradients into `grad` (overwriting) and returns `dx`
    /// when requested.
    pub fn backward(&self, x: &[T], dy: &[T], rows: usize, grad: &mut Linear<T>, want_dx: bool) -> Result<Option<Vec<T>>> {
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        let dym = MatRef::new(dy, rows, out_dim)?;
        let xm = MatRef::new(x, rows, in_dim)?;
        gemm(T::one(), dym.t(), xm, T::zero(), grad.weight.data_mut())?;
        let db = grad.bias.data_mut();
        db.fill(T::zero());
        for row in dy.chunks_exact(out_dim) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        if !want_dx {
            return Ok(None);
        }
        let mut dx = vec![T::zero(); rows * in_dim];
        gemm(T::one(), dym, self.weight.as_mat(), T::zero(), &mut dx)?;
        Ok(Some(dx))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Per-row quantities kept from a LayerNorm forward pass.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Tensor::full(&[dim], T::one()),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Result<(Vec<T>, NormStats<T>)> {
        let stats = normalize_rows(x, rows, self.dim(), T::lit(LN_EPS))?;
        let g = self.gain.data();
        let b = self.bias.data();
        let mut y = stats.xhat.clone();
        for row in y.chunks_exact_mut(self.dim()) {
            for ((v, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *v = gi * *v + bi;
            }
        }
        Ok((y, stats))
    }

    pub fn backward(&self, stats: &NormStats<T>, dy: &[T], grad: &mut LayerNorm<T>) -> Vec<T> {
        let dim = self.dim();
        let n = T::lit(dim as f64);
        let g = self.gain.data();
        grad.gain.fill(T::zero());
        grad.bias.fill(T::zero());
        let mut dx = vec![T::zero(); dy.len()];
        let mut dxhat = vec![T::zero(); dim];
        for (r, ((dyr, xh), dxr)) in dy
            .chunks_exact(dim)
            .zip(stats.xhat.chunks_exact(dim))
            .zip(dx.chunks_exact_mut(dim))
            .enumerate()
        {
            let dg = grad.gain.data_mut();
            for j in 0..dim {
                dg[j] = dg[j] + dyr[j] * xh[j];
            }
            let db = grad.bias.data_mut();
            for j in 0..dim {
                db[j] = db[j] + dyr[j];
            }
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for j in 0..dim {
                dxhat[j] = dyr[j] * g[j];
                mean_d = mean_d + dxhat[j];
                mean_dx = mean_dx + dxhat[j] * xh[j];
            }
            mean_d = mean_d / n;
            mean_dx = mean_dx / n;
            let rstd = stats.rstd[r];
            for j in 0..dim {
                dxr[j] = rstd * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

/// Row-wise `(x - mean) / sqrt(var + eps)` with population variance.
pub fn normalize_rows<T: Scalar>(x: &[T], rows: usize, dim: usize, eps: T) -> Result<NormStats<T>> {
    if dim == 0 || x.len() != rows * dim {
        return Err(Error::BadLength {
            shape: vec![rows, dim],
            len: x.len(),
        });
    }
    let n = T::lit(dim as f64);
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    for row in x.chunks_exact(dim) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        xhat.extend(row.iter().map(|&v| (v - mean) * r));
        rstd.push(r);
    }
    Ok(NormStats { xhat, rstd })
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let half = T::lit(0.5);
                half * x * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf())
            }
        }
    }

    /// Derivative; ReLU uses 0 at the origin.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let cdf = T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf());
                let pdf = T::lit(FRAC_1_SQRT_2PI) * (-(x * x) * T::lit(0.5)).exp();
                cdf + x * pdf
            }
        }
    }
}

/// Inverted dropout mask: entries are `0` (dropped) or `1/(1-p)`.
pub fn dropout_mask<T: Scalar>(len: usize, p: f64, rng: &mut SeededRng) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.uniform() < p { T::zero() } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_reference_values() {
        // x * Phi(x) at a few points, Phi from tabulated normal CDF.
        let cases: [(f64, f64); 3] = [(0.0, 0.0), (1.0, 0.841_344_746_068_542_9), (-1.0, -0.158_655_253_931_457_05)];
        for (x, want) in cases {
            assert!((Activation::Gelu.apply(x) - want).abs() < 1e-12f64);
        }
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for act in [Activation::Relu, Activation::Gelu] {
            for &x in &[-2.0f64, -0.3, 0.4, 1.7] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn layer_norm_kills_constants() {
        let ln = LayerNorm::<f64>::new(4);
        let (y, _) = ln.forward(&[3.0; 4], 1).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_forward_adds_bias() {
        let lin = Linear {
            weight: Tensor::<f64>::from_f64(&[1, 1], &[2.0]).unwrap(),
            bias: Tensor::from_f64(&[1], &[1.0]).unwrap(),
        };
        assert_eq!(lin.forward(&[3.0], 1).unwrap(), vec![7.0]);
    }

    #[test]
    fn dropout_mask_values() {
        let mut rng = SeededRng::new(5);
        let mask: Vec<f64> = dropout_mask(1000, 0.25, &mut rng);
        assert!(mask.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let dropped = mask.iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&dropped));
    }
}
