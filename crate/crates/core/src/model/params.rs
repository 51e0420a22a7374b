//! Parameter containers and deterministic initialisation.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::Result;
use crate::types::RngSeed;

/// Anything that owns trainable tensors. Names are dot-separated paths and
/// stable across runs; the checkpoint format keys on them.
pub trait Parameterized {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Var)>);

    fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites every parameter with `N(0, std²)` draws. Used by tests that
    /// need a model away from its identity initialisation.
    fn perturb(&self, seed: RngSeed, std: f64) -> Result<()> {
        let mut rng = seed.rng();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        for (_, var) in self.named_params() {
            let data: Vec<f64> = (0..var.elem_count()).map(|_| normal.sample(&mut rng)).collect();
            let t = Tensor::from_vec(data, var.shape(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Source of initial parameter values.
pub struct Init {
    rng: ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
}

impl Init {
    pub fn new(seed: RngSeed, dtype: DType) -> Self {
        Self {
            rng: seed.rng(),
            dtype,
            device: Device::Cpu,
        }
    }

    fn var(&self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Var> {
        Ok(Var::zeros(shape, self.dtype, &self.device)?)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                std * z
            })
            .collect::<Vec<f64>>();
        self.var(data, shape)
    }

    pub fn xavier_uniform(&mut self, out_dim: usize, in_dim: usize) -> Result<Var> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.var(data, &[out_dim, in_dim])
    }
}

/// Affine map `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn xavier(init: &mut Init, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: init.xavier_uniform(out_dim, in_dim)?,
            bias: init.zeros(&[out_dim])?,
        })
    }

    pub fn normal(init: &mut Init, in_dim: usize, out_dim: usize, std: f64) -> Result<Self> {
        Ok(Self {
            weight: init.normal(&[out_dim, in_dim], std)?,
            bias: init.zeros(&[out_dim])?,
        })
    }

    pub fn zeros(init: &Init, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: init.zeros(&[out_dim, in_dim])?,
            bias: init.zeros(&[out_dim])?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies the map over the last axis of `x` (any rank ≥ 1).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().unwrap_or(&0);
        if last != self.in_dim() {
            return Err(crate::Error::ShapeMismatch(format!(
                "linear expects {} input features, got {last}",
                self.in_dim()
            )));
        }
        let rows = x.elem_count() / last;
        let flat = x.reshape((rows, last))?;
        let y = flat
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

impl Parameterized for Linear {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

/// Tanh-approximated GELU built from primitive ops so its gradient is the
/// exact derivative of the forward map.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let inner = ((x.sqr()? * 0.044715)? + 1.0)?.mul(x)?;
    let t = (inner * SQRT_2_OVER_PI)?.tanh()?;
    Ok(((t + 1.0)? * 0.5)?.mul(x)?)
}

pub(crate) const LN_EPS: f64 = 1e-6;

/// Layer normalisation over the last axis without a learned affine.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?)
}

/// Layer normalisation with a learned per-channel gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn new(init: &Init, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: Var::ones(dim, init.dtype, &init.device)?,
            bias: init.zeros(&[dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(layer_norm(x)?
            .broadcast_mul(self.gain.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

impl Parameterized for LayerNorm {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        out.push((join(prefix, "gain"), self.gain.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_manual_product() {
        let mut init = Init::new(RngSeed(3), DType::F64);
        let lin = Linear::normal(&mut init, 3, 2, 1.0).unwrap();
        lin.bias
            .set(&Tensor::new(&[0.5f64, -1.0], &Device::Cpu).unwrap())
            .unwrap();
        let x = Tensor::new(&[[[1.0f64, 2.0, 3.0]]], &Device::Cpu).unwrap();
        let y: Vec<f64> = lin.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let w: Vec<Vec<f64>> = lin.weight.as_tensor().to_vec2().unwrap();
        for o in 0..2 {
            let expected = w[o][0] + 2.0 * w[o][1] + 3.0 * w[o][2] + [0.5, -1.0][o];
            assert!((y[o] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_of_constant_rows_is_zero() {
        let x = Tensor::new(&[[3.0f32, 3.0, 3.0, 3.0]], &Device::Cpu).unwrap();
        let y: Vec<Vec<f32>> = layer_norm(&x).unwrap().to_vec2().unwrap();
        assert_eq!(y, vec![vec![0.0; 4]]);
    }

    #[test]
    fn gelu_matches_builtin_forward() {
        let x = Tensor::new(&[-3.0f64, -0.7, 0.0, 0.4, 2.5], &Device::Cpu).unwrap();
        let a: Vec<f64> = gelu(&x).unwrap().to_vec1().unwrap();
        let b: Vec<f64> = x.gelu().unwrap().to_vec1().unwrap();
        for (a, b) in a.iter().zip(&b) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Init::new(RngSeed(9), DType::F32).normal(&[4, 4], 1.0).unwrap();
        let b = Init::new(RngSeed(9), DType::F32).normal(&[4, 4], 1.0).unwrap();
        let a: Vec<Vec<f32>> = a.as_tensor().to_vec2().unwrap();
        let b: Vec<Vec<f32>> = b.as_tensor().to_vec2().unwrap();
        assert_eq!(a, b);
    }
}
