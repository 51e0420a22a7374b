//! Noise-level embedding and rotary position tables.

use candle_core::{DType, Device, Tensor, Var, D};

use super::params::{join, Init, Linear, Parameterized};
use crate::error::{Error, Result};

const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal features of `σ·1000`: `[cos(t·f_0) … cos(t·f_{h−1}), sin(t·f_0) … sin(t·f_{h−1})]`
/// with `f_i = 10000^{−i/h}` and `h = freq_dim / 2`.
pub fn sinusoidal_features(sigma: f64, freq_dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::SigmaOutOfRange(sigma));
    }
    let half = freq_dim / 2;
    let t = sigma * 1000.0;
    let args: Vec<f64> = (0..half)
        .map(|i| t * (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp())
        .collect();
    Ok(args
        .iter()
        .map(|a| a.cos())
        .chain(args.iter().map(|a| a.sin()))
        .collect())
}

/// Two-layer SiLU MLP over the sinusoidal noise-level features.
#[derive(Debug, Clone)]
pub struct TimestepEmbedder {
    pub fc1: Linear,
    pub fc2: Linear,
    freq_dim: usize,
}

impl TimestepEmbedder {
    pub fn new(init: &mut Init, freq_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::normal(init, freq_dim, hidden, 0.02)?,
            fc2: Linear::normal(init, hidden, hidden, 0.02)?,
            freq_dim,
        })
    }

    pub fn freq_dim(&self) -> usize {
        self.freq_dim
    }

    /// Returns a `[1, hidden]` embedding.
    pub fn forward(&self, sigma: f64) -> Result<Tensor> {
        let feats = sinusoidal_features(sigma, self.freq_dim)?;
        let w = &self.fc1.weight;
        let x = Tensor::from_vec(feats, (1, self.freq_dim), w.device())?.to_dtype(w.dtype())?;
        self.fc2.forward(&self.fc1.forward(&x)?.silu()?)
    }
}

impl Parameterized for TimestepEmbedder {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        self.fc1.collect_params(&join(prefix, "fc1"), out);
        self.fc2.collect_params(&join(prefix, "fc2"), out);
    }
}

/// Token positions for a set of clips: every one of the `k` tokens of clip
/// `i` carries position `i`.
pub fn clip_positions(clip_indices: &[usize], tokens_per_clip: usize) -> Vec<usize> {
    clip_indices
        .iter()
        .flat_map(|&i| std::iter::repeat(i).take(tokens_per_clip))
        .collect()
}

/// Precomputed cos/sin tables for one batch of position vectors.
#[derive(Debug, Clone)]
pub struct RopeTables {
    /// `[B, 1, S, head_dim/2]`
    cos: Tensor,
    sin: Tensor,
    seq_len: usize,
    head_dim: usize,
}

impl RopeTables {
    /// `positions[b]` holds one position per token of batch element `b`; all
    /// rows must have the same length.
    pub fn new(
        positions: &[Vec<usize>],
        head_dim: usize,
        base: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(Error::OddHeadDim(head_dim));
        }
        let batch = positions.len();
        let seq_len = positions.first().map_or(0, Vec::len);
        if positions.iter().any(|p| p.len() != seq_len) {
            return Err(Error::ShapeMismatch("ragged position rows".into()));
        }
        let half = head_dim / 2;
        let inv_freq: Vec<f64> = (0..half)
            .map(|j| base.powf(-(2.0 * j as f64) / head_dim as f64))
            .collect();
        let mut cos = Vec::with_capacity(batch * seq_len * half);
        let mut sin = Vec::with_capacity(batch * seq_len * half);
        for row in positions {
            for &p in row {
                for f in &inv_freq {
                    let angle = p as f64 * f;
                    cos.push(angle.cos());
                    sin.push(angle.sin());
                }
            }
        }
        let shape = (batch, 1, seq_len, half);
        Ok(Self {
            cos: Tensor::from_vec(cos, shape, device)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(sin, shape, device)?.to_dtype(dtype)?,
            seq_len,
            head_dim,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Rotates each channel pair `(x_{2j}, x_{2j+1})` of `x: [B, heads, S, head_dim]`.
    pub fn rotate(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, s, hd) = x.dims4()?;
        if s != self.seq_len || hd != self.head_dim {
            return Err(Error::ShapeMismatch(format!(
                "rope tables for S={} hd={}, input S={s} hd={hd}",
                self.seq_len, self.head_dim
            )));
        }
        let pairs = x.reshape((b, h, s, hd / 2, 2))?;
        let x0 = pairs.narrow(D::Minus1, 0, 1)?.squeeze(D::Minus1)?;
        let x1 = pairs.narrow(D::Minus1, 1, 1)?.squeeze(D::Minus1)?;
        let r0 = (x0.broadcast_mul(&self.cos)? - x1.broadcast_mul(&self.sin)?)?;
        let r1 = (x0.broadcast_mul(&self.sin)? + x1.broadcast_mul(&self.cos)?)?;
        Ok(Tensor::stack(&[r0, r1], D::Minus1)?.reshape((b, h, s, hd))?)
    }
}

/// Rotates a single `[tokens, heads·head_dim]` matrix, one position per token.
pub fn rope_rotate(x: &Tensor, positions: &[usize], head_dim: usize, base: f64) -> Result<Tensor> {
    if head_dim % 2 != 0 {
        return Err(Error::OddHeadDim(head_dim));
    }
    let (tokens, width) = x.dims2()?;
    if width % head_dim != 0 || positions.len() != tokens {
        return Err(Error::ShapeMismatch(format!(
            "{tokens}x{width} input with head_dim {head_dim} and {} positions",
            positions.len()
        )));
    }
    let heads = width / head_dim;
    let tables = RopeTables::new(&[positions.to_vec()], head_dim, base, x.dtype(), x.device())?;
    let split = x.reshape((1, tokens, heads, head_dim))?.transpose(1, 2)?;
    let rotated = tables.rotate(&split.contiguous()?)?;
    Ok(rotated.transpose(1, 2)?.reshape((tokens, width))?)
}
