//! Attentive-pooler classifiers: a single learned query cross-attends over
//! the tokens of one or more clips, followed by a linear layer.

use candle_core::{DType, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gelu, Init, LayerNorm, Linear, Parameterized};
use crate::types::{EmbeddingMatrix, RngSeed};

/// Number of self-attention blocks in front of the deep pooler.
pub const DEEP_PREFIX_BLOCKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolerConfig {
    /// Token width `D` of the pooled embeddings.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub classes: usize,
    #[serde(default)]
    pub deep: bool,
}

impl PoolerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden_dim % self.heads != 0 || self.classes == 0 || self.input_dim == 0 {
            return Err(Error::InvalidConfig(format!("invalid pooler config {self:?}")));
        }
        Ok(())
    }
}

/// Pre-norm single-head transformer block over the raw tokens.
#[derive(Debug, Clone)]
pub struct PrefixBlock {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl PrefixBlock {
    fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(init, dim)?,
            q: Linear::xavier(init, dim, dim)?,
            k: Linear::xavier(init, dim, dim)?,
            v: Linear::xavier(init, dim, dim)?,
            out: Linear::xavier(init, dim, dim)?,
            norm2: LayerNorm::new(init, dim)?,
            ff_in: Linear::xavier(init, dim, 4 * dim)?,
            ff_out: Linear::xavier(init, 4 * dim, dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = x.dim(D::Minus1)?;
        let h = self.norm1.forward(x)?;
        let (q, k, v) = (self.q.forward(&h)?, self.k.forward(&h)?, self.v.forward(&h)?);
        let scores = (q.matmul(&k.t()?)? / (dim as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?.matmul(&v)?;
        let x = (x + self.out.forward(&attn)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.ff_out.forward(&gelu(&self.ff_in.forward(&h)?)?)?)?)
    }
}

impl Parameterized for PrefixBlock {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        let j = |n: &str| format!("{prefix}.{n}");
        self.norm1.collect_params(&j("norm1"), out);
        self.q.collect_params(&j("attn.q"), out);
        self.k.collect_params(&j("attn.k"), out);
        self.v.collect_params(&j("attn.v"), out);
        self.out.collect_params(&j("attn.out"), out);
        self.norm2.collect_params(&j("norm2"), out);
        self.ff_in.collect_params(&j("ff.fc1"), out);
        self.ff_out.collect_params(&j("ff.fc2"), out);
    }
}

#[derive(Debug, Clone)]
pub struct PoolerParams {
    pub config: PoolerConfig,
    /// `[1, hidden]`
    pub query: Var,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub prefix: Vec<PrefixBlock>,
    /// `hidden → classes`, zero at init.
    pub head: Linear,
}

impl PoolerParams {
    pub fn new(config: &PoolerConfig, seed: RngSeed, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed, dtype);
        let (d, h) = (config.input_dim, config.hidden_dim);
        let prefix = if config.deep {
            (0..DEEP_PREFIX_BLOCKS)
                .map(|_| PrefixBlock::new(&mut init, d))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            config: config.clone(),
            query: init.normal(&[1, h], 0.02)?,
            q: Linear::xavier(&mut init, h, h)?,
            k: Linear::xavier(&mut init, d, h)?,
            v: Linear::xavier(&mut init, d, h)?,
            out: Linear::xavier(&mut init, h, h)?,
            prefix,
            head: Linear::zeros(&init, h, config.classes)?,
        })
    }

    pub fn dtype(&self) -> DType {
        self.query.dtype()
    }

    /// Pools `[B, S, D]` tokens into `[B, hidden]`.
    pub fn pool(&self, x: &Tensor) -> Result<Tensor> {
        let (b, s, d) = x.dims3()?;
        if d != self.config.input_dim || s == 0 {
            return Err(Error::ShapeMismatch(format!(
                "pooler expects [B, S>=1, {}], got [{b}, {s}, {d}]",
                self.config.input_dim
            )));
        }
        let mut x = x.clone();
        for block in &self.prefix {
            x = block.forward(&x)?;
        }
        let (heads, hidden) = (self.config.heads, self.config.hidden_dim);
        let hd = hidden / heads;
        let q = self
            .q
            .forward(self.query.as_tensor())?
            .reshape((1, heads, 1, hd))?
            .broadcast_as((b, heads, 1, hd))?
            .contiguous()?;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, s, heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let k = split(self.k.forward(&x)?)?;
        let v = split(self.v.forward(&x)?)?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let pooled = candle_nn::ops::softmax(&scores, D::Minus1)?
            .matmul(&v)?
            .reshape((b, hidden))?;
        self.out.forward(&pooled)
    }

    /// Logits `[B, classes]` for `[B, S, D]` tokens.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.pool(x)?)
    }
}

impl Parameterized for PoolerParams {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        let j = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        out.push((j("query"), self.query.clone()));
        self.q.collect_params(&j("attn.q"), out);
        self.k.collect_params(&j("attn.k"), out);
        self.v.collect_params(&j("attn.v"), out);
        self.out.collect_params(&j("attn.out"), out);
        for (i, b) in self.prefix.iter().enumerate() {
            b.collect_params(&j(&format!("prefix.{i}")), out);
        }
        self.head.collect_params(&j("head"), out);
    }
}

fn tokens_tensor(clips: &[&EmbeddingMatrix], dtype: DType) -> Result<Tensor> {
    let d = clips.first().ok_or(Error::Empty)?.dim();
    let mut data = Vec::new();
    for c in clips {
        if c.dim() != d {
            return Err(Error::ShapeMismatch(format!("clip width {} vs {d}", c.dim())));
        }
        data.extend_from_slice(c.as_slice());
    }
    let s = data.len() / d;
    Ok(Tensor::from_vec(data, (1, s, d), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Class logits for the tokens of one clip.
pub fn attentive_pool(x: &EmbeddingMatrix, p: &PoolerParams) -> Result<Vec<f32>> {
    let t = tokens_tensor(&[x], p.dtype())?;
    Ok(p.forward(&t)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

/// Class logits for the tokens of several clips pooled together.
pub fn pool_multi(clips: &[EmbeddingMatrix], p: &PoolerParams) -> Result<Vec<f32>> {
    let refs: Vec<&EmbeddingMatrix> = clips.iter().collect();
    let t = tokens_tensor(&refs, p.dtype())?;
    Ok(p.forward(&t)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

/// Index of the largest logit (first on ties).
pub fn argmax(logits: &[f32]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
