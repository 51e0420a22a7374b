//! Shared data model: clip embeddings, procedure samples, model configuration
//! and the seeded random-number contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One clip's latent representation: `tokens × dim` row-major `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    tokens: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(tokens: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if tokens == 0 || dim < 2 || dim % 2 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "embedding must have tokens >= 1 and an even dim >= 2, got {tokens}x{dim}"
            )));
        }
        if data.len() != tokens * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {tokens}x{dim} embedding",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("embedding".into()));
        }
        Ok(Self { tokens, dim, data })
    }

    pub fn zeros(tokens: usize, dim: usize) -> Result<Self> {
        Self::new(tokens, dim, vec![0.0; tokens * dim])
    }

    pub fn from_fn(tokens: usize, dim: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(tokens * dim);
        for t in 0..tokens {
            for c in 0..dim {
                data.push(f(t, c));
            }
        }
        Self::new(tokens, dim, data)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.tokens, self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, token: usize) -> &[f32] {
        &self.data[token * self.dim..(token + 1) * self.dim]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// An ordered procedure: clip embeddings with step labels, a task label and
/// the seen/target split (`true` marks an unseen target clip).
#[derive(Debug, Clone, PartialEq)]
pub struct ProcedureSample {
    pub clips: Vec<EmbeddingMatrix>,
    pub step_labels: Vec<usize>,
    pub task_label: usize,
    pub target_mask: Vec<bool>,
}

impl ProcedureSample {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn seen_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.target_mask[i]).collect()
    }

    pub fn target_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.target_mask[i]).collect()
    }

    pub fn with_mask(&self, target_mask: Vec<bool>) -> Self {
        Self {
            target_mask,
            ..self.clone()
        }
    }

    /// `(tokens, dim)` of the first clip.
    pub fn clip_shape(&self) -> Option<(usize, usize)> {
        self.clips.first().map(EmbeddingMatrix::shape)
    }
}

/// Which attention mechanism fuses the two branches inside each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// Branch-specific projections, one attention over the concatenated sequence.
    #[default]
    Joint,
    /// One shared block applied to the concatenated sequence.
    #[serde(rename = "self")]
    SelfAttention,
    /// Each branch attends only to the other branch.
    Cross,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "self" => Ok(Self::SelfAttention),
            "cross" => Ok(Self::Cross),
            other => Err(Error::InvalidConfig(format!("unknown attention kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::SelfAttention => "self",
            Self::Cross => "cross",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub attn_heads: usize,
    pub head_dim: usize,
    /// Maximum number of clips in a procedure.
    pub max_len: usize,
    pub rope_base: f64,
    /// Channels `D` of each embedding token.
    pub token_dim: usize,
    /// Tokens `k` per clip.
    pub tokens_per_clip: usize,
    #[serde(default = "default_freq_dim")]
    pub freq_dim: usize,
    #[serde(default)]
    pub attention: AttentionKind,
}

fn default_freq_dim() -> usize {
    256
}

impl ModelConfig {
    /// Small configuration used for the synthetic desk-scale runs.
    pub fn desk(token_dim: usize, tokens_per_clip: usize, max_len: usize) -> Self {
        Self {
            layers: 2,
            hidden_dim: 64,
            attn_heads: 4,
            head_dim: 16,
            max_len,
            rope_base: 10_000.0,
            token_dim,
            tokens_per_clip,
            freq_dim: 256,
            attention: AttentionKind::Joint,
        }
    }

    /// Smallest configuration that exercises every code path; used by the
    /// gradient checks.
    pub fn tiny() -> Self {
        Self {
            layers: 1,
            hidden_dim: 8,
            attn_heads: 2,
            head_dim: 4,
            max_len: 4,
            rope_base: 10_000.0,
            token_dim: 4,
            tokens_per_clip: 1,
            freq_dim: 16,
            attention: AttentionKind::Joint,
        }
    }

    /// Published scaling variants: `(name, layers, hidden, heads)` with a head
    /// dimension of 64 throughout.
    pub const SCALE_VARIANTS: [(&'static str, usize, usize, usize); 10] = [
        ("single-1280", 1, 1280, 20),
        ("tiny-1280", 3, 1280, 20),
        ("small-1280", 6, 1280, 20),
        ("large-1280", 12, 1280, 20),
        ("xl-1280", 18, 1280, 20),
        ("single-2048", 1, 2048, 32),
        ("tiny-2048", 3, 2048, 32),
        ("small-2048", 6, 2048, 32),
        ("medium-2048", 9, 2048, 32),
        ("large-2048", 12, 2048, 32),
    ];

    pub fn scale_variant(name: &str, token_dim: usize, tokens_per_clip: usize, max_len: usize) -> Option<Self> {
        Self::SCALE_VARIANTS
            .iter()
            .find(|(n, ..)| *n == name)
            .map(|&(_, layers, hidden_dim, attn_heads)| Self {
                layers,
                hidden_dim,
                attn_heads,
                head_dim: 64,
                max_len,
                rope_base: 10_000.0,
                token_dim,
                tokens_per_clip,
                freq_dim: 256,
                attention: AttentionKind::Joint,
            })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModelConfig(msg));
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.attn_heads * self.head_dim != self.hidden_dim {
            return bad(format!(
                "attn_heads ({}) x head_dim ({}) != hidden_dim ({})",
                self.attn_heads, self.head_dim, self.hidden_dim
            ));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::OddHeadDim(self.head_dim));
        }
        if self.token_dim < 2 || self.token_dim % 2 != 0 || self.tokens_per_clip == 0 {
            return bad(format!(
                "clip shape {}x{} must have k >= 1 and an even D >= 2",
                self.tokens_per_clip, self.token_dim
            ));
        }
        if self.freq_dim < 2 || self.freq_dim % 2 != 0 {
            return bad(format!("freq_dim {} must be even", self.freq_dim));
        }
        if self.max_len == 0 || !(self.rope_base > 1.0) {
            return bad("max_len must be >= 1 and rope_base > 1".into());
        }
        Ok(())
    }
}

/// Seed for every random draw. Sub-streams are derived deterministically so
/// that independent consumers never share a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derives an independent seed for `stream` (splitmix64 finaliser).
    pub fn derive(self, stream: u64) -> RngSeed {
        let mut z = self
            .0
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        RngSeed(z ^ (z >> 31))
    }
}

/// Checks every sample invariant against the model configuration, including
/// the requirement of at least one seen and one target clip.
pub fn validate_sample(s: &ProcedureSample, c: &ModelConfig) -> Result<()> {
    let n = s.clips.len();
    if n == 0 {
        return Err(Error::Empty);
    }
    if s.step_labels.len() != n || s.target_mask.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} clips but {} step labels and {} mask entries",
            s.step_labels.len(),
            s.target_mask.len()
        )));
    }
    for (i, clip) in s.clips.iter().enumerate() {
        if clip.shape() != (c.tokens_per_clip, c.token_dim) {
            return Err(Error::DimensionMismatch(format!(
                "clip {i} is {}x{}, model expects {}x{}",
                clip.tokens(),
                clip.dim(),
                c.tokens_per_clip,
                c.token_dim
            )));
        }
        if clip.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("clip {i}")));
        }
    }
    if n > c.max_len {
        return Err(Error::SequenceTooLong {
            len: n,
            max_len: c.max_len,
        });
    }
    if !s.target_mask.iter().any(|&t| t) {
        return Err(Error::EmptyTargetSet);
    }
    if s.target_mask.iter().all(|&t| t) {
        return Err(Error::EmptySeenSet);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, k: usize, d: usize) -> ProcedureSample {
        let clips = (0..n)
            .map(|i| EmbeddingMatrix::from_fn(k, d, |t, c| (i + t + c) as f32 * 0.1).unwrap())
            .collect();
        let mut target_mask = vec![false; n];
        target_mask[n - 1] = true;
        ProcedureSample {
            clips,
            step_labels: (0..n).collect(),
            task_label: 0,
            target_mask,
        }
    }

    #[test]
    fn nine_clip_sample_fits_max_len_nine() {
        let cfg = ModelConfig::desk(16, 1, 9);
        validate_sample(&sample(9, 1, 16), &cfg).unwrap();
    }

    #[test]
    fn wrong_dim_is_dimension_mismatch() {
        let cfg = ModelConfig::desk(16, 1, 9);
        let mut s = sample(5, 1, 16);
        s.clips[2] = EmbeddingMatrix::zeros(1, 8).unwrap();
        assert!(matches!(validate_sample(&s, &cfg), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn all_false_mask_is_empty_target_set() {
        let cfg = ModelConfig::desk(16, 1, 9);
        let s = sample(5, 1, 16);
        let s = s.with_mask(vec![false; 5]);
        assert!(matches!(validate_sample(&s, &cfg), Err(Error::EmptyTargetSet)));
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let cfg = ModelConfig::desk(16, 1, 9);
        assert!(matches!(
            validate_sample(&sample(10, 1, 16), &cfg),
            Err(Error::SequenceTooLong { len: 10, max_len: 9 })
        ));
    }

    #[test]
    fn embedding_rejects_non_finite_and_odd_dim() {
        assert!(matches!(
            EmbeddingMatrix::new(1, 2, vec![0.0, f32::NAN]),
            Err(Error::NonFiniteValue(_))
        ));
        assert!(EmbeddingMatrix::new(1, 3, vec![0.0; 3]).is_err());
        assert!(EmbeddingMatrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn validate_is_pure() {
        let cfg = ModelConfig::desk(16, 1, 9);
        let s = sample(9, 1, 16);
        for _ in 0..3 {
            assert!(validate_sample(&s, &cfg).is_ok());
        }
    }

    #[test]
    fn derived_seeds_differ_and_repeat() {
        let s = RngSeed(7);
        assert_eq!(s.derive(3), s.derive(3));
        assert_ne!(s.derive(3), s.derive(4));
        assert_ne!(s.derive(0), s);
    }

    #[test]
    fn scale_variants_keep_head_product() {
        for (name, ..) in ModelConfig::SCALE_VARIANTS {
            let cfg = ModelConfig::scale_variant(name, 1152, 16, 9).unwrap();
            cfg.validate().unwrap();
        }
    }
}
