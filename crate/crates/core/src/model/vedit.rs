use candle_core::{DType, Device, Tensor, Var, D};

use super::block::{modulate, vedit_block, BlockParams};
use super::embed::{clip_positions, RopeTables, TimestepEmbedder};
use super::params::{join, layer_norm, Init, Linear, Parameterized};
use crate::error::{Error, Result};
use crate::types::{validate_sample, EmbeddingMatrix, ModelConfig, ProcedureSample, RngSeed};

/// DiT-style output head on the target stream: adaLN-modulated layernorm and
/// a zero-initialised projection back to embedding space.
#[derive(Debug, Clone)]
pub struct FinalLayer {
    /// `hidden → 2·hidden` (shift, scale), zero at init.
    pub modulation: Linear,
    /// `hidden → D`, zero at init.
    pub proj: Linear,
}

impl FinalLayer {
    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (_, _, hidden) = x.dims3()?;
        let (tb, _) = temb.dims2()?;
        let m = self.modulation.forward(&temb.silu()?)?.reshape((tb, 1, 2 * hidden))?;
        let shift = m.narrow(D::Minus1, 0, hidden)?;
        let scale = m.narrow(D::Minus1, hidden, hidden)?;
        self.proj.forward(&modulate(&layer_norm(x)?, &shift, &scale)?)
    }
}

impl Parameterized for FinalLayer {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        self.modulation.collect_params(&join(prefix, "modulation"), out);
        self.proj.collect_params(&join(prefix, "proj"), out);
    }
}

/// All learnable tensors of the velocity model.
#[derive(Debug, Clone)]
pub struct VeditParams {
    pub config: ModelConfig,
    pub time_embed: TimestepEmbedder,
    pub seen_in: Linear,
    pub target_in: Linear,
    pub blocks: Vec<BlockParams>,
    /// `[k, D]` stand-in for every seen clip on the unconditional pass.
    pub null_seen: Var,
    pub final_layer: FinalLayer,
}

impl VeditParams {
    pub fn new(config: &ModelConfig, seed: RngSeed, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed, dtype);
        let h = config.hidden_dim;
        let d = config.token_dim;
        let time_embed = TimestepEmbedder::new(&mut init, config.freq_dim, h)?;
        let seen_in = Linear::xavier(&mut init, d, h)?;
        let target_in = Linear::xavier(&mut init, d, h)?;
        let blocks = (0..config.layers)
            .map(|_| BlockParams::new(&mut init, h, config.attn_heads, config.attention))
            .collect::<Result<Vec<_>>>()?;
        let null_seen = init.normal(&[config.tokens_per_clip, d], 0.02)?;
        let final_layer = FinalLayer {
            modulation: Linear::zeros(&init, h, 2 * h)?,
            proj: Linear::zeros(&init, h, d)?,
        };
        Ok(Self {
            config: config.clone(),
            time_embed,
            seen_in,
            target_in,
            blocks,
            null_seen,
            final_layer,
        })
    }

    /// Appends a freshly initialised (identity) block.
    pub fn push_block(&mut self, seed: RngSeed) -> Result<()> {
        let mut init = Init::new(seed, self.dtype());
        let c = &self.config;
        self.blocks
            .push(BlockParams::new(&mut init, c.hidden_dim, c.attn_heads, c.attention)?);
        self.config.layers = self.blocks.len();
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.null_seen.dtype()
    }

    pub fn device(&self) -> &Device {
        self.null_seen.device()
    }

    /// Null conditioning for `batch` samples with `seen_clips` seen clips each:
    /// `[batch, seen_clips·k, D]`.
    pub fn null_seen_batch(&self, batch: usize, seen_clips: usize) -> Result<Tensor> {
        let (k, d) = self.null_seen.dims2()?;
        let one = self.null_seen.as_tensor().unsqueeze(0)?;
        let clips = Tensor::cat(&vec![one; seen_clips], 1)?;
        Ok(clips.broadcast_as((batch, seen_clips * k, d))?)
    }

    /// Predicted velocity `[B, Nt·k, D]` for the noisy target tokens.
    ///
    /// `rope` holds target positions followed by seen positions.
    pub fn forward(&self, target: &Tensor, seen: &Tensor, sigma: f64, rope: &RopeTables) -> Result<Tensor> {
        let temb = self.time_embed.forward(sigma)?;
        let mut t = self.target_in.forward(target)?;
        let mut s = self.seen_in.forward(seen)?;
        for block in &self.blocks {
            (s, t) = vedit_block(&t, &s, &temb, rope, block)?;
        }
        self.final_layer.forward(&t, &temb)
    }
}

impl Parameterized for VeditParams {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        self.time_embed.collect_params(&join(prefix, "time_embed"), out);
        self.seen_in.collect_params(&join(prefix, "seen_in"), out);
        self.target_in.collect_params(&join(prefix, "target_in"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("blocks.{i}")), out);
        }
        out.push((join(prefix, "null_seen"), self.null_seen.clone()));
        self.final_layer.collect_params(&join(prefix, "final"), out);
    }
}

/// Which clip indices are targets and which are seen, per batch element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLayout {
    pub target_clips: Vec<Vec<usize>>,
    pub seen_clips: Vec<Vec<usize>>,
}

impl BatchLayout {
    pub fn from_masks<'a>(masks: impl IntoIterator<Item = &'a [bool]>) -> Result<Self> {
        let mut target_clips = Vec::new();
        let mut seen_clips = Vec::new();
        for mask in masks {
            target_clips.push((0..mask.len()).filter(|&i| mask[i]).collect::<Vec<_>>());
            seen_clips.push((0..mask.len()).filter(|&i| !mask[i]).collect::<Vec<_>>());
        }
        let layout = Self {
            target_clips,
            seen_clips,
        };
        layout.check_uniform()?;
        Ok(layout)
    }

    fn check_uniform(&self) -> Result<()> {
        let (nt, ns) = (self.num_targets(), self.num_seen());
        if self.target_clips.iter().any(|t| t.len() != nt) || self.seen_clips.iter().any(|s| s.len() != ns) {
            return Err(Error::ShapeMismatch(
                "batched samples need equal target and seen counts".into(),
            ));
        }
        if nt == 0 {
            return Err(Error::EmptyTargetSet);
        }
        if ns == 0 {
            return Err(Error::EmptySeenSet);
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.target_clips.len()
    }

    pub fn num_targets(&self) -> usize {
        self.target_clips.first().map_or(0, Vec::len)
    }

    pub fn num_seen(&self) -> usize {
        self.seen_clips.first().map_or(0, Vec::len)
    }

    /// Per-token positions in joint order `[target…, seen…]`.
    pub fn joint_positions(&self, tokens_per_clip: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
        self.target_clips
            .iter()
            .zip(&self.seen_clips)
            .map(|(t, s)| {
                let mut pos = clip_positions(t, tokens_per_clip);
                pos.extend(clip_positions(s, tokens_per_clip));
                if let Some(&p) = pos.iter().find(|&&p| p >= max_len) {
                    return Err(Error::PositionOutOfRange { pos: p, max_len });
                }
                Ok(pos)
            })
            .collect()
    }

    pub fn rope(&self, cfg: &ModelConfig, dtype: DType, device: &Device) -> Result<RopeTables> {
        let pos = self.joint_positions(cfg.tokens_per_clip, cfg.max_len)?;
        RopeTables::new(&pos, cfg.head_dim, cfg.rope_base, dtype, device)
    }
}

/// Stacks clips into `[B, n·k, D]`; `rows[b]` lists the clips of sample `b`.
pub fn clips_to_tensor(rows: &[Vec<&EmbeddingMatrix>], dtype: DType, device: &Device) -> Result<Tensor> {
    let b = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    let (k, d) = rows
        .first()
        .and_then(|r| r.first())
        .map(|c| c.shape())
        .ok_or(Error::Empty)?;
    let mut data = Vec::with_capacity(b * n * k * d);
    for row in rows {
        if row.len() != n {
            return Err(Error::ShapeMismatch("ragged clip rows".into()));
        }
        for clip in row {
            if clip.shape() != (k, d) {
                return Err(Error::ShapeMismatch(format!(
                    "clip {:?} vs {:?}",
                    clip.shape(),
                    (k, d)
                )));
            }
            data.extend_from_slice(clip.as_slice());
        }
    }
    Ok(Tensor::from_vec(data, (b, n * k, d), device)?.to_dtype(dtype)?)
}

/// Splits `[B, n·k, D]` back into per-sample clip lists.
pub fn tensor_to_clips(t: &Tensor, tokens_per_clip: usize) -> Result<Vec<Vec<EmbeddingMatrix>>> {
    let (b, nk, d) = t.dims3()?;
    if nk % tokens_per_clip != 0 {
        return Err(Error::ShapeMismatch(format!("{nk} tokens with k={tokens_per_clip}")));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let clip_len = tokens_per_clip * d;
    let n = nk / tokens_per_clip;
    (0..b)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let start = (i * n + j) * clip_len;
                    EmbeddingMatrix::new(tokens_per_clip, d, flat[start..start + clip_len].to_vec())
                })
                .collect()
        })
        .collect()
}

/// Single-sample forward pass on embedding matrices: returns the predicted
/// velocity for each target clip, in the order of `sample.target_indices()`.
///
/// `noisy_target` replaces the embeddings of the target clips; the seen clips
/// come from `sample`.
pub fn vedit_forward(
    noisy_target: &[EmbeddingMatrix],
    sample: &ProcedureSample,
    sigma: f64,
    params: &VeditParams,
) -> Result<Vec<EmbeddingMatrix>> {
    validate_sample(sample, &params.config)?;
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::SigmaOutOfRange(sigma));
    }
    let layout = BatchLayout::from_masks([sample.target_mask.as_slice()])?;
    if noisy_target.len() != layout.num_targets() {
        return Err(Error::ShapeMismatch(format!(
            "{} noisy targets for {} target clips",
            noisy_target.len(),
            layout.num_targets()
        )));
    }
    let (dtype, device) = (params.dtype(), params.device().clone());
    let target = clips_to_tensor(&[noisy_target.iter().collect()], dtype, &device)?;
    let seen_rows = vec![layout.seen_clips[0].iter().map(|&i| &sample.clips[i]).collect()];
    let seen = clips_to_tensor(&seen_rows, dtype, &device)?;
    let rope = layout.rope(&params.config, dtype, &device)?;
    let v = params.forward(&target, &seen, sigma, &rope)?;
    Ok(tensor_to_clips(&v, params.config.tokens_per_clip)?.remove(0))
}
