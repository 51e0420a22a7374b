//! Iterative denoising from Gaussian noise with classifier-free guidance.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{clips_to_tensor, tensor_to_clips, BatchLayout, RopeTables, VeditParams};
use crate::scheduler::{make_schedule, SchedulerConfig};
use crate::types::{validate_sample, EmbeddingMatrix, ProcedureSample};

/// Activations beyond this magnitude abort denoising.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Keep the autograd graph through the loop (training).
    #[serde(default)]
    pub track_gradients: bool,
    /// With gradients tracked, only the last `n` Euler steps are
    /// differentiated; `None` differentiates all of them.
    #[serde(default)]
    pub backprop_steps: Option<usize>,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            steps: 24,
            cfg_scale: 7.0,
            track_gradients: false,
            backprop_steps: None,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidSteps);
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(Error::InvalidConfig(format!("cfg_scale {} must be >= 0", self.cfg_scale)));
        }
        Ok(())
    }
}

/// Anything that predicts the flow velocity of the current noisy targets.
pub trait VelocityModel {
    /// `conditional = false` requests the unconditional (null-conditioned) pass.
    fn velocity(&self, current: &Tensor, sigma: f64, conditional: bool) -> Result<Tensor>;
}

/// The transformer bound to one batch of seen clips.
pub struct Conditioned<'a> {
    pub params: &'a VeditParams,
    /// `[B, Ns·k, D]` seen embeddings, re-supplied at every step.
    pub seen: Tensor,
    pub null_seen: Tensor,
    pub rope: RopeTables,
}

impl<'a> Conditioned<'a> {
    pub fn new(params: &'a VeditParams, seen: Tensor, layout: &BatchLayout) -> Result<Self> {
        let null_seen = params.null_seen_batch(layout.batch(), layout.num_seen())?;
        let rope = layout.rope(&params.config, params.dtype(), params.device())?;
        Ok(Self {
            params,
            seen,
            null_seen,
            rope,
        })
    }
}

impl VelocityModel for Conditioned<'_> {
    fn velocity(&self, current: &Tensor, sigma: f64, conditional: bool) -> Result<Tensor> {
        let seen = if conditional { &self.seen } else { &self.null_seen };
        self.params.forward(current, seen, sigma, &self.rope)
    }
}

/// `[B, n, D]` standard-normal draws.
pub fn draw_noise<R: Rng + ?Sized>(shape: (usize, usize, usize), dtype: DType, device: &Device, rng: &mut R) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2;
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

fn check_divergence(x: &Tensor, step: usize) -> Result<()> {
    let peak = x.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !peak.is_finite() || peak > DIVERGENCE_LIMIT {
        return Err(Error::NonFiniteValue(format!("denoising state at step {step}")));
    }
    Ok(())
}

/// Runs the guided Euler loop from `noise`; `observe(i, x)` sees the state
/// after step `i`.
pub fn denoise_observed<M: VelocityModel + ?Sized>(
    model: &M,
    noise: Tensor,
    dcfg: &DenoiseConfig,
    observe: &mut dyn FnMut(usize, &Tensor) -> Result<()>,
) -> Result<Tensor> {
    dcfg.validate()?;
    let schedule = make_schedule(&SchedulerConfig::with_steps(dcfg.steps))?;
    let first_tracked = match (dcfg.track_gradients, dcfg.backprop_steps) {
        (false, _) => usize::MAX,
        (true, None) => 0,
        (true, Some(n)) => dcfg.steps.saturating_sub(n),
    };
    let s = dcfg.cfg_scale;
    let mut x = noise;
    for (i, (from, to)) in schedule.intervals().enumerate() {
        let v_cond = model.velocity(&x, from, true)?;
        let v = if s == 1.0 {
            v_cond
        } else {
            let v_uncond = model.velocity(&x, from, false)?;
            (&v_uncond + ((&v_cond - &v_uncond)? * s)?)?
        };
        x = (&x + (v * (to - from))?)?;
        if i < first_tracked {
            x = x.detach();
        }
        check_divergence(&x, i)?;
        observe(i, &x)?;
    }
    Ok(if dcfg.track_gradients { x } else { x.detach() })
}

pub fn denoise_with<M: VelocityModel + ?Sized>(model: &M, noise: Tensor, dcfg: &DenoiseConfig) -> Result<Tensor> {
    denoise_observed(model, noise, dcfg, &mut |_, _| Ok(()))
}

/// `K` independent denoising runs, each from fresh noise.
pub fn denoise_k_with<M: VelocityModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    shape: (usize, usize, usize),
    dtype: DType,
    device: &Device,
    dcfg: &DenoiseConfig,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be >= 1".into()));
    }
    (0..k)
        .map(|_| denoise_with(model, draw_noise(shape, dtype, device, rng)?, dcfg))
        .collect()
}

/// Seen embeddings and layout of a batch of samples with matching
/// seen/target counts.
pub struct PreparedBatch {
    pub layout: BatchLayout,
    /// `[B, Ns·k, D]`
    pub seen: Tensor,
    /// Ground-truth target embeddings `[B, Nt·k, D]`.
    pub targets: Tensor,
}

impl PreparedBatch {
    pub fn new(samples: &[&ProcedureSample], params: &VeditParams) -> Result<Self> {
        for s in samples {
            validate_sample(s, &params.config)?;
        }
        let layout = BatchLayout::from_masks(samples.iter().map(|s| s.target_mask.as_slice()))?;
        let gather = |idx: &Vec<Vec<usize>>| -> Vec<Vec<&EmbeddingMatrix>> {
            samples
                .iter()
                .zip(idx)
                .map(|(s, ids)| ids.iter().map(|&i| &s.clips[i]).collect())
                .collect()
        };
        let (dtype, device) = (params.dtype(), params.device());
        Ok(Self {
            seen: clips_to_tensor(&gather(&layout.seen_clips), dtype, device)?,
            targets: clips_to_tensor(&gather(&layout.target_clips), dtype, device)?,
            layout,
        })
    }

    pub fn target_shape(&self) -> Result<(usize, usize, usize)> {
        Ok(self.targets.dims3()?)
    }
}

/// Denoises the target clips of a batch; returns `[B, Nt·k, D]`.
pub fn denoise_batch<R: Rng + ?Sized>(
    batch: &PreparedBatch,
    params: &VeditParams,
    dcfg: &DenoiseConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let model = Conditioned::new(params, batch.seen.clone(), &batch.layout)?;
    let noise = draw_noise(batch.target_shape()?, params.dtype(), params.device(), rng)?;
    denoise_with(&model, noise, dcfg)
}

/// Predicted embeddings for each target clip of `sample`.
pub fn denoise<R: Rng + ?Sized>(
    sample: &ProcedureSample,
    params: &VeditParams,
    dcfg: &DenoiseConfig,
    rng: &mut R,
) -> Result<Vec<EmbeddingMatrix>> {
    let batch = PreparedBatch::new(&[sample], params)?;
    let out = denoise_batch(&batch, params, dcfg, rng)?;
    Ok(tensor_to_clips(&out, params.config.tokens_per_clip)?.remove(0))
}

/// `K` candidate predictions with independent noise draws.
pub fn denoise_k<R: Rng + ?Sized>(
    sample: &ProcedureSample,
    params: &VeditParams,
    dcfg: &DenoiseConfig,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<EmbeddingMatrix>>> {
    let batch = PreparedBatch::new(&[sample], params)?;
    let model = Conditioned::new(params, batch.seen.clone(), &batch.layout)?;
    denoise_k_with(&model, batch.target_shape()?, params.dtype(), params.device(), dcfg, k, rng)?
        .iter()
        .map(|t| Ok(tensor_to_clips(t, params.config.tokens_per_clip)?.remove(0)))
        .collect()
}
