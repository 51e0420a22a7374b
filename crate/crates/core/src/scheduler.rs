//! Rectified-flow forward process and the flow-matching Euler sampler.
//!
//! Noise level `σ` runs from 1 (pure noise) to 0 (data). Along the straight
//! path `z_σ = (1 − σ)·z0 + σ·ε` the velocity `dz/dσ = ε − z0` is constant, so
//! an Euler step `z ← z + (σ_to − σ_from)·v` is exact for the true velocity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub steps: usize,
    #[serde(default)]
    pub spacing: Spacing,
    /// Reserved; only 1.0 is supported.
    #[serde(default = "unit_shift")]
    pub shift: f64,
}

fn unit_shift() -> f64 {
    1.0
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            steps: 24,
            spacing: Spacing::Linear,
            shift: 1.0,
        }
    }
}

impl SchedulerConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }
}

/// Descending noise levels `σ_0 = 1 > σ_1 > … > σ_T = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSchedule {
    sigmas: Vec<f64>,
}

impl SigmaSchedule {
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// `(σ_i, σ_{i+1})` for each of the `T` Euler steps.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.sigmas.windows(2).map(|w| (w[0], w[1]))
    }
}

pub fn make_schedule(cfg: &SchedulerConfig) -> Result<SigmaSchedule> {
    if cfg.steps == 0 {
        return Err(Error::InvalidSteps);
    }
    if cfg.shift != 1.0 {
        return Err(Error::InvalidConfig(format!(
            "sigma shift {} is not supported",
            cfg.shift
        )));
    }
    let t = cfg.steps as f64;
    let sigmas = (0..=cfg.steps).map(|i| 1.0 - i as f64 / t).collect();
    Ok(SigmaSchedule { sigmas })
}

fn check_shapes(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `(1 − σ)·z0 + σ·eps`, elementwise.
pub fn forward_interpolate(
    z0: &EmbeddingMatrix,
    eps: &EmbeddingMatrix,
    sigma: f64,
) -> Result<EmbeddingMatrix> {
    check_shapes(z0, eps)?;
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::SigmaOutOfRange(sigma));
    }
    let data = z0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(&z, &e)| ((1.0 - sigma) * z as f64 + sigma * e as f64) as f32)
        .collect();
    EmbeddingMatrix::new(z0.tokens(), z0.dim(), data)
}

/// `sample + (σ_to − σ_from)·velocity`.
pub fn euler_step(
    sample: &EmbeddingMatrix,
    velocity: &EmbeddingMatrix,
    sigma_from: f64,
    sigma_to: f64,
) -> Result<EmbeddingMatrix> {
    check_shapes(sample, velocity)?;
    if !(sigma_to < sigma_from) {
        return Err(Error::NonDecreasingSigma {
            from: sigma_from,
            to: sigma_to,
        });
    }
    let dt = sigma_to - sigma_from;
    let data = sample
        .as_slice()
        .iter()
        .zip(velocity.as_slice())
        .map(|(&x, &v)| (x as f64 + dt * v as f64) as f32)
        .collect();
    EmbeddingMatrix::new(sample.tokens(), sample.dim(), data)
}

/// Uniform draw from the `T` grid points at which the model is evaluated
/// (`σ_0 … σ_{T−1}`).
pub fn sample_training_sigma<R: Rng + ?Sized>(schedule: &SigmaSchedule, rng: &mut R) -> f64 {
    let i = rng.random_range(0..schedule.steps());
    schedule.sigmas[i]
}
