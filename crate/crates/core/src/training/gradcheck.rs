use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::denoiser::{draw_noise, DenoiseConfig, PreparedBatch};
use crate::error::Result;
use crate::heads::{PoolerConfig, PoolerParams};
use crate::model::{Parameterized, VeditParams};
use crate::types::{EmbeddingMatrix, ModelConfig, ProcedureSample, RngSeed};

use super::ce_loss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Worst relative error within each parameter tensor.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Finite-difference step for a parameter dtype.
pub fn fd_step(dtype: DType) -> f64 {
    if dtype == DType::F64 {
        1e-3
    } else {
        1e-2
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Compares the autograd gradient of `loss_fn` with central differences for
/// every element of every parameter.
pub fn grad_check(
    params: &[(String, Var)],
    loss_fn: &dyn Fn() -> Result<Tensor>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let grads = loss_fn()?.backward()?;
    let mut per_param = Vec::with_capacity(params.len());
    for (name, var) in params {
        let original = var.as_tensor().copy()?;
        let dtype = original.dtype();
        let shape = original.shape().clone();
        let base: Vec<f64> = original.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
            None => vec![0.0; base.len()],
        };
        let mut worst = 0.0f64;
        let mut probe = base.clone();
        for i in 0..base.len() {
            let mut eval = |x: f64| -> Result<f64> {
                probe[i] = x;
                var.set(&Tensor::from_slice(&probe, shape.clone(), original.device())?.to_dtype(dtype)?)?;
                scalar(&loss_fn()?)
            };
            let plus = eval(base[i] + step)?;
            let minus = eval(base[i] - step)?;
            probe[i] = base[i];
            let numeric = (plus - minus) / (2.0 * step);
            let re = relative_error(analytic[i], numeric);
            worst = worst.max(re);
        }
        var.set(&original)?;
        per_param.push((name.clone(), worst));
    }
    let max_rel_error = per_param.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        tolerance,
        passed: max_rel_error <= tolerance,
    })
}

/// Small fixed problem for checking cross-entropy through the full denoising
/// loop: one layer, hidden 8, `D = 4`, `k = 1`, three clips with the last one
/// denoised over `T = 2` guided steps.
pub struct TinyCeProblem {
    pub model: VeditParams,
    pub head: PoolerParams,
    pub batch: PreparedBatch,
    pub labels: Tensor,
    pub noise: Tensor,
    pub dcfg: DenoiseConfig,
}

impl TinyCeProblem {
    /// Parameters at their initial values.
    pub fn new(dtype: DType, seed: RngSeed) -> Result<Self> {
        Self::perturbed(dtype, seed, 0.0)
    }

    /// Every parameter redrawn from `N(0, spread²)` (kept at init when
    /// `spread` is zero), so that no path is gated off.
    pub fn perturbed(dtype: DType, seed: RngSeed, spread: f64) -> Result<Self> {
        let cfg = ModelConfig::tiny();
        let model = VeditParams::new(&cfg, seed.derive(1), dtype)?;
        if spread > 0.0 {
            model.perturb(seed.derive(2), spread)?;
        }
        let head = PoolerParams::new(
            &PoolerConfig {
                input_dim: cfg.token_dim,
                hidden_dim: 8,
                heads: 2,
                classes: 3,
                deep: false,
            },
            seed.derive(3),
            dtype,
        )?;
        if spread > 0.0 {
            head.perturb(seed.derive(4), spread)?;
        }
        let mut rng = seed.derive(5).rng();
        let clips = (0..3)
            .map(|_| {
                let t = draw_noise((1, 1, cfg.token_dim), DType::F32, &candle_core::Device::Cpu, &mut rng)?;
                EmbeddingMatrix::new(1, cfg.token_dim, t.flatten_all()?.to_vec1()?)
            })
            .collect::<Result<Vec<_>>>()?;
        let sample = ProcedureSample {
            clips,
            step_labels: vec![0, 1, 2],
            task_label: 0,
            target_mask: vec![false, false, true],
        };
        let batch = PreparedBatch::new(&[&sample], &model)?;
        let noise = draw_noise(batch.target_shape()?, dtype, model.device(), &mut rng)?;
        Ok(Self {
            labels: Tensor::new(&[2u32], model.device())?,
            model,
            head,
            batch,
            noise,
            dcfg: DenoiseConfig {
                steps: 2,
                cfg_scale: 7.0,
                track_gradients: true,
                backprop_steps: None,
            },
        })
    }

    pub fn params(&self) -> Vec<(String, Var)> {
        let mut out = self.model.named_params();
        self.head.collect_params("head", &mut out);
        out
    }

    pub fn loss(&self) -> Result<Tensor> {
        ce_loss(&self.model, &self.head, &self.batch, &self.labels, self.noise.clone(), None, &self.dcfg)
    }

    pub fn grad_check(&self, tolerance: f64) -> Result<GradCheckReport> {
        self.grad_check_with_step(fd_step(self.model.dtype()), tolerance)
    }

    pub fn grad_check_with_step(&self, step: f64, tolerance: f64) -> Result<GradCheckReport> {
        grad_check(&self.params(), &|| self.loss(), step, tolerance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn quadratic_toy() {
        let w = Var::new(&[0.5f64, -1.5, 2.0], &Device::Cpu).unwrap();
        let a = Tensor::new(&[1.0f64, 2.0, 3.0], &Device::Cpu).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let loss = || -> Result<Tensor> { Ok((w.as_tensor().sqr()? * &a)?.sum_all()?) };
        let report = grad_check(&params, &loss, 1e-3, 1e-7).unwrap();
        assert!(report.passed, "{report:?}");
        // the check leaves parameters untouched
        assert_eq!(w.as_tensor().to_vec1::<f64>().unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn report_flags_wrong_gradients() {
        let w = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        // detach hides the dependence from autograd: analytic 0, numeric 2
        let loss = || -> Result<Tensor> { Ok(w.as_tensor().detach().sqr()?.sum_all()?) };
        let report = grad_check(&params, &loss, 1e-3, 1e-4).unwrap();
        assert!(!report.passed);
        assert!((report.max_rel_error - 1.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
