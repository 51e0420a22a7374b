//! Training loops: cross-entropy through the whole denoising loop, masked
//! clip reconstruction, the learning-rate schedule and gradient checking.

mod gradcheck;
mod optim;

pub use gradcheck::{fd_step, grad_check, relative_error, GradCheckReport, TinyCeProblem};
pub use optim::{AdamW, AdamWConfig};

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{denoise_with, draw_noise, Conditioned, DenoiseConfig, PreparedBatch};
use crate::error::{Error, Result};
use crate::heads::PoolerParams;
use crate::model::{Parameterized, VeditParams};
use crate::tasks::TaskExample;
use crate::types::{ProcedureSample, RngSeed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    WarmupCosine,
    WarmupConstant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    CrossEntropy,
    #[serde(alias = "masked-recon")]
    MaskedReconstruction,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-entropy" | "ce" => Ok(Objective::CrossEntropy),
            "masked-reconstruction" | "masked-recon" => Ok(Objective::MaskedReconstruction),
            other => Err(Error::InvalidConfig(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_warmup_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_epochs: f64,
    pub schedule: LrSchedule,
    pub objective: Objective,
    pub cfg_drop_prob: f64,
    /// Denoising steps used inside the training loss.
    pub steps: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr_warmup_start: 5e-6,
            lr_peak: 5e-5,
            lr_final: 5e-7,
            warmup_epochs: 3.0,
            schedule: LrSchedule::WarmupCosine,
            objective: Objective::CrossEntropy,
            cfg_drop_prob: 0.1,
            steps: 24,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.steps == 0 {
            return bad("epochs, batch_size and steps must be positive");
        }
        if !(self.lr_warmup_start > 0.0 && self.lr_warmup_start <= self.lr_peak && self.lr_final <= self.lr_peak) {
            return bad("learning rates need 0 < warmup_start <= peak and final <= peak");
        }
        if !(0.0..=self.epochs as f64).contains(&self.warmup_epochs) {
            return bad("warmup_epochs must lie in [0, epochs]");
        }
        if !(0.0..=1.0).contains(&self.cfg_drop_prob) {
            return bad("cfg_drop_prob must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }
}

/// Learning rate at optimizer step `step` of `total_steps`: linear warmup
/// from `lr_warmup_start` to `lr_peak`, then cosine decay to `lr_final` (or
/// constant at the peak).
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = if cfg.epochs == 0 {
        0.0
    } else {
        cfg.warmup_epochs / cfg.epochs as f64 * total_steps as f64
    };
    let s = step.min(total_steps) as f64;
    if s < warmup {
        return cfg.lr_warmup_start + (cfg.lr_peak - cfg.lr_warmup_start) * s / warmup;
    }
    match cfg.schedule {
        LrSchedule::WarmupConstant => cfg.lr_peak,
        LrSchedule::WarmupCosine => {
            let span = total_steps as f64 - warmup;
            let progress = if span > 0.0 { (s - warmup) / span } else { 1.0 };
            cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * 0.5 * (1.0 + (PI * progress).cos())
        }
    }
}

/// Mean cross-entropy over all target slots after denoising `noise` under
/// the batch's conditioning. `keep[b] = 0` swaps sample `b`'s seen clips for
/// the null embedding on the conditional pass.
pub fn ce_loss(
    model: &VeditParams,
    head: &PoolerParams,
    batch: &PreparedBatch,
    labels: &Tensor,
    noise: Tensor,
    keep: Option<&Tensor>,
    dcfg: &DenoiseConfig,
) -> Result<Tensor> {
    let cond = conditioning(model, batch, keep)?;
    let denoised = denoise_with(&cond, noise, dcfg)?;
    let (b, nk, d) = denoised.dims3()?;
    let k = model.config.tokens_per_clip;
    let logits = head.forward(&denoised.reshape((b * nk / k, k, d))?)?;
    Ok(candle_nn::loss::cross_entropy(&logits, labels)?)
}

/// Mean squared error between denoised and ground-truth target embeddings.
pub fn recon_loss(
    model: &VeditParams,
    batch: &PreparedBatch,
    noise: Tensor,
    keep: Option<&Tensor>,
    dcfg: &DenoiseConfig,
) -> Result<Tensor> {
    let cond = conditioning(model, batch, keep)?;
    let denoised = denoise_with(&cond, noise, dcfg)?;
    Ok(candle_nn::loss::mse(&denoised, &batch.targets)?)
}

fn conditioning<'a>(model: &'a VeditParams, batch: &PreparedBatch, keep: Option<&Tensor>) -> Result<Conditioned<'a>> {
    let mut cond = Conditioned::new(model, batch.seen.clone(), &batch.layout)?;
    if let Some(keep) = keep {
        let keep = keep.reshape((batch.layout.batch(), 1, 1))?;
        let drop = keep.affine(-1.0, 1.0)?;
        cond.seen = (batch.seen.broadcast_mul(&keep)? + cond.null_seen.broadcast_mul(&drop)?)?;
    }
    Ok(cond)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TrainState {
    /// Optimizer steps taken.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub wallclock_ms: u128,
}

pub const LOG_HEADER: &str = "step,lr,loss,wallclock_ms";

impl StepRecord {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{},{:e},{},{}", self.step, self.lr, self.loss, self.wallclock_ms)
    }
}

/// Model, classifier head and optimizer state for one run. All randomness is
/// derived from `seed` and the step or epoch counter, so a run resumed from a
/// checkpoint continues exactly as the uninterrupted run would.
pub struct Trainer {
    pub model: VeditParams,
    pub head: PoolerParams,
    pub optimizer: AdamW,
    pub tcfg: TrainConfig,
    pub cfg_scale: f64,
    pub seed: RngSeed,
    pub state: TrainState,
    pub total_steps: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(
        model: VeditParams,
        head: PoolerParams,
        tcfg: TrainConfig,
        cfg_scale: f64,
        seed: RngSeed,
        num_examples: usize,
    ) -> Result<Self> {
        tcfg.validate()?;
        let total_steps = tcfg.epochs * tcfg.steps_per_epoch(num_examples);
        Ok(Self {
            optimizer: AdamW::new(tcfg.optimizer),
            model,
            head,
            tcfg,
            cfg_scale,
            seed,
            state: TrainState::default(),
            total_steps,
            started: Instant::now(),
        })
    }

    /// Model parameters followed by head parameters under `head.`.
    pub fn params(&self) -> Vec<(String, Var)> {
        let mut out = self.model.named_params();
        self.head.collect_params("head", &mut out);
        out
    }

    fn dcfg(&self) -> DenoiseConfig {
        DenoiseConfig {
            steps: self.tcfg.steps,
            cfg_scale: self.cfg_scale,
            track_gradients: true,
            backprop_steps: None,
        }
    }

    fn keep_mask<R: Rng>(&self, b: usize, rng: &mut R) -> Result<Tensor> {
        let keep: Vec<f32> = (0..b)
            .map(|_| if rng.random::<f64>() < self.tcfg.cfg_drop_prob { 0.0 } else { 1.0 })
            .collect();
        Ok(Tensor::from_vec(keep, b, self.model.device())?.to_dtype(self.model.dtype())?)
    }

    fn apply(&mut self, loss: Tensor) -> Result<StepRecord> {
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(self.state.step));
        }
        let lr = lr_at(self.state.step, self.total_steps, &self.tcfg);
        let grads = loss.backward()?;
        self.optimizer.step(&self.params(), &grads, lr)?;
        let rec = StepRecord {
            step: self.state.step,
            lr,
            loss: value,
            wallclock_ms: self.started.elapsed().as_millis(),
        };
        self.state.step += 1;
        Ok(rec)
    }

    /// One cross-entropy update on a batch with uniform target counts.
    pub fn ce_step(&mut self, batch: &[&TaskExample]) -> Result<StepRecord> {
        let mut rng = self.seed.derive(self.state.step as u64).rng();
        let samples: Vec<&ProcedureSample> = batch.iter().map(|e| &e.sample).collect();
        let prepared = PreparedBatch::new(&samples, &self.model)?;
        let labels: Vec<u32> = batch.iter().flat_map(|e| e.labels.iter().map(|&l| l as u32)).collect();
        let expected = prepared.layout.batch() * prepared.layout.num_targets();
        if labels.len() != expected {
            return Err(Error::LengthMismatch(labels.len(), expected));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= self.head.config.classes) {
            return Err(Error::TaskHeadMismatch(format!(
                "label {l} for a head with {} classes",
                self.head.config.classes
            )));
        }
        let labels = Tensor::new(labels, self.model.device())?;
        let noise = draw_noise(prepared.target_shape()?, self.model.dtype(), self.model.device(), &mut rng)?;
        let keep = self.keep_mask(batch.len(), &mut rng)?;
        let loss = ce_loss(&self.model, &self.head, &prepared, &labels, noise, Some(&keep), &self.dcfg())?;
        self.apply(loss)
    }

    /// One masked-reconstruction update: a single uniformly chosen clip of
    /// each sample is hidden and denoised.
    pub fn masked_recon_step(&mut self, batch: &[&ProcedureSample]) -> Result<StepRecord> {
        let mut rng = self.seed.derive(self.state.step as u64).rng();
        let masked: Vec<ProcedureSample> = batch
            .iter()
            .map(|s| {
                let hidden = rng.random_range(0..s.len());
                s.with_mask((0..s.len()).map(|i| i == hidden).collect())
            })
            .collect();
        let refs: Vec<&ProcedureSample> = masked.iter().collect();
        let prepared = PreparedBatch::new(&refs, &self.model)?;
        let noise = draw_noise(prepared.target_shape()?, self.model.dtype(), self.model.device(), &mut rng)?;
        let keep = self.keep_mask(batch.len(), &mut rng)?;
        let loss = recon_loss(&self.model, &prepared, noise, Some(&keep), &self.dcfg())?;
        self.apply(loss)
    }

    /// One pass over `data` in a seeded shuffled order; `on_step` sees every
    /// record. Returns the mean batch loss.
    pub fn train_epoch(
        &mut self,
        data: &[TaskExample],
        on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.seed.derive(u64::MAX - self.state.epoch as u64).rng());
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.tcfg.batch_size) {
            let rec = match self.tcfg.objective {
                Objective::CrossEntropy => {
                    let batch: Vec<&TaskExample> = chunk.iter().map(|&i| &data[i]).collect();
                    self.ce_step(&batch)?
                }
                Objective::MaskedReconstruction => {
                    let batch: Vec<&ProcedureSample> = chunk.iter().map(|&i| &data[i].sample).collect();
                    self.masked_recon_step(&batch)?
                }
            };
            on_step(&rec)?;
            total += rec.loss;
            batches += 1;
        }
        self.state.epoch += 1;
        Ok(total / batches as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::PoolerConfig;
    use crate::tasks::{task_view, TaskKind};
    use crate::types::{EmbeddingMatrix, ModelConfig};

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig::default();
        let total = 3000;
        assert_eq!(lr_at(0, total, &cfg), 5e-6);
        assert!((lr_at(300, total, &cfg) - 5e-5).abs() < 1e-18);
        assert!((lr_at(total, total, &cfg) - 5e-7).abs() < 1e-12);
        // continuous across the warmup boundary
        let below = lr_at(299, total, &cfg);
        let step = (5e-5 - 5e-6) / 300.0;
        assert!((lr_at(300, total, &cfg) - below - step).abs() < 1e-12);
        let constant = TrainConfig {
            schedule: LrSchedule::WarmupConstant,
            ..cfg
        };
        assert_eq!(lr_at(2000, total, &constant), 5e-5);
    }

    #[test]
    fn lr_is_monotone_after_warmup() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = (300..=3000).map(|s| lr_at(s, 3000, &cfg)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr_warmup_start: 1e-3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let o: Objective = "masked-recon".parse().unwrap();
        assert_eq!(o, Objective::MaskedReconstruction);
    }

    fn toy_examples(n: usize, classes: usize, d: usize, seed: u64) -> Vec<TaskExample> {
        // class c lives along axis c of the embedding space
        let mut rng = RngSeed(seed).rng();
        (0..n)
            .map(|i| {
                let c = i % classes;
                let clips = (0..3)
                    .map(|_| {
                        EmbeddingMatrix::from_fn(1, d, |_, j| {
                            let jitter: f32 = rng.random_range(-0.05..0.05);
                            if j == c { 1.0 + jitter } else { jitter }
                        })
                        .unwrap()
                    })
                    .collect();
                let s = ProcedureSample {
                    clips,
                    step_labels: vec![c; 3],
                    task_label: c,
                    target_mask: vec![false; 3],
                };
                task_view(&s, TaskKind::Forecast, 0).unwrap()
            })
            .collect()
    }

    fn toy_trainer(classes: usize, hidden: usize, tcfg: TrainConfig, n: usize) -> Trainer {
        let mut cfg = ModelConfig::desk(4, 1, 3);
        cfg.layers = 1;
        cfg.hidden_dim = hidden;
        cfg.attn_heads = 2;
        cfg.head_dim = hidden / 2;
        let model = VeditParams::new(&cfg, RngSeed(1), DType::F32).unwrap();
        let head = PoolerParams::new(
            &PoolerConfig {
                input_dim: 4,
                hidden_dim: hidden,
                heads: 2,
                classes,
                deep: false,
            },
            RngSeed(2),
            DType::F32,
        )
        .unwrap();
        Trainer::new(model, head, tcfg, 7.0, RngSeed(3), n).unwrap()
    }

    #[test]
    fn initial_loss_is_log_classes() {
        let data = toy_examples(32, 4, 4, 0);
        let mut t = toy_trainer(4, 16, TrainConfig { steps: 4, ..TrainConfig::default() }, data.len());
        let batch: Vec<&TaskExample> = data.iter().collect();
        let rec = t.ce_step(&batch).unwrap();
        let ln_c = (4f64).ln();
        assert!((rec.loss - ln_c).abs() / ln_c < 0.05, "{} vs {ln_c}", rec.loss);
    }

    #[test]
    fn two_class_smoke_run() {
        let data = toy_examples(16, 2, 4, 1);
        let tcfg = TrainConfig {
            epochs: 200,
            batch_size: 16,
            lr_warmup_start: 1e-3,
            lr_peak: 1e-2,
            lr_final: 1e-3,
            warmup_epochs: 10.0,
            steps: 4,
            ..TrainConfig::default()
        };
        let mut t = toy_trainer(2, 32, tcfg, data.len());
        let losses: Vec<f64> = (0..200).map(|_| t.train_epoch(&data, &mut |_| Ok(())).unwrap()).collect();
        // single batches swing with how many samples drew the null condition,
        // so the loss is averaged over the last 20 steps (observed: 0.066)
        let tail = losses[180..].iter().sum::<f64>() / 20.0;
        eprintln!("smoke tail loss {tail}");
        assert!(tail < 0.1, "final loss {tail}");
    }

    #[test]
    fn recon_loss_decreases_on_constant_data() {
        let clip = EmbeddingMatrix::new(1, 4, vec![0.5, -0.5, 1.0, 0.0]).unwrap();
        let s = ProcedureSample {
            clips: vec![clip; 3],
            step_labels: vec![0; 3],
            task_label: 0,
            target_mask: vec![false, false, true],
        };
        let data = vec![TaskExample { sample: s, labels: vec![0] }; 8];
        let tcfg = TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr_warmup_start: 1e-3,
            lr_peak: 1e-3,
            lr_final: 1e-3,
            warmup_epochs: 0.0,
            objective: Objective::MaskedReconstruction,
            steps: 4,
            ..TrainConfig::default()
        };
        let mut t = toy_trainer(2, 16, tcfg, data.len());
        let losses: Vec<f64> = (0..100).map(|_| t.train_epoch(&data, &mut |_| Ok(())).unwrap()).collect();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[90..].iter().sum::<f64>() / 10.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
    }

    #[test]
    fn zero_velocity_recon_loss_is_noise_distance() {
        let model = VeditParams::new(&ModelConfig::tiny(), RngSeed(0), DType::F64).unwrap();
        let s = ProcedureSample {
            clips: vec![EmbeddingMatrix::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap(); 3],
            step_labels: vec![0; 3],
            task_label: 0,
            target_mask: vec![false, false, true],
        };
        let batch = PreparedBatch::new(&[&s], &model).unwrap();
        let noise = draw_noise((1, 1, 4), DType::F64, model.device(), &mut RngSeed(4).rng()).unwrap();
        let loss: f64 = recon_loss(&model, &batch, noise.clone(), None, &DenoiseConfig::default())
            .unwrap()
            .to_scalar()
            .unwrap();
        let n: Vec<f64> = noise.flatten_all().unwrap().to_vec1().unwrap();
        let expected = n.iter().zip([1.0, 2.0, 3.0, 4.0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn steps_are_deterministic() {
        let data = toy_examples(8, 2, 4, 2);
        let run = || {
            let mut t = toy_trainer(2, 8, TrainConfig { steps: 2, batch_size: 4, ..TrainConfig::default() }, 8);
            let mut losses = Vec::new();
            for _ in 0..2 {
                t.train_epoch(&data, &mut |r| {
                    losses.push(r.loss);
                    Ok(())
                })
                .unwrap();
            }
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradients_flow_through_every_step() {
        let p = TinyCeProblem::perturbed(DType::F64, RngSeed(11), 0.3).unwrap();
        let grads_with = |backprop_steps| {
            let dcfg = DenoiseConfig { backprop_steps, ..p.dcfg.clone() };
            let loss = ce_loss(&p.model, &p.head, &p.batch, &p.labels, p.noise.clone(), None, &dcfg).unwrap();
            let g = loss.backward().unwrap();
            let w = g.get(p.model.target_in.weight.as_tensor()).unwrap();
            w.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        };
        let full = grads_with(None);
        let last_only = grads_with(Some(1));
        let diff = full.iter().zip(&last_only).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-6, "truncating backprop left gradients unchanged");
    }

    #[test]
    fn tiny_gradcheck_f64() {
        let report = TinyCeProblem::new(DType::F64, RngSeed(11)).unwrap().grad_check(1e-4).unwrap();
        assert!(report.passed, "worst {:?}", report.worst());
    }

    #[test]
    fn perturbed_gradcheck_f64() {
        // away from init every path carries gradient; a finer step keeps the
        // difference quotient's truncation error below the tolerance
        let p = TinyCeProblem::perturbed(DType::F64, RngSeed(12), 0.3).unwrap();
        let report = p.grad_check_with_step(1e-4, 1e-4).unwrap();
        assert!(report.passed, "worst {:?}", report.worst());
    }
}
