//! Task evaluation: denoise target clips, classify them and score the
//! predictions with the metric matching the task.

use candle_core::{DType, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{denoise_batch, DenoiseConfig, PreparedBatch};
use crate::error::{Error, Result};
use crate::heads::PoolerParams;
use crate::metrics::{mean_ed_at_z, planning_metrics, top1_accuracy, PredictionRecord};
use crate::model::VeditParams;
use crate::tasks::{TaskExample, TaskKind};
use crate::types::{ProcedureSample, RngSeed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub denoise: DenoiseConfig,
    pub batch_size: usize,
    /// Candidates per sample for anticipation.
    pub candidates: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            denoise: DenoiseConfig::default(),
            batch_size: 128,
            candidates: 5,
            seed: 0,
        }
    }
}

/// One entry per metric; absent metrics are omitted from the JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub task: String,
    pub num_examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ed_at_z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<usize>,
    /// Top-1 with every sample's seen clips taken from another sample.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shuffled_top1: Option<f64>,
}

fn check_labels(examples: &[TaskExample], head: &PoolerParams) -> Result<()> {
    let classes = head.config.classes;
    match examples.iter().flat_map(|e| &e.labels).find(|&&l| l >= classes) {
        Some(l) => Err(Error::TaskHeadMismatch(format!("label {l} for a head with {classes} classes"))),
        None => Ok(()),
    }
}

fn classify(head: &PoolerParams, denoised: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let (b, nk, d) = denoised.dims3()?;
    let nt = nk / k;
    let logits = head.forward(&denoised.reshape((b * nt, k, d))?)?;
    let idx: Vec<u32> = logits.argmax(D::Minus1)?.to_dtype(DType::U32)?.to_vec1()?;
    Ok(idx.chunks(nt).map(|c| c.iter().map(|&i| i as usize).collect()).collect())
}

/// Predicted labels `[example][candidate][target]` for `candidates`
/// independent noise draws per example.
pub fn predict(
    model: &VeditParams,
    head: &PoolerParams,
    examples: &[TaskExample],
    cfg: &EvalConfig,
    candidates: usize,
) -> Result<Vec<Vec<Vec<usize>>>> {
    if candidates == 0 {
        return Err(Error::InvalidConfig("need at least one candidate".into()));
    }
    check_labels(examples, head)?;
    let dcfg = DenoiseConfig {
        track_gradients: false,
        ..cfg.denoise.clone()
    };
    let seed = RngSeed(cfg.seed);
    let mut out = Vec::with_capacity(examples.len());
    for (chunk_idx, chunk) in examples.chunks(cfg.batch_size.max(1)).enumerate() {
        let samples: Vec<&ProcedureSample> = chunk.iter().map(|e| &e.sample).collect();
        let batch = PreparedBatch::new(&samples, model)?;
        let mut per_example = vec![Vec::with_capacity(candidates); chunk.len()];
        for c in 0..candidates {
            let mut rng = seed.derive(chunk_idx as u64).derive(c as u64).rng();
            let denoised = denoise_batch(&batch, model, &dcfg, &mut rng)?;
            for (slot, labels) in per_example.iter_mut().zip(classify(head, &denoised, model.config.tokens_per_clip)?) {
                slot.push(labels);
            }
        }
        out.extend(per_example);
    }
    Ok(out)
}

/// Replaces each example's seen clips with those of another example (a
/// random non-zero rotation of the index), keeping its own targets and
/// labels.
pub fn shuffle_conditioning(examples: &[TaskExample], seed: RngSeed) -> Vec<TaskExample> {
    let n = examples.len();
    if n < 2 {
        return examples.to_vec();
    }
    let shift = seed.rng().random_range(1..n);
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let donor = &examples[(i + shift) % n].sample;
            let mut s = e.sample.clone();
            for j in s.seen_indices() {
                if j < donor.len() {
                    s.clips[j] = donor.clips[j].clone();
                }
            }
            TaskExample {
                sample: s,
                labels: e.labels.clone(),
            }
        })
        .collect()
}

fn flat_top1(preds: &[Vec<usize>], examples: &[TaskExample]) -> Result<f64> {
    let p: Vec<usize> = preds.iter().flatten().copied().collect();
    let g: Vec<usize> = examples.iter().flat_map(|e| e.labels.iter().copied()).collect();
    top1_accuracy(&p, &g)
}

/// Runs the evaluation appropriate for `task`.
pub fn evaluate(
    task: TaskKind,
    model: &VeditParams,
    head: &PoolerParams,
    examples: &[TaskExample],
    cfg: &EvalConfig,
    with_shuffled_control: bool,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Empty);
    }
    let mut report = EvalReport {
        task: task.name().to_string(),
        num_examples: examples.len(),
        ..Default::default()
    };
    match task {
        TaskKind::Forecast | TaskKind::TaskClassify => {
            let preds: Vec<Vec<usize>> = predict(model, head, examples, cfg, 1)?.into_iter().map(|mut c| c.remove(0)).collect();
            report.top1 = Some(flat_top1(&preds, examples)?);
        }
        TaskKind::Plan { .. } => {
            let preds: Vec<Vec<usize>> = predict(model, head, examples, cfg, 1)?.into_iter().map(|mut c| c.remove(0)).collect();
            let gts: Vec<Vec<usize>> = examples.iter().map(|e| e.labels.clone()).collect();
            let s = planning_metrics(&preds, &gts)?;
            report.top1 = Some(flat_top1(&preds, examples)?);
            report.success_rate = Some(s.success_rate);
            report.mean_accuracy = Some(s.mean_accuracy);
            report.mean_iou = Some(s.mean_iou);
        }
        TaskKind::Anticipate { z, .. } => {
            let preds = predict(model, head, examples, cfg, cfg.candidates)?;
            let records: Vec<PredictionRecord<usize>> = preds
                .into_iter()
                .zip(examples)
                .map(|(candidates, e)| PredictionRecord {
                    ground_truth: e.labels.clone(),
                    candidates,
                })
                .collect();
            report.ed_at_z = Some(mean_ed_at_z(&records)?);
            report.k = Some(cfg.candidates);
            report.z = Some(z);
        }
    }
    if with_shuffled_control {
        let shuffled = shuffle_conditioning(examples, RngSeed(cfg.seed).derive(0x5EED));
        let preds: Vec<Vec<usize>> = predict(model, head, &shuffled, cfg, 1)?.into_iter().map(|mut c| c.remove(0)).collect();
        report.shuffled_top1 = Some(flat_top1(&preds, &shuffled)?);
    }
    Ok(report)
}

/// Externally produced predictions, one record per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub task: TaskKind,
    pub records: Vec<PredictionRecord<usize>>,
}

/// Scores a predictions file; tasks other than anticipation use the first
/// candidate of each record.
pub fn evaluate_predictions(file: &PredictionsFile) -> Result<EvalReport> {
    let records = &file.records;
    for r in records {
        r.validate()?;
    }
    let first: Vec<Vec<usize>> = records.iter().map(|r| r.candidates[0].clone()).collect();
    let gts: Vec<Vec<usize>> = records.iter().map(|r| r.ground_truth.clone()).collect();
    let mut report = EvalReport {
        task: file.task.name().to_string(),
        num_examples: records.len(),
        ..Default::default()
    };
    let flat = |v: &[Vec<usize>]| v.iter().flatten().copied().collect::<Vec<_>>();
    match file.task {
        TaskKind::Forecast | TaskKind::TaskClassify => {
            report.top1 = Some(top1_accuracy(&flat(&first), &flat(&gts))?);
        }
        TaskKind::Plan { .. } => {
            let s = planning_metrics(&first, &gts)?;
            report.top1 = Some(top1_accuracy(&flat(&first), &flat(&gts))?);
            report.success_rate = Some(s.success_rate);
            report.mean_accuracy = Some(s.mean_accuracy);
            report.mean_iou = Some(s.mean_iou);
        }
        TaskKind::Anticipate { z, .. } => {
            report.ed_at_z = Some(mean_ed_at_z(records)?);
            report.k = records.first().map(|r| r.candidates.len());
            report.z = Some(z);
        }
    }
    Ok(report)
}
