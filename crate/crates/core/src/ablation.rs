//! Train-then-evaluate runs on the synthetic benchmark and the sweeps over
//! attention variant, denoising steps and depth built on them.

use std::io::Write;
use std::time::Instant;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::heads::{PoolerConfig, PoolerParams};
use crate::model::VeditParams;
use crate::tasks::{task_views, TaskKind};
use crate::training::{StepRecord, TrainConfig, Trainer};
use crate::types::{AttentionKind, ModelConfig, ProcedureSample, RngSeed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub pooler_hidden: usize,
    pub pooler_heads: usize,
    #[serde(default)]
    pub pooler_deep: bool,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub cfg_scale: f64,
    pub task: TaskKind,
    pub seed: u64,
    /// Stop once validation top-1 reaches this value.
    #[serde(default)]
    pub stop_at_top1: Option<f64>,
    /// Evaluate on validation every this many epochs (and after the last).
    pub eval_every: usize,
    /// Add the shuffled-conditioning control to the final report.
    #[serde(default)]
    pub shuffled_control: bool,
}

impl ExperimentConfig {
    /// Desk-scale forecasting setup for procedures of `seq_len` clips.
    pub fn desk(token_dim: usize, tokens_per_clip: usize, seq_len: usize) -> Self {
        Self {
            model: ModelConfig::desk(token_dim, tokens_per_clip, seq_len + 1),
            pooler_hidden: 64,
            pooler_heads: 4,
            pooler_deep: false,
            train: TrainConfig {
                lr_warmup_start: 1e-4,
                lr_peak: 1e-3,
                lr_final: 1e-5,
                warmup_epochs: 1.0,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            cfg_scale: 7.0,
            task: TaskKind::Forecast,
            seed: 0,
            stop_at_top1: None,
            eval_every: 1,
            shuffled_control: false,
        }
    }

    pub fn pooler(&self, classes: usize) -> PoolerConfig {
        PoolerConfig {
            input_dim: self.model.token_dim,
            hidden_dim: self.pooler_hidden,
            heads: self.pooler_heads,
            classes,
            deep: self.pooler_deep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: Option<f64>,
    pub wallclock_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub epochs: Vec<EpochSummary>,
    pub final_train_loss: f64,
    pub val: EvalReport,
    pub wallclock_ms: u128,
}

impl ExperimentResult {
    pub fn best_val_top1(&self) -> Option<f64> {
        self.epochs.iter().filter_map(|e| e.val_top1).reduce(f64::max)
    }
}

/// Trains a fresh model and head on `train` and evaluates on `val`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    classes: usize,
    train: &[ProcedureSample],
    val: &[ProcedureSample],
    on_epoch: &mut dyn FnMut(&EpochSummary),
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<ExperimentResult> {
    let started = Instant::now();
    let seed = RngSeed(cfg.seed);
    let train_ex = task_views(train, cfg.task)?;
    let val_ex = task_views(val, cfg.task)?;
    let model = VeditParams::new(&cfg.model, seed.derive(10), DType::F32)?;
    let head = PoolerParams::new(&cfg.pooler(classes), seed.derive(11), DType::F32)?;
    let mut trainer = Trainer::new(model, head, cfg.train.clone(), cfg.cfg_scale, seed.derive(12), train_ex.len())?;
    let eval_cfg = EvalConfig {
        seed: seed.derive(13).0,
        ..cfg.eval.clone()
    };
    let mut epochs = Vec::new();
    let mut last_report = None;
    for epoch in 0..cfg.train.epochs {
        let train_loss = trainer.train_epoch(&train_ex, on_step)?;
        let is_last = epoch + 1 == cfg.train.epochs;
        let val_top1 = if is_last || (epoch + 1) % cfg.eval_every.max(1) == 0 {
            let r = evaluate(cfg.task, &trainer.model, &trainer.head, &val_ex, &eval_cfg, false)?;
            let top1 = r.top1;
            last_report = Some(r);
            top1
        } else {
            None
        };
        let summary = EpochSummary {
            epoch,
            train_loss,
            val_top1,
            wallclock_ms: started.elapsed().as_millis(),
        };
        on_epoch(&summary);
        epochs.push(summary);
        if let (Some(target), Some(top1)) = (cfg.stop_at_top1, val_top1) {
            if top1 >= target {
                break;
            }
        }
    }
    let val = match last_report {
        Some(r) if !cfg.shuffled_control => r,
        _ => evaluate(cfg.task, &trainer.model, &trainer.head, &val_ex, &eval_cfg, cfg.shuffled_control)?,
    };
    Ok(ExperimentResult {
        final_train_loss: epochs.last().map_or(f64::NAN, |e| e.train_loss),
        epochs,
        val,
        wallclock_ms: started.elapsed().as_millis(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Attention,
    Steps,
    Layers,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(SweepAxis::Attention),
            "steps" => Ok(SweepAxis::Steps),
            "layers" => Ok(SweepAxis::Layers),
            other => Err(Error::UnknownSweepAxis(other.to_string())),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Attention => "attention",
            SweepAxis::Steps => "steps",
            SweepAxis::Layers => "layers",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::Attention => &["joint", "self", "cross"],
            SweepAxis::Steps => &["1", "4", "12", "20", "24", "36", "44"],
            SweepAxis::Layers => &["1", "3", "6", "12"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let parse = |v: &str| {
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::InvalidConfig(format!("{} value {v:?} must be a positive integer", self.name())))
        };
        match self {
            SweepAxis::Attention => cfg.model.attention = value.parse::<AttentionKind>()?,
            SweepAxis::Steps => {
                let t = parse(value)?;
                cfg.train.steps = t;
                cfg.eval.denoise.steps = t;
            }
            SweepAxis::Layers => cfg.model.layers = parse(value)?,
        }
        Ok(cfg)
    }
}

/// One sweep configuration aggregated over paired seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub seeds: usize,
    pub val_top1_mean: f64,
    pub val_top1_min: f64,
    pub val_top1_max: f64,
    pub final_train_loss_mean: f64,
    pub wallclock_ms: u128,
}

pub const ABLATION_HEADER: &str =
    "axis,value,seeds,val_top1_mean,val_top1_min,val_top1_max,final_train_loss_mean,wallclock_ms";

impl AblationRow {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.axis,
            self.value,
            self.seeds,
            self.val_top1_mean,
            self.val_top1_min,
            self.val_top1_max,
            self.final_train_loss_mean,
            self.wallclock_ms
        )
    }
}

/// Runs every value of `axis` with each seed in `seeds`. Seed `s` fixes the
/// dataset, initialisation and training noise, so configurations are
/// compared on identical draws.
pub fn run_sweep(
    base: &ExperimentConfig,
    data: &SyntheticConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() || values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one value and one seed".into()));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let datasets = seeds
        .iter()
        .map(|&s| gen_synthetic(&SyntheticConfig { seed: s, ..data.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(configs) {
        let started = Instant::now();
        let mut tops = Vec::new();
        let mut losses = Vec::new();
        for (&seed, ds) in seeds.iter().zip(&datasets) {
            let run_cfg = ExperimentConfig { seed, ..cfg.clone() };
            let classes = if run_cfg.task.classifies_task() { data.num_tasks } else { data.num_steps };
            let res = run_experiment(&run_cfg, classes, &ds.train, &ds.val, &mut |_| {}, &mut |_| Ok(()))?;
            tops.push(res.val.top1.unwrap_or(f64::NAN));
            losses.push(res.final_train_loss);
        }
        let n = seeds.len() as f64;
        let row = AblationRow {
            axis: axis.name().to_string(),
            value: value.clone(),
            seeds: seeds.len(),
            val_top1_mean: tops.iter().sum::<f64>() / n,
            val_top1_min: tops.iter().copied().fold(f64::INFINITY, f64::min),
            val_top1_max: tops.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            final_train_loss_mean: losses.iter().sum::<f64>() / n,
            wallclock_ms: started.elapsed().as_millis(),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
