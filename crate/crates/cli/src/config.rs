//! Run configuration: defaults, optional JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vedit_core::ablation::ExperimentConfig;
use vedit_core::data::{Dataset, SyntheticConfig};
use vedit_core::eval::EvalConfig;
use vedit_core::heads::PoolerConfig;
use vedit_core::tasks::TaskKind;
use vedit_core::training::TrainConfig;
use vedit_core::{Error, ModelConfig, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub pooler_hidden: usize,
    pub pooler_heads: usize,
    pub pooler_deep: bool,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Guidance scale used inside the training loss.
    pub cfg_scale: f64,
    pub task: TaskKind,
    pub seed: u64,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SyntheticConfig::default();
        let exp = ExperimentConfig::desk(data.token_dim, data.tokens_per_clip, data.seq_len);
        Self {
            data,
            model: exp.model,
            pooler_hidden: exp.pooler_hidden,
            pooler_heads: exp.pooler_heads,
            pooler_deep: exp.pooler_deep,
            train: exp.train,
            eval: exp.eval,
            cfg_scale: exp.cfg_scale,
            task: exp.task,
            seed: 0,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Takes clip shape and model length from the dataset.
    pub fn fit_to(&mut self, ds: &Dataset) {
        self.model.token_dim = ds.token_dim;
        self.model.tokens_per_clip = ds.tokens_per_clip;
        self.model.max_len = self.model.max_len.max(self.task.required_len(ds.seq_len)).max(ds.seq_len);
        self.data.num_steps = ds.num_steps;
        self.data.num_tasks = ds.num_tasks;
        self.data.seq_len = ds.seq_len;
    }

    pub fn classes(&self) -> usize {
        if self.task.classifies_task() {
            self.data.num_tasks
        } else {
            self.data.num_steps
        }
    }

    pub fn pooler(&self) -> PoolerConfig {
        PoolerConfig {
            input_dim: self.model.token_dim,
            hidden_dim: self.pooler_hidden,
            heads: self.pooler_heads,
            classes: self.classes(),
            deep: self.pooler_deep,
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            pooler_hidden: self.pooler_hidden,
            pooler_heads: self.pooler_heads,
            pooler_deep: self.pooler_deep,
            train: self.train.clone(),
            eval: self.eval.clone(),
            cfg_scale: self.cfg_scale,
            task: self.task,
            seed: self.seed,
            stop_at_top1: None,
            eval_every: self.train.epochs.max(1),
            shuffled_control: false,
        }
    }
}
