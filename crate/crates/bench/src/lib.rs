//! Fixtures shared by the benchmarks.

use candle_core::DType;
use vedit_core::ablation::ExperimentConfig;
use vedit_core::data::{gen_synthetic, SyntheticConfig};
use vedit_core::denoiser::PreparedBatch;
use vedit_core::heads::PoolerParams;
use vedit_core::model::VeditParams;
use vedit_core::tasks::{task_views, TaskExample, TaskKind};
use vedit_core::{ProcedureSample, RngSeed};

pub struct DeskFixture {
    pub config: ExperimentConfig,
    pub model: VeditParams,
    pub head: PoolerParams,
    pub examples: Vec<TaskExample>,
}

impl DeskFixture {
    /// Desk-scale forecasting model with `batch` validation examples.
    pub fn new(batch: usize) -> Self {
        let data = gen_synthetic(&SyntheticConfig {
            train_samples: 0,
            val_samples: batch,
            standardize: false,
            ..Default::default()
        })
        .expect("synthetic data");
        let config = ExperimentConfig::desk(16, 1, 9);
        let model = VeditParams::new(&config.model, RngSeed(1), DType::F32).expect("model");
        let head = PoolerParams::new(&config.pooler(12), RngSeed(2), DType::F32).expect("head");
        let examples = task_views(&data.val, TaskKind::Forecast).expect("views");
        Self {
            config,
            model,
            head,
            examples,
        }
    }

    pub fn batch(&self) -> PreparedBatch {
        let samples: Vec<&ProcedureSample> = self.examples.iter().map(|e| &e.sample).collect();
        PreparedBatch::new(&samples, &self.model).expect("batch")
    }
}
