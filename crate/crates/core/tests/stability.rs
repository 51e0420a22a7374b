use candle_core::DType;
use vedit_core::data::{gen_synthetic, SyntheticConfig};
use vedit_core::heads::{PoolerConfig, PoolerParams};
use vedit_core::model::VeditParams;
use vedit_core::tasks::{task_views, TaskKind};
use vedit_core::training::{LrSchedule, TrainConfig, Trainer};
use vedit_core::{ModelConfig, RngSeed};

/// 1000 optimizer steps with the learning rate held at the desk-scale peak on
/// the default synthetic benchmark; every loss must stay finite.
#[test]
fn loss_stays_finite_for_1000_steps_at_peak_lr() {
    let data = gen_synthetic(&SyntheticConfig::default()).unwrap();
    let examples = task_views(&data.train, TaskKind::Forecast).unwrap();
    let mut model_cfg = ModelConfig::desk(16, 1, 10);
    model_cfg.layers = 1;
    model_cfg.hidden_dim = 32;
    model_cfg.head_dim = 8;
    let model = VeditParams::new(&model_cfg, RngSeed(1), DType::F32).unwrap();
    let pooler = PoolerConfig {
        input_dim: 16,
        hidden_dim: 32,
        heads: 4,
        classes: 12,
        deep: false,
    };
    let head = PoolerParams::new(&pooler, RngSeed(2), DType::F32).unwrap();
    let batch_size = 8;
    let epochs = 1000usize.div_ceil(examples.len() / batch_size);
    let tcfg = TrainConfig {
        epochs,
        batch_size,
        lr_warmup_start: 1e-3,
        lr_peak: 1e-3,
        lr_final: 1e-3,
        warmup_epochs: 0.0,
        schedule: LrSchedule::WarmupConstant,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, head, tcfg, 7.0, RngSeed(3), examples.len()).unwrap();
    let mut losses = Vec::new();
    'outer: for _ in 0..epochs {
        let mut stop = false;
        trainer
            .train_epoch(&examples, &mut |r| {
                assert!(r.loss.is_finite(), "step {}: {}", r.step, r.loss);
                assert_eq!(r.lr, 1e-3);
                if losses.len() < 1000 {
                    losses.push(r.loss);
                }
                stop = losses.len() >= 1000;
                Ok(())
            })
            .unwrap();
        if stop {
            break 'outer;
        }
    }
    assert_eq!(losses.len(), 1000);
    let tail = losses[900..].iter().sum::<f64>() / 100.0;
    eprintln!("mean loss over the last 100 steps: {tail:.4}");
}
