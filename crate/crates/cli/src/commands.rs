use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::DType;
use log::info;
use vedit_core::ablation::{run_sweep, SweepAxis, ABLATION_HEADER};
use vedit_core::data::{
    gen_synthetic, load_checkpoint, read_dataset, save_checkpoint, write_dataset, Checkpoint, Dataset,
};
use vedit_core::eval::{evaluate, evaluate_predictions, EvalReport, PredictionsFile};
use vedit_core::heads::PoolerParams;
use vedit_core::model::VeditParams;
use vedit_core::tasks::{task_views, TaskKind};
use vedit_core::training::{Trainer, LOG_HEADER};
use vedit_core::{Error, Result, RngSeed};

use crate::config::RunConfig;
use crate::{AblateArgs, CommonArgs, DataArgs, EvalArgs, GenDataArgs, ModelArgs, TaskArgs, TrainArgs};

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Defaults, then the stored run (if any), then `--config`, then `--seed`.
fn base_config(common: &CommonArgs, stored: Option<&serde_json::Value>) -> Result<RunConfig> {
    let mut cfg = match stored {
        Some(v) => serde_json::from_value(v.clone()).unwrap_or_default(),
        None => RunConfig::default(),
    };
    if let Some(path) = &common.config {
        cfg = RunConfig::load(path)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) -> Result<()> {
    let d = &mut cfg.data;
    if let Some(v) = a.tasks {
        d.num_tasks = v;
    }
    if let Some(v) = a.vocab {
        d.num_steps = v;
    }
    if let Some(v) = a.len {
        d.seq_len = v;
    }
    if let Some(v) = a.dim {
        d.token_dim = v;
    }
    if let Some(v) = a.tokens {
        d.tokens_per_clip = v;
    }
    if let Some(v) = a.noise_std {
        d.noise_std = v;
    }
    if let Some(v) = &a.transition {
        d.transition = v.parse()?;
    }
    if let Some(v) = a.train_samples {
        d.train_samples = v;
    }
    if let Some(v) = a.val_samples {
        d.val_samples = v;
    }
    d.validate()
}

fn apply_model(cfg: &mut RunConfig, a: &ModelArgs) -> Result<()> {
    let m = &mut cfg.model;
    if let Some(v) = a.layers {
        m.layers = v;
    }
    if let Some(v) = a.heads {
        m.attn_heads = v;
    }
    if let Some(v) = a.hidden {
        m.hidden_dim = v;
    }
    if a.heads.is_some() || a.hidden.is_some() {
        if m.attn_heads == 0 || m.hidden_dim % m.attn_heads != 0 {
            return Err(Error::InvalidModelConfig(format!(
                "hidden {} is not divisible by {} heads",
                m.hidden_dim, m.attn_heads
            )));
        }
        m.head_dim = m.hidden_dim / m.attn_heads;
    }
    if let Some(v) = &a.attention {
        m.attention = v.parse()?;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
        cfg.eval.denoise.steps = v;
    }
    if let Some(v) = a.cfg_scale {
        cfg.cfg_scale = v;
        cfg.eval.denoise.cfg_scale = v;
    }
    Ok(())
}

/// Learning rates keep the default warmup/peak/final ratios around `lr`.
fn apply_training(cfg: &mut RunConfig, epochs: Option<usize>, batch: Option<usize>, lr: Option<f64>) {
    if let Some(v) = epochs {
        cfg.train.epochs = v;
        cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(v as f64);
    }
    if let Some(v) = batch {
        cfg.train.batch_size = v;
    }
    if let Some(lr) = lr {
        let t = &mut cfg.train;
        let (start, end) = (t.lr_warmup_start / t.lr_peak, t.lr_final / t.lr_peak);
        t.lr_peak = lr;
        t.lr_warmup_start = lr * start;
        t.lr_final = lr * end;
    }
}

fn resolve_task(a: &TaskArgs, current: TaskKind, seq_len: usize) -> Result<TaskKind> {
    let name = a.task.as_deref().unwrap_or(current.name());
    let task = match name {
        "forecast" => TaskKind::Forecast,
        "task-classify" => TaskKind::TaskClassify,
        "plan" => {
            let horizon = match (a.horizon, current) {
                (Some(h), _) => h,
                (None, TaskKind::Plan { horizon }) => horizon,
                (None, _) => 3,
            };
            TaskKind::Plan { horizon }
        }
        "anticipate" => {
            let z = match (a.z, current) {
                (Some(z), _) => z,
                (None, TaskKind::Anticipate { z, .. }) => z,
                (None, _) => 1,
            };
            let observed = a.observed.unwrap_or(seq_len.saturating_sub(z).max(1));
            TaskKind::Anticipate { observed, z }
        }
        other => return Err(Error::InvalidConfig(format!("unknown task `{other}`"))),
    };
    if task.required_len(seq_len) > seq_len + usize::from(task.classifies_task()) {
        return Err(Error::InvalidConfig(format!(
            "task {} needs {} clips, the dataset has {seq_len}",
            task.name(),
            task.required_len(seq_len)
        )));
    }
    Ok(task)
}

fn check_head(head: &PoolerParams, task: TaskKind, ds: &Dataset) -> Result<()> {
    let expected = if task.classifies_task() { ds.num_tasks } else { ds.num_steps };
    if head.config.classes != expected {
        return Err(Error::TaskHeadMismatch(format!(
            "head has {} classes, task {} needs {expected}",
            head.config.classes,
            task.name()
        )));
    }
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = base_config(&a.common, None)?;
    apply_data(&mut cfg, &a.data)?;
    let data = gen_synthetic(&cfg.data)?;
    let ds = Dataset {
        tokens_per_clip: cfg.data.tokens_per_clip,
        token_dim: cfg.data.token_dim,
        seq_len: cfg.data.seq_len,
        num_steps: cfg.data.num_steps,
        num_tasks: cfg.data.num_tasks,
        standardization: data.standardization,
        train: data.train,
        val: data.val,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_dataset(&ds, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let mut cfg = base_config(&a.common, resume.as_ref().and_then(|c| c.run.as_ref()))?;
    apply_model(&mut cfg, &a.model)?;
    apply_training(&mut cfg, a.epochs, a.batch_size, a.lr);
    if let Some(o) = &a.objective {
        cfg.train.objective = o.parse()?;
    }
    let ds = read_dataset(&a.data)?;
    cfg.task = resolve_task(&a.task, cfg.task, ds.seq_len)?;
    cfg.fit_to(&ds);
    cfg.paths.dataset = Some(a.data.clone());
    cfg.paths.out_dir = Some(a.out_dir.clone());
    let examples = task_views(&ds.train, cfg.task)?;
    let seed = RngSeed(cfg.seed);

    let (model, head) = match &resume {
        Some(ck) => {
            cfg.model = ck.model_config.clone();
            let head = ck.head(DType::F32)?.ok_or_else(|| Error::MissingTensor("head".into()))?;
            (ck.model(DType::F32)?, head)
        }
        None => {
            cfg.model.validate()?;
            (
                VeditParams::new(&cfg.model, seed.derive(10), DType::F32)?,
                PoolerParams::new(&cfg.pooler(), seed.derive(11), DType::F32)?,
            )
        }
    };
    check_head(&head, cfg.task, &ds)?;
    let mut trainer = Trainer::new(model, head, cfg.train.clone(), cfg.cfg_scale, seed.derive(12), examples.len())?;
    if let Some(ck) = &resume {
        let names: Vec<String> = trainer.params().into_iter().map(|(n, _)| n).collect();
        ck.restore_optimizer(&mut trainer.optimizer, &names, DType::F32)?;
        trainer.state = ck.train_state.unwrap_or_default();
    }

    std::fs::create_dir_all(&a.out_dir).map_err(io_err(&a.out_dir))?;
    let log_path = a.out_dir.join("train_log.csv");
    let append = resume.is_some() && log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(file);
    if !append {
        writeln!(log, "{LOG_HEADER}").map_err(io_err(&log_path))?;
    }

    let run = serde_json::to_value(&cfg)?;
    while trainer.state.epoch < cfg.train.epochs {
        let loss = trainer.train_epoch(&examples, &mut |r| r.write_csv(&mut log).map_err(io_err(&log_path)))?;
        log.flush().map_err(io_err(&log_path))?;
        let path = a.out_dir.join(format!("epoch-{:03}.vedt", trainer.state.epoch));
        save_checkpoint(&Checkpoint::from_trainer(&trainer, Some(run.clone()))?, &path)?;
        info!("epoch {} mean loss {loss:.4}, saved {}", trainer.state.epoch, path.display());
    }
    let final_path = a.out_dir.join("final.vedt");
    save_checkpoint(&Checkpoint::from_trainer(&trainer, Some(run))?, &final_path)?;
    println!("{}", final_path.display());
    Ok(())
}

fn emit(report: &EvalReport, out: Option<&PathBuf>) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, format!("{json}\n")).map_err(io_err(path))?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if let Some(path) = &a.predictions {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let file: PredictionsFile = serde_json::from_slice(&bytes)?;
        return emit(&evaluate_predictions(&file)?, a.out.as_ref());
    }
    let ck_path = a
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("eval needs --checkpoint or --predictions".into()))?;
    let ck = load_checkpoint(ck_path)?;
    let mut cfg = base_config(&a.common, ck.run.as_ref())?;
    apply_model(&mut cfg, &a.model)?;
    if let Some(k) = a.task.k {
        cfg.eval.candidates = k;
    }
    cfg.eval.seed = RngSeed(cfg.seed).derive(13).0;
    let data_path = a
        .data
        .clone()
        .or(cfg.paths.dataset.clone())
        .ok_or_else(|| Error::InvalidConfig("eval needs --data".into()))?;
    let ds = read_dataset(&data_path)?;
    cfg.task = resolve_task(&a.task, cfg.task, ds.seq_len)?;
    let model = ck.model(DType::F32)?;
    let head = ck.head(DType::F32)?.ok_or_else(|| Error::MissingTensor("head".into()))?;
    check_head(&head, cfg.task, &ds)?;
    let split = if a.train_split { &ds.train } else { &ds.val };
    let examples = task_views(split, cfg.task)?;
    let report = evaluate(cfg.task, &model, &head, &examples, &cfg.eval, a.shuffled_control)?;
    emit(&report, a.out.as_ref())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let axis: SweepAxis = a.axis.parse()?;
    let mut cfg = base_config(&a.common, None)?;
    apply_data(&mut cfg, &a.data)?;
    apply_model(&mut cfg, &a.model)?;
    apply_training(&mut cfg, a.epochs, a.batch_size, a.lr);
    cfg.task = resolve_task(&a.task, cfg.task, cfg.data.seq_len)?;
    cfg.model.token_dim = cfg.data.token_dim;
    cfg.model.tokens_per_clip = cfg.data.tokens_per_clip;
    cfg.model.max_len = cfg.task.required_len(cfg.data.seq_len).max(cfg.data.seq_len);
    let values = if a.values.is_empty() { axis.default_values() } else { a.values.clone() };

    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => Box::new(std::io::stdout()),
    };
    let sink = a.out.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    writeln!(out, "{ABLATION_HEADER}").map_err(io_err(&sink))?;
    let mut write_err = None;
    run_sweep(&cfg.experiment(), &cfg.data, axis, &values, &a.seeds, &mut |row| {
        info!("{} = {}: val top-1 {:.3}", row.axis, row.value, row.val_top1_mean);
        if let Err(e) = row.write_csv(&mut out).and_then(|_| out.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    match write_err {
        Some(e) => Err(io_err(&sink)(e)),
        None => Ok(()),
    }
}
