//! Task views: which clips of a procedure are seen, which are denoised, and
//! which labels the denoised targets are scored against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{EmbeddingMatrix, ProcedureSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TaskKind {
    /// Predict the step label of the last clip from all earlier clips.
    Forecast,
    /// Given the first and last clip of a `horizon + 2` window, predict the
    /// `horizon` steps in between.
    Plan { horizon: usize },
    /// Append one empty slot after the procedure, denoise it and classify the
    /// task from it.
    TaskClassify,
    /// See the first `observed` clips and predict the next `z` steps.
    Anticipate { observed: usize, z: usize },
}

impl TaskKind {
    /// Sequence length the model must support for procedures of `n` clips.
    pub fn required_len(&self, n: usize) -> usize {
        match self {
            TaskKind::Forecast => n,
            TaskKind::Plan { horizon } => horizon + 2,
            TaskKind::TaskClassify => n + 1,
            TaskKind::Anticipate { observed, z } => observed + z,
        }
    }

    /// Whether target labels are task labels rather than step labels.
    pub fn classifies_task(&self) -> bool {
        matches!(self, TaskKind::TaskClassify)
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Forecast => "forecast",
            TaskKind::Plan { .. } => "plan",
            TaskKind::TaskClassify => "task-classify",
            TaskKind::Anticipate { .. } => "anticipate",
        }
    }
}

/// A sample with its target mask set for one task, plus the label of every
/// target clip in order.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub sample: ProcedureSample,
    pub labels: Vec<usize>,
}

fn window(s: &ProcedureSample, start: usize, len: usize) -> ProcedureSample {
    ProcedureSample {
        clips: s.clips[start..start + len].to_vec(),
        step_labels: s.step_labels[start..start + len].to_vec(),
        task_label: s.task_label,
        target_mask: vec![false; len],
    }
}

/// Builds the view of `s` for `task`. Planning windows start at `offset`.
pub fn task_view(s: &ProcedureSample, task: TaskKind, offset: usize) -> Result<TaskExample> {
    let n = s.len();
    let (tokens, dim) = s.clip_shape().ok_or(Error::EmptyTargetSet)?;
    let view = match task {
        TaskKind::Forecast => {
            if n < 2 {
                return Err(Error::InvalidConfig(format!("forecasting needs at least 2 clips, got {n}")));
            }
            let mut v = window(s, 0, n);
            v.target_mask[n - 1] = true;
            v
        }
        TaskKind::Plan { horizon } => {
            let len = horizon + 2;
            if horizon == 0 || offset + len > n {
                return Err(Error::InvalidConfig(format!(
                    "plan window of {len} clips at offset {offset} exceeds {n} clips"
                )));
            }
            let mut v = window(s, offset, len);
            for m in &mut v.target_mask[1..len - 1] {
                *m = true;
            }
            v
        }
        TaskKind::TaskClassify => {
            let mut v = window(s, 0, n);
            v.clips.push(EmbeddingMatrix::zeros(tokens, dim)?);
            v.step_labels.push(s.task_label);
            v.target_mask.push(true);
            v
        }
        TaskKind::Anticipate { observed, z } => {
            if observed == 0 || z == 0 || observed + z > n {
                return Err(Error::InvalidConfig(format!(
                    "anticipation with {observed} observed and Z = {z} needs {} clips, got {n}",
                    observed + z
                )));
            }
            let mut v = window(s, 0, observed + z);
            for m in &mut v.target_mask[observed..] {
                *m = true;
            }
            v
        }
    };
    let labels = if task.classifies_task() {
        vec![s.task_label]
    } else {
        view.target_indices().iter().map(|&i| view.step_labels[i]).collect()
    };
    Ok(TaskExample { sample: view, labels })
}

/// Views of every sample; planning windows start at the first clip.
pub fn task_views(samples: &[ProcedureSample], task: TaskKind) -> Result<Vec<TaskExample>> {
    samples.iter().map(|s| task_view(s, task, 0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> ProcedureSample {
        ProcedureSample {
            clips: (0..n)
                .map(|i| EmbeddingMatrix::from_fn(2, 4, |t, d| (i * 10 + t + d) as f32).unwrap())
                .collect(),
            step_labels: (0..n).map(|i| 100 + i).collect(),
            task_label: 3,
            target_mask: vec![false; n],
        }
    }

    #[test]
    fn forecast_targets_last_clip() {
        let v = task_view(&sample(9), TaskKind::Forecast, 0).unwrap();
        assert_eq!(v.sample.target_indices(), vec![8]);
        assert_eq!(v.labels, vec![108]);
    }

    #[test]
    fn plan_masks_intermediates() {
        let s = sample(9);
        for horizon in [3, 4] {
            for offset in 0..=(9 - horizon - 2) {
                let v = task_view(&s, TaskKind::Plan { horizon }, offset).unwrap();
                let n = v.sample.len();
                assert_eq!(n, horizon + 2);
                assert_eq!(v.sample.seen_indices(), vec![0, n - 1]);
                assert_eq!(v.sample.target_indices(), (1..n - 1).collect::<Vec<_>>());
                assert_eq!(v.labels, (offset + 1..offset + n - 1).map(|i| 100 + i).collect::<Vec<_>>());
                assert_eq!(v.sample.clips[0], s.clips[offset]);
            }
        }
        assert!(task_view(&s, TaskKind::Plan { horizon: 8 }, 0).is_err());
    }

    #[test]
    fn task_classify_appends_empty_slot() {
        let v = task_view(&sample(4), TaskKind::TaskClassify, 0).unwrap();
        assert_eq!(v.sample.len(), 5);
        assert_eq!(v.sample.target_indices(), vec![4]);
        assert!(v.sample.clips[4].as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(v.labels, vec![3]);
        assert_eq!(TaskKind::TaskClassify.required_len(4), 5);
    }

    #[test]
    fn anticipate_targets_future_clips() {
        let v = task_view(&sample(9), TaskKind::Anticipate { observed: 3, z: 5 }, 0).unwrap();
        assert_eq!(v.sample.seen_indices(), vec![0, 1, 2]);
        assert_eq!(v.labels, vec![103, 104, 105, 106, 107]);
        assert!(task_view(&sample(9), TaskKind::Anticipate { observed: 3, z: 7 }, 0).is_err());
    }

    #[test]
    fn task_kind_serde() {
        let t: TaskKind = serde_json::from_str(r#"{"kind":"plan","horizon":3}"#).unwrap();
        assert_eq!(t, TaskKind::Plan { horizon: 3 });
        assert_eq!(serde_json::to_string(&TaskKind::Forecast).unwrap(), r#"{"kind":"forecast"}"#);
    }
}
