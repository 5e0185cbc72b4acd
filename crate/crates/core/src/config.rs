//! Run configuration: one JSON document that fully determines a run.
//!
//! Validation aggregates every violation with a JSON-pointer path so a
//! bad config reports all of its problems at once. The only environment
//! override is `TIQAT_SEED`, which replaces the config seed; an explicit
//! CLI flag outranks both.

use crate::data::TaskKind;
use crate::distill::DistillWeights;
use crate::error::{Error, Result};
use crate::model::{AttnScale, ModelConfig, TaskHead};
use crate::optim::AdamConfig;
use crate::quant::Granularity;
use crate::schedule::InterventionSchedule;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Where training data comes from: regenerated from (task, seed, sizes),
/// or loaded from a dataset stem when `path` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

/// Optimizer settings independent of budget length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimSettings {
    pub peak_lr: f32,
    /// Share of the budget spent ramping up.
    pub warmup_fraction: f32,
    /// The final rate is the peak divided by this.
    pub end_lr_divisor: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings {
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            end_lr_divisor: 1000.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimSettings {
    pub fn to_adam(self, total_iters: usize) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            peak_lr: self.peak_lr,
            warmup_iters: (total_iters as f64 * self.warmup_fraction as f64).floor() as usize,
            total_iters,
            end_lr: self.peak_lr / self.end_lr_divisor,
        }
    }
}

/// Quantization settings shared by training and export.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantSettings {
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: InterventionSchedule,
    #[serde(default)]
    pub quant: QuantSettings,
    #[serde(default)]
    pub optimizer: OptimSettings,
    #[serde(default)]
    pub distill: DistillWeights,
    pub data: DataConfig,
    /// Run seed: weight init and batch shuffling.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Student starts from the teacher weights unless disabled.
    #[serde(default = "default_true")]
    pub init_from_teacher: bool,
    /// Weight on the ground-truth label loss during QAT; teacher-only
    /// distillation by default.
    #[serde(default)]
    pub label_loss_weight: f32,
}

fn default_true() -> bool {
    true
}

/// Desk-scale defaults for a task: four layers of width 32 with four
/// heads, few-sample data, a thousand-iteration budget.
pub fn desk_config(task: TaskKind, out_dir: PathBuf) -> RunConfig {
    let task_head = match task.num_classes() {
        Some(k) => TaskHead::Classification { num_classes: k as usize },
        None => TaskHead::Regression,
    };
    RunConfig {
        model: ModelConfig {
            num_layers: 4,
            d_model: 32,
            heads: 4,
            seq_len: crate::data::SEQ_LEN,
            vocab: crate::data::VOCAB as usize,
            d_ff: 64,
            task_head,
            attn_scale: AttnScale::SqrtD,
        },
        schedule: InterventionSchedule::default(),
        quant: QuantSettings::default(),
        optimizer: OptimSettings::default(),
        distill: DistillWeights::default(),
        data: DataConfig {
            task,
            seed: 0,
            n_train: crate::data::FEW_SAMPLE_TRAIN_SIZES[0],
            n_dev: 64,
            path: None,
        },
        seed: 0,
        out_dir,
        init_from_teacher: true,
        label_loss_weight: 0.0,
    }
}

impl RunConfig {
    /// Aggregated validation across every section.
    pub fn validate(&self) -> std::result::Result<(), Vec<Error>> {
        let mut errs = Vec::new();
        if let Err(e) = self.model.validate() {
            errs.push(e);
        }
        if let Err(mut es) = self.schedule.validate() {
            errs.append(&mut es);
        }
        if self.data.n_train == 0 {
            errs.push(Error::InvalidConfig {
                pointer: "/data/n_train".into(),
                message: "must be positive".into(),
            });
        }
        if self.data.n_dev == 0 {
            errs.push(Error::InvalidConfig {
                pointer: "/data/n_dev".into(),
                message: "must be positive".into(),
            });
        }
        if self.model.seq_len != crate::data::SEQ_LEN {
            errs.push(Error::InvalidConfig {
                pointer: "/model/seq_len".into(),
                message: format!(
                    "generated tasks use sequences of length {}",
                    crate::data::SEQ_LEN
                ),
            });
        }
        if self.model.vocab < crate::data::VOCAB as usize {
            errs.push(Error::InvalidConfig {
                pointer: "/model/vocab".into(),
                message: format!(
                    "generated tasks draw tokens below {}",
                    crate::data::VOCAB
                ),
            });
        }
        let head_ok = match (self.data.task.num_classes(), self.model.task_head) {
            (Some(k), TaskHead::Classification { num_classes }) => num_classes == k as usize,
            (None, TaskHead::Regression) => true,
            _ => false,
        };
        if !head_ok {
            errs.push(Error::InvalidConfig {
                pointer: "/model/task_head".into(),
                message: format!(
                    "head does not match task '{}' (expected {:?} classes)",
                    self.data.task.name(),
                    self.data.task.num_classes()
                ),
            });
        }
        if !(self.optimizer.peak_lr.is_finite() && self.optimizer.peak_lr > 0.0) {
            errs.push(Error::InvalidConfig {
                pointer: "/optimizer/peak_lr".into(),
                message: "must be positive and finite".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.optimizer.warmup_fraction) {
            errs.push(Error::InvalidConfig {
                pointer: "/optimizer/warmup_fraction".into(),
                message: "must lie in [0, 1]".into(),
            });
        }
        if self.optimizer.end_lr_divisor < 1.0 {
            errs.push(Error::InvalidConfig {
                pointer: "/optimizer/end_lr_divisor".into(),
                message: "must be at least 1".into(),
            });
        }
        if !(self.label_loss_weight.is_finite() && self.label_loss_weight >= 0.0) {
            errs.push(Error::InvalidConfig {
                pointer: "/label_loss_weight".into(),
                message: "must be nonnegative and finite".into(),
            });
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Seed precedence: explicit flag > `TIQAT_SEED` > config field.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        match std::env::var("TIQAT_SEED") {
            Ok(raw) => raw.trim().parse::<u64>().map_err(|_| Error::InvalidConfig {
                pointer: "/seed".into(),
                message: format!("TIQAT_SEED must be an unsigned integer, found '{raw}'"),
            }),
            Err(_) => Ok(self.seed),
        }
    }

    pub fn from_json(raw: &str) -> Result<RunConfig> {
        Ok(serde_json::from_str(raw)?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}
