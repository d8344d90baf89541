//! The mean-teacher training loop.

mod adam;
mod checkpoint;
mod eval;
mod fit;
mod step;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::BatchSpec;
use crate::ema::AlphaSchedule;
use crate::losses::ConsistencyKind;
use crate::model::UNetConfig;
use crate::schedules::ScheduleConfig;
use crate::{Error, Result};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{config_fingerprint, Checkpoint, CheckpointMeta, EpochAccumulator};
pub use eval::{evaluate, evaluate_checkpoint, predict, EvalConfig, ModelChoice, Pooling, Reports, Which};
pub use fit::{
    fit, fit_trainer, multi_run, EpochLog, FitOutput, MultiRunReport, RunOutcome, Trainer, BEST_CHECKPOINT, FINAL_CHECKPOINT,
    LATEST_CHECKPOINT, LOG_FILE, LOG_HEADER,
};
pub use step::{train_step, StepReport, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Dice loss on labeled items only; the teacher is still EMA-tracked.
    Supervised,
    SemiSupervised,
}

/// How the teacher runs its forward pass during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherForward {
    /// Dropout active and batch statistics in batch norm.
    #[default]
    Train,
    /// Running statistics, no dropout.
    Eval,
}

/// Where the teacher's batch-norm running statistics come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherBn {
    /// Copied from the student at every EMA update.
    #[default]
    Copy,
    /// Accumulated from the teacher's own train-mode forward passes on the
    /// teacher inputs. Steps without a teacher forward (supervised mode)
    /// fall back to copying.
    Own,
}

/// Which items of a mixed batch share batch-norm statistics in train-mode
/// forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BnGroups {
    /// Labeled and unlabeled items run as separate sub-batches.
    #[default]
    Split,
    /// The whole batch in one pass.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub batch_size: usize,
    /// Labeled items per semi-supervised batch; ⌈batch_size/2⌉ when absent.
    pub labeled_per_batch: Option<usize>,
    /// Fixed number of steps per epoch instead of one pass over the data.
    pub steps_per_epoch: Option<usize>,
    /// L2 penalty coefficient λ; adds `λθ` to every parameter gradient.
    pub l2: f64,
    pub adam: AdamConfig,
    pub schedule: ScheduleConfig,
    pub ema: AlphaSchedule,
    pub augment: AugmentConfig,
    pub consistency: ConsistencyKind,
    pub dice_smoothing: f64,
    pub teacher_forward: TeacherForward,
    pub bn_groups: BnGroups,
    pub teacher_bn: TeacherBn,
    pub model: UNetConfig,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.batch_size,
            labeled_per_batch: self.labeled_per_batch,
            use_unlabeled: self.mode == TrainMode::SemiSupervised,
            steps_per_epoch: self.steps_per_epoch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::config("l2 must be non-negative"));
        }
        if !(self.dice_smoothing >= 0.0) {
            return Err(Error::config("dice_smoothing must be non-negative"));
        }
        if self.teacher_bn == TeacherBn::Own && self.teacher_forward == TeacherForward::Eval {
            return Err(Error::config("teacher_bn = \"own\" needs teacher_forward = \"train\""));
        }
        self.adam.validate()?;
        self.schedule.validate()?;
        self.ema.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.eval.validate()
    }
}
