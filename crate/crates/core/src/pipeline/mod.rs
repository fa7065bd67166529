//! The three training stages, optimizer and trainer checkpoints.

mod adam;
mod checkpoint;
mod train;

pub use adam::{adam_step, AdamMoments, BETA1, BETA2, EPSILON};
pub use checkpoint::{load_checkpoint, read_state, save_checkpoint, write_state};
pub use train::{
    begin_stage, contrastive_batches, epoch_batches, initial_params, stage1_train, stage2_train, stage3_train, train, trainable_groups, StepOutcome,
};

use serde::{Deserialize, Serialize};

use crate::data::DataError;
use crate::mask::MaskError;
use crate::masking::{MaskingError, BLOCK_B_RATIO, PATCH_RATIO, TEXT_RATIO};
use crate::model::{CheckpointError, ModelError, ModelParams};
use crate::objectives::{LossBreakdown, ObjectiveError, MAE_WEIGHT, TEMPERATURE};

pub const BASE_LEARNING_RATE: f64 = 5e-5;
pub const DEFAULT_BATCH: usize = 32;

/// Text-side objective of the warm-up stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextObjective {
    /// Masked token `i` predicted from the output at `i - 1`.
    Mntp,
    /// Masked token `i` predicted from its own output.
    Mlm,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub text_ratio: f64,
    pub patch_ratio: f64,
    pub blockb_ratio: f64,
    pub mae_weight: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub root_seed: u64,
    pub text_objective: TextObjective,
}

impl StageConfig {
    pub fn new(stage: u8) -> Self {
        Self {
            stage,
            text_ratio: TEXT_RATIO,
            patch_ratio: PATCH_RATIO,
            blockb_ratio: BLOCK_B_RATIO,
            mae_weight: MAE_WEIGHT,
            temperature: TEMPERATURE,
            learning_rate: BASE_LEARNING_RATE,
            batch_size: DEFAULT_BATCH,
            epochs: 1,
            root_seed: 0,
            text_objective: TextObjective::Mntp,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(1..=3).contains(&self.stage) {
            return bad(format!("stage {} is not 1, 2 or 3", self.stage));
        }
        for (name, r) in [("text_ratio", self.text_ratio), ("patch_ratio", self.patch_ratio), ("blockb_ratio", self.blockb_ratio)] {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("{name} {r} outside (0, 1]"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.mae_weight >= 0.0 && self.mae_weight.is_finite()) {
            return bad(format!("mae_weight {} must be non-negative", self.mae_weight));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size < 1 || (self.stage == 3 && self.batch_size < 2) {
            return bad(format!("batch_size {} too small for stage {}", self.batch_size, self.stage));
        }
        if self.stage == 1 && self.text_objective == TextObjective::None && self.mae_weight == 0.0 {
            return bad("stage 1 needs a text objective or a positive mae_weight".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub stage: u8,
    pub loss: LossBreakdown,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,stage,mntp,mae,infonce,total,wall_ms";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{},{}", self.step, self.stage, l.mntp, l.mae, l.infonce, l.total, self.wall_ms)
    }
}

/// Parameters, optimizer moments and progress of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub params: ModelParams,
    pub moments: AdamMoments,
    pub step: u64,
    /// Stage whose objective produced `params`; 0 for a fresh init.
    pub stage: u8,
    pub config: StageConfig,
    pub metrics: Vec<MetricRow>,
}

impl TrainerState {
    pub fn fresh(params: ModelParams, config: StageConfig) -> Self {
        let moments = AdamMoments::zeros(params.tensors());
        Self { params, moments, step: 0, stage: 0, config, metrics: Vec::new() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid stage config: {0}")]
    Config(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("stage {stage} needs a checkpoint from stage {expected}, got {found}; pass the skip flag to override")]
    StageOrder { stage: u8, expected: u8, found: String },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("bad contrastive batch: {0}")]
    Batch(String),
    #[error("non-finite loss at step {step}: {loss:?}")]
    NonFinite { step: u64, loss: LossBreakdown },
    #[error("trainable parameter {0} received no gradient")]
    MissingGrad(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("{0}")]
    Io(String),
}

impl From<crate::tensor::TensorError> for PipelineError {
    fn from(e: crate::tensor::TensorError) -> Self {
        Self::Model(ModelError::Tensor(e))
    }
}
