//! The trainable relational model: a per-type residual MLP encoder, a
//! heterogeneous message-passing GNN over sampled subgraphs, and heads for
//! entity prediction (`mlp_entity`) and recommendation (`two_tower`,
//! `idgnn`). Gradients are computed by hand; see [`grad_check`].

mod gradcheck;
mod net;
mod params;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricError;
use crate::sampler::{SampleError, SamplerConfig};
use crate::task::TaskType;

pub use gradcheck::{compare_gradients, grad_check, GradCheckReport};
pub use net::{
    bce_with_logits, bpr, edge_key, l1_loss, time_bucket, Batch, BatchTask, FeatureStore, Forward, LossEval,
    Network, TIME_BUCKETS,
};
pub use params::{read_checkpoint, write_checkpoint, Adam, Params, CHECKPOINT_MAGIC};
pub use train::{train, EpochLog, TrainOutcome, TrainedModel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("{split} table fails the temporal leakage guard")]
    Leakage { split: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("empty {0} table")]
    EmptyTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Identity; used by tests that check hand-computed message passing.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    MlpEntity,
    TwoTower,
    Idgnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub time_embedding: bool,
    pub feature_mask: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_dim: 128,
            time_embedding: true,
            feature_mask: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    pub num_layers: usize,
    pub aggregation: Aggregation,
    pub activation: Activation,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            num_layers: 2,
            aggregation: Aggregation::Sum,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub head_type: HeadType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub gnn: GnnConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    /// Fanout and strategy; depth and batch size follow `gnn` and `train`.
    pub sampler: SamplerConfig,
}

impl ModelConfig {
    /// Defaults per task type: learning rate 0.005 / 0.005 / 0.001 and
    /// 10 / 10 / 20 epochs for classification / regression / recommendation.
    pub fn for_task(task_type: TaskType) -> ModelConfig {
        let (learning_rate, max_epochs, head_type) = match task_type {
            TaskType::EntityClassification => (0.005, 10, HeadType::MlpEntity),
            TaskType::EntityRegression => (0.005, 10, HeadType::MlpEntity),
            TaskType::Recommendation => (0.001, 20, HeadType::Idgnn),
        };
        ModelConfig {
            encoder: EncoderConfig::default(),
            gnn: GnnConfig::default(),
            head: HeadConfig { head_type },
            train: TrainConfig {
                learning_rate,
                max_epochs,
                batch_size: 512,
                rng_seed: 0,
            },
            sampler: SamplerConfig::default(),
        }
    }

    /// Task defaults overlaid with a (possibly partial) JSON config.
    pub fn from_json_overlay(task_type: TaskType, text: &str) -> Result<ModelConfig, ModelError> {
        let overlay: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        let mut base = serde_json::to_value(ModelConfig::for_task(task_type)).expect("config serializes");
        merge(&mut base, overlay);
        let cfg: ModelConfig = serde_json::from_value(base).map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    /// Copies depth and batch size into the sampler config.
    pub fn resolved(mut self) -> ModelConfig {
        self.sampler.num_layers = self.gnn.num_layers;
        self.sampler.batch_size = self.train.batch_size;
        self
    }

    pub fn check(&self, task_type: TaskType) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.encoder.hidden_dim == 0 {
            return bad("hidden_dim must be positive".into());
        }
        if self.gnn.num_layers == 0 {
            return bad("num_layers must be positive".into());
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.train.learning_rate >= 0.0 && self.train.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite non-negative number".into());
        }
        let rec_head = matches!(self.head.head_type, HeadType::TwoTower | HeadType::Idgnn);
        if rec_head != (task_type == TaskType::Recommendation) {
            return bad(format!("head {:?} does not fit a {task_type} task", self.head.head_type));
        }
        self.sampler.validate()?;
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
