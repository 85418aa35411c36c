//! The four metric-learning heads and the shared trainable encoder.
//!
//! All learnable state of a model lives in a [`ModelBundle`] as named
//! tensors. Forward passes bind those tensors into a fresh [`Graph`] so the
//! same code path serves inference, training and gradient checking.

mod attentive;
mod bundle;
mod encoder;
mod forward;
mod relation;
mod scores;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub use attentive::{attentive_head_forward, attentive_relation_scores, AttentiveNodes, AttentiveOutput, ClassDiagnostics};
pub use bundle::{Bound, ModelBundle, CHECKPOINT_VERSION};
pub use encoder::{encode, encoder_forward};
pub use forward::{episode_scores, EpisodeInputs};
pub use relation::{relation_head_forward, relation_scores};
pub use scores::{
    class_sum, matching_scores, one_shot_equivalence, one_shot_equivalence_check, prototypical_scores,
    PredictionDistribution,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("numeric error at {stage}")]
    Numeric { stage: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Matching,
    Prototypical,
    Relation,
    Attentive,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [Self::Matching, Self::Prototypical, Self::Relation, Self::Attentive];

    pub fn name(self) -> &'static str {
        match self {
            Self::Matching => "matching",
            Self::Prototypical => "prototypical",
            Self::Relation => "relation",
            Self::Attentive => "attentive",
        }
    }

    /// Whether the model scores with a learned relation in (0, 1) and trains
    /// with squared error, rather than with a fixed metric and cross-entropy.
    pub fn is_relation_family(self) -> bool {
        matches!(self, Self::Relation | Self::Attentive)
    }

    pub fn uses_encoder(self) -> bool {
        !matches!(self, Self::Attentive)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown model `{s}` (expected matching, prototypical, relation or attentive)"))
    }
}

/// How the attentive head derives its second local descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockWiring {
    /// `l2 = block2(l1)`.
    #[default]
    Sequential,
    /// `l2 = block2(input)`, both blocks reading the pair directly.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Dimension of the pretrained token vectors.
    pub input_dim: usize,
    pub encoder_hidden: usize,
    pub feature_dim: usize,
    pub channels: usize,
    pub kernel: usize,
    pub relation_hidden: usize,
    pub wiring: BlockWiring,
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            encoder_hidden: 128,
            feature_dim: 64,
            channels: 32,
            kernel: 3,
            relation_hidden: 64,
            wiring: BlockWiring::Sequential,
        }
    }

    /// Length of the vectors a head compares: encoded features for the
    /// encoder-based models, raw vectors for the attentive head.
    pub fn head_input_dim(&self, kind: ModelKind) -> usize {
        if kind.uses_encoder() {
            self.feature_dim
        } else {
            self.input_dim
        }
    }

    fn check(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.encoder_hidden,
            self.feature_dim,
            self.channels,
            self.kernel,
            self.relation_hidden,
        ];
        if dims.contains(&0) {
            return Err(ModelError::Contract(format!("model config has a zero size: {self:?}")));
        }
        Ok(())
    }
}
