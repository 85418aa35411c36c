//! Episodic meta-training, meta-testing and the experiment grid.

mod grid;
mod episodic;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::episodes::{EpisodeError, EpisodeSpec};
use crate::graph::{Graph, NodeId};
use crate::models::{ModelConfig, ModelError};
use crate::optim::OptimizerConfig;
use crate::tensor::{Tensor, TensorError};

pub use grid::{run_experiment_grid, CellKey, GridCollections, GridKey, GridResult, GridRow, GridSpec, MissingCollection};
pub use episodic::{meta_test, meta_train, predictions, EpisodeRecord, TestResult, TrainOutcome};
pub use report::{aggregate_report, compare_with_published, published_goldens, GoldenRow, ReportFormat, PUBLISHED_GOLDENS};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at episode {step}: {diagnostics}")]
    NonFiniteLoss { step: usize, diagnostics: String },
    #[error("test labels were seen during training: {}", labels.join(", "))]
    LabelLeak { labels: Vec<String> },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = TrainingError> = std::result::Result<T, E>;

/// Episode schedule, episode shape and optimizer for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub train_episodes: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub c_way: usize,
    pub k_shot: usize,
    /// Queries per class in every episode; `None` uses `k_shot`.
    pub query_per_class: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Architecture override; `None` uses the defaults for the collection's
    /// vector dimension.
    pub model: Option<ModelConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_episodes: 10_000,
            eval_every: 500,
            eval_episodes: 1000,
            c_way: 5,
            k_shot: 5,
            query_per_class: None,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            model: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_way == 0 || self.k_shot == 0 || self.query_per_class == Some(0) {
            return Err(TrainingError::Config("c_way, k_shot and query_per_class must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainingError::Config("eval_every must be positive".into()));
        }
        if !self.train_episodes.is_multiple_of(self.eval_every) {
            return Err(TrainingError::Config(format!(
                "eval_every ({}) must divide train_episodes ({})",
                self.eval_every, self.train_episodes
            )));
        }
        if self.eval_episodes == 0 {
            return Err(TrainingError::Config("eval_episodes must be positive".into()));
        }
        Ok(())
    }

    pub fn queries(&self) -> usize {
        self.query_per_class.unwrap_or(self.k_shot)
    }

    /// Number of evaluation checkpoints the schedule produces.
    pub fn checkpoint_count(&self) -> usize {
        self.train_episodes / self.eval_every.max(1)
    }

    pub fn model_config(&self, input_dim: usize) -> Result<ModelConfig> {
        match self.model {
            None => Ok(ModelConfig::new(input_dim)),
            Some(cfg) if cfg.input_dim == input_dim => Ok(cfg),
            Some(cfg) => Err(TrainingError::Config(format!(
                "model config expects dimension {}, collection has {input_dim}",
                cfg.input_dim
            ))),
        }
    }

    pub(crate) fn train_spec(&self) -> EpisodeSpec {
        EpisodeSpec::new(self.c_way, self.k_shot, self.seed).with_queries(self.queries())
    }

    /// Evaluation episodes over a collection with `test_labels` labels.
    ///
    /// Uses `min(c_way, test_labels)` classes so that domains with fewer
    /// labels than `c_way` can still be evaluated.
    pub fn eval_spec(&self, test_labels: usize) -> EvalSpec {
        EvalSpec {
            episode: EpisodeSpec::new(self.c_way.min(test_labels).max(1), self.k_shot, self.seed)
                .with_queries(self.queries()),
            episodes: self.eval_episodes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSpec {
    pub episode: EpisodeSpec,
    pub episodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub accuracy: f64,
}

/// Accuracy at each evaluation checkpoint and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub checkpoints: Vec<Checkpoint>,
    pub final_accuracy: f64,
}

impl EvalRun {
    pub fn new(checkpoints: Vec<Checkpoint>) -> Result<Self> {
        if checkpoints.is_empty() {
            return Err(TrainingError::Contract("an evaluation run needs at least one checkpoint".into()));
        }
        if let Some(c) = checkpoints.iter().find(|c| !(0.0..=1.0).contains(&c.accuracy)) {
            return Err(TrainingError::Contract(format!(
                "accuracy {} at step {} is outside [0, 1]",
                c.accuracy, c.step
            )));
        }
        let final_accuracy = checkpoints.iter().map(|c| c.accuracy).sum::<f64>() / checkpoints.len() as f64;
        Ok(Self {
            checkpoints,
            final_accuracy,
        })
    }
}

fn check_scores(graph: &Graph, scores: NodeId, targets: &[usize], op: &'static str) -> Result<(usize, usize)> {
    let &[n, c] = graph.value(scores).shape() else {
        return Err(TensorError::Contract(format!("{op} needs [queries × classes] scores")).into());
    };
    if targets.len() != n || targets.iter().any(|&t| t >= c) {
        return Err(TensorError::Dimension {
            op,
            lhs: vec![n, c],
            rhs: vec![targets.len()],
        }
        .into());
    }
    Ok((n, c))
}

/// Mean over (query, class) of `(r - onehot)²`.
pub fn mse_episode_loss(graph: &mut Graph, scores: NodeId, targets: &[usize]) -> Result<NodeId> {
    let (n, c) = check_scores(graph, scores, targets, "mse_episode_loss")?;
    let mut onehot = vec![0.0; n * c];
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * c + t] = 1.0;
    }
    let target = graph.input(Tensor::new(vec![n, c], onehot)?);
    let diff = graph.sub(scores, target)?;
    let sq = graph.mul_elementwise(diff, diff)?;
    Ok(graph.mean_all(sq)?)
}

/// Mean negative log-softmax of the true class's score.
pub fn cross_entropy_episode_loss(graph: &mut Graph, scores: NodeId, targets: &[usize]) -> Result<NodeId> {
    check_scores(graph, scores, targets, "cross_entropy_episode_loss")?;
    Ok(graph.softmax_cross_entropy(scores, targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(f: fn(&mut Graph, NodeId, &[usize]) -> Result<NodeId>, rows: &[Vec<f64>], targets: &[usize]) -> f64 {
        let mut g = Graph::new();
        let s = g.input(Tensor::from_rows(rows).unwrap());
        let l = f(&mut g, s, targets).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(loss_of(mse_episode_loss, &[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]), 0.0);
        assert_eq!(loss_of(mse_episode_loss, &[vec![0.5]], &[0]), 0.25);
        assert_eq!(loss_of(mse_episode_loss, &[vec![0.5; 5]], &[3]), 0.25);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(loss_of(cross_entropy_episode_loss, &[vec![3.7]], &[0]), 0.0);
        let uniform = loss_of(cross_entropy_episode_loss, &[vec![0.2; 5]], &[2]);
        assert!((uniform - 5f64.ln()).abs() < 1e-12);
        let peaked = loss_of(cross_entropy_episode_loss, &[vec![10.0, 0.0, 0.0, 0.0, 0.0]], &[0]);
        let expect = (1.0 + 4.0 * (-10f64).exp()).ln();
        assert!((peaked - expect).abs() < 1e-15);
        assert!((peaked - 1.8e-4).abs() < 5e-6);
    }

    #[test]
    fn losses_reject_bad_targets() {
        let mut g = Graph::new();
        let s = g.input(Tensor::from_rows(&[[0.1, 0.9]]).unwrap());
        assert!(mse_episode_loss(&mut g, s, &[2]).is_err());
        assert!(cross_entropy_episode_loss(&mut g, s, &[0, 1]).is_err());
    }

    #[test]
    fn schedule_arithmetic() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.checkpoint_count(), 20);
        let bad = TrainConfig {
            eval_every: 300,
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        let empty = TrainConfig {
            train_episodes: 0,
            ..cfg
        };
        empty.validate().unwrap();
        assert_eq!(empty.checkpoint_count(), 0);
    }

    #[test]
    fn eval_run_final_is_mean() {
        let run = EvalRun::new(vec![
            Checkpoint { step: 1, accuracy: 0.5 },
            Checkpoint { step: 2, accuracy: 0.75 },
            Checkpoint { step: 3, accuracy: 1.0 },
        ])
        .unwrap();
        assert_eq!(run.final_accuracy, 0.75);
        assert!(EvalRun::new(vec![]).is_err());
        assert!(EvalRun::new(vec![Checkpoint { step: 1, accuracy: 1.5 }]).is_err());
    }

    #[test]
    fn eval_spec_caps_classes() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.eval_spec(3).episode.c_way, 3);
        assert_eq!(cfg.eval_spec(9).episode.c_way, 5);
    }
}
