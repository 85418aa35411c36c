//! Meta-training and meta-testing loops.

use serde::{Deserialize, Serialize};

use crate::data::Collection;
use crate::episodes::{episode_at, Episode, EpisodeSpec};
use crate::graph::Graph;
use crate::models::{episode_scores, EpisodeInputs, ModelBundle, ModelError, ModelKind};
use crate::optim::{NamedTensors, OptimizerState};
use crate::parallel::{map_indices, Execution};
use crate::seed::StreamDomain;
use crate::tensor::Tensor;

use super::{cross_entropy_episode_loss, mse_episode_loss, Checkpoint, EvalRun, EvalSpec, Result, TrainConfig, TrainingError};

/// Loss and training accuracy of one meta-training episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// 1-based episode number.
    pub episode: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub curve: Vec<EpisodeRecord>,
    /// Present when an evaluation collection was supplied and the schedule
    /// has at least one checkpoint.
    pub eval: Option<EvalRun>,
}

/// Per-episode accuracies of one meta-test pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub step: usize,
    pub episode_accuracies: Vec<f64>,
    pub accuracy: f64,
}

/// Row-wise argmax of a `[n × C]` score matrix, ties to the lowest index.
pub fn predictions(scores: &Tensor) -> Vec<usize> {
    let c = scores.shape()[1];
    (0..scores.shape()[0])
        .map(|i| {
            let row = scores.row(i);
            (1..c).fold(0, |best, k| if row[k] > row[best] { k } else { best })
        })
        .collect()
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

fn rows(collection: &Collection, shots: impl Iterator<Item = usize>, n: usize) -> Result<Tensor> {
    let d = collection.dimension();
    let mut data = Vec::with_capacity(n * d);
    shots.for_each(|i| data.extend_from_slice(&collection.triplet(i).vector));
    Ok(Tensor::new(vec![n, d], data)?)
}

fn episode_inputs(collection: &Collection, episode: &Episode) -> Result<EpisodeInputs> {
    Ok(EpisodeInputs {
        support: rows(collection, episode.support.iter().map(|s| s.index), episode.support.len())?,
        classes: episode.support_classes(),
        query: rows(collection, episode.query.iter().map(|s| s.index), episode.query.len())?,
        c_way: episode.c_way(),
    })
}

fn check_leak(bundle: &ModelBundle, test: &Collection) -> Result<()> {
    let overlap: Vec<String> = test
        .labels()
        .filter(|l| bundle.train_labels.contains(*l))
        .map(str::to_string)
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(TrainingError::LabelLeak { labels: overlap })
    }
}

fn check_dimension(bundle: &ModelBundle, collection: &Collection) -> Result<()> {
    if bundle.config.input_dim != collection.dimension() {
        return Err(TrainingError::Contract(format!(
            "model expects dimension {}, collection has {}",
            bundle.config.input_dim,
            collection.dimension()
        )));
    }
    Ok(())
}

fn evaluate_episode(bundle: &ModelBundle, test: &Collection, spec: &EpisodeSpec, index: usize) -> Result<f64> {
    let episode = episode_at(test, spec, StreamDomain::EvalEpisodes, index as u64)?;
    let inputs = episode_inputs(test, &episode)?;
    let mut graph = Graph::new();
    let bound = bundle.bind(&mut graph, false);
    let scores = episode_scores(&mut graph, &bound, bundle, &inputs)?;
    Ok(accuracy(&predictions(graph.value(scores)), &episode.query_classes()))
}

/// Evaluates `bundle` on `spec.episodes` episodes of unseen labels.
///
/// The episode set depends only on `spec`, so repeated calls (for example at
/// successive checkpoints) score the same episodes.
pub fn meta_test(bundle: &ModelBundle, test: &Collection, spec: &EvalSpec, exec: Execution) -> Result<TestResult> {
    check_leak(bundle, test)?;
    check_dimension(bundle, test)?;
    if spec.episodes == 0 {
        return Err(TrainingError::Config("eval_episodes must be positive".into()));
    }
    let episode_accuracies = map_indices(spec.episodes, exec, |i| evaluate_episode(bundle, test, &spec.episode, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let accuracy = episode_accuracies.iter().sum::<f64>() / episode_accuracies.len() as f64;
    Ok(TestResult {
        step: bundle.steps_trained as usize,
        episode_accuracies,
        accuracy,
    })
}

fn train_step(
    bundle: &mut ModelBundle,
    optimizer: &mut OptimizerState,
    collection: &Collection,
    episode: &Episode,
    step: usize,
) -> Result<EpisodeRecord> {
    let inputs = episode_inputs(collection, episode)?;
    let targets = episode.query_classes();
    let mut graph = Graph::new();
    let bound = bundle.bind(&mut graph, true);
    let non_finite = |detail: String| TrainingError::NonFiniteLoss {
        step,
        diagnostics: format!("{} model, episode labels [{}]: {detail}", bundle.kind, episode.labels.join(", ")),
    };
    let scores = match episode_scores(&mut graph, &bound, bundle, &inputs) {
        Ok(s) => s,
        Err(ModelError::Numeric { stage }) => return Err(non_finite(format!("forward pass failed at {stage}"))),
        Err(e) => return Err(e.into()),
    };
    let loss = if bundle.kind.is_relation_family() {
        mse_episode_loss(&mut graph, scores, &targets)?
    } else {
        cross_entropy_episode_loss(&mut graph, scores, &targets)?
    };
    let loss_value = graph.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(non_finite(format!("loss is {loss_value}")));
    }
    let train_accuracy = accuracy(&predictions(graph.value(scores)), &targets);
    let grads = graph.backward(loss)?;
    let named: NamedTensors = bound
        .iter()
        .map(|(name, id)| {
            let g = grads.get(id).expect("every bound parameter receives a gradient");
            (name.to_string(), g.clone())
        })
        .collect();
    if let Some((name, _)) = named.iter().find(|(_, g)| !g.is_finite()) {
        return Err(non_finite(format!("gradient of `{name}` is not finite")));
    }
    optimizer.step(&mut bundle.params, &named)?;
    Ok(EpisodeRecord {
        episode: step,
        loss: loss_value,
        accuracy: train_accuracy,
    })
}

/// Trains a fresh `kind` model on episodes from `train`.
///
/// With `eval` supplied, the model is meta-tested every `eval_every`
/// episodes and the checkpoint accuracies are returned as an [`EvalRun`].
/// Training itself runs on the calling thread; `exec` only governs the
/// evaluation episodes.
pub fn meta_train(
    kind: ModelKind,
    train: &Collection,
    eval: Option<&Collection>,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config(train.dimension())?;
    let mut bundle = ModelBundle::init(kind, model_cfg, cfg.seed)?;
    bundle.train_labels = train.label_set();
    if let Some(test) = eval {
        check_leak(&bundle, test)?;
        check_dimension(&bundle, test)?;
        if test.label_count() == 0 {
            return Err(TrainingError::Contract("evaluation collection has no labels".into()));
        }
    }
    if train.label_count() < cfg.c_way && cfg.train_episodes > 0 {
        return Err(crate::episodes::EpisodeError::TooFewLabels {
            needed: cfg.c_way,
            available: train.label_count(),
        }
        .into());
    }
    let eval_spec = eval.map(|t| cfg.eval_spec(t.label_count()));
    let spec = cfg.train_spec();
    let mut optimizer = OptimizerState::new(cfg.optimizer)?;
    let mut curve = Vec::with_capacity(cfg.train_episodes);
    let mut checkpoints = Vec::with_capacity(cfg.checkpoint_count());
    for i in 0..cfg.train_episodes {
        let step = i + 1;
        let episode = episode_at(train, &spec, StreamDomain::TrainEpisodes, i as u64)?;
        let record = train_step(&mut bundle, &mut optimizer, train, &episode, step)?;
        bundle.steps_trained = step as u64;
        curve.push(record);
        if step % cfg.eval_every == 0 {
            log::debug!("{kind}: episode {step} loss {:.6}", record.loss);
            if let (Some(test), Some(es)) = (eval, eval_spec.as_ref()) {
                let result = meta_test(&bundle, test, es, exec)?;
                log::info!("{kind}: checkpoint {step} accuracy {:.4}", result.accuracy);
                checkpoints.push(Checkpoint {
                    step,
                    accuracy: result.accuracy,
                });
            }
        }
    }
    let eval = if checkpoints.is_empty() {
        None
    } else {
        Some(EvalRun::new(checkpoints)?)
    };
    Ok(TrainOutcome { bundle, curve, eval })
}
