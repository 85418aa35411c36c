use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BlockWiring, ModelConfig, ModelError, ModelKind, Result};
use crate::fsio::write_atomic;
use crate::graph::{Graph, NodeId};
use crate::optim::NamedTensors;
use crate::seed::{derive_seed, StreamDomain};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in ±sqrt(6 / fan_in); for layers feeding a ReLU.
    He(usize),
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier(usize, usize),
    Zero,
}

fn layout(kind: ModelKind, cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, init: Init| out.push((name.to_string(), shape, init));
    let (d, h, f) = (cfg.input_dim, cfg.encoder_hidden, cfg.feature_dim);
    let (ch, k) = (cfg.channels, cfg.kernel);
    if kind.uses_encoder() {
        push("encoder.w1", vec![d, h], Init::He(d));
        push("encoder.b1", vec![h], Init::Zero);
        push("encoder.w2", vec![h, f], Init::Xavier(h, f));
        push("encoder.b2", vec![f], Init::Zero);
    }
    match kind {
        ModelKind::Matching | ModelKind::Prototypical => {}
        ModelKind::Relation => {
            let hid = cfg.relation_hidden;
            push("relation.conv1.w", vec![ch, 1, k], Init::He(k));
            push("relation.conv1.b", vec![ch], Init::Zero);
            push("relation.conv2.w", vec![ch, ch, k], Init::He(ch * k));
            push("relation.conv2.b", vec![ch], Init::Zero);
            push("relation.fc1.w", vec![ch * f, hid], Init::He(ch * f));
            push("relation.fc1.b", vec![hid], Init::Zero);
            push("relation.fc2.w", vec![hid, 1], Init::Zero);
            push("relation.fc2.b", vec![1], Init::Zero);
        }
        ModelKind::Attentive => {
            push("attentive.block1.w", vec![ch, 1, k], Init::He(k));
            push("attentive.block1.b", vec![ch], Init::Zero);
            push("attentive.block1.proj", vec![ch, 1, 1], Init::He(1));
            match cfg.wiring {
                BlockWiring::Sequential => {
                    push("attentive.block2.w", vec![ch, ch, k], Init::He(ch * k));
                    push("attentive.block2.b", vec![ch], Init::Zero);
                }
                BlockWiring::Parallel => {
                    push("attentive.block2.w", vec![ch, 1, k], Init::He(k));
                    push("attentive.block2.b", vec![ch], Init::Zero);
                    push("attentive.block2.proj", vec![ch, 1, 1], Init::He(1));
                }
            }
            push("attentive.u.w", vec![1, ch, 1], Init::Xavier(ch, 1));
            push("attentive.u.b", vec![1], Init::Zero);
            push("attentive.classifier.w", vec![(ch + 1) * d, 1], Init::Zero);
            push("attentive.classifier.b", vec![1], Init::Zero);
        }
    }
    out
}

/// Everything needed to run (and resume reporting on) one learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u32,
    pub kind: ModelKind,
    pub config: ModelConfig,
    /// Labels seen during meta-training; evaluation refuses to overlap them.
    pub train_labels: BTreeSet<String>,
    pub steps_trained: u64,
    pub params: NamedTensors,
}

/// Graph nodes holding a bundle's parameters.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ModelBundle {
    /// Randomly initialized bundle; deterministic in `seed`.
    pub fn init(kind: ModelKind, config: ModelConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, StreamDomain::ParamInit, 0));
        let mut params = NamedTensors::new();
        for (name, shape, init) in layout(kind, &config) {
            let len: usize = shape.iter().product();
            let bound = match init {
                Init::He(fan_in) => (6.0 / fan_in as f64).sqrt(),
                Init::Xavier(fan_in, fan_out) => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                Init::Zero => 0.0,
            };
            let data = if bound == 0.0 {
                vec![0.0; len]
            } else {
                (0..len).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            kind,
            config,
            train_labels: BTreeSet::new(),
            steps_trained: 0,
            params,
        })
    }

    /// Redraws every parameter uniformly in ±0.5, including those that
    /// initialize to zero, so tests see non-degenerate gradients.
    #[cfg(test)]
    pub(crate) fn randomized(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        self
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies every parameter into `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|(name, t)| {
                let id = if trainable {
                    graph.param(t.clone())
                } else {
                    graph.input(t.clone())
                };
                (name.clone(), id)
            })
            .collect();
        Bound { ids }
    }

    fn check_layout(&self) -> Result<()> {
        self.config.check()?;
        let expected = layout(self.kind, &self.config);
        if expected.len() != self.params.len() {
            return Err(ModelError::Contract(format!(
                "{} bundle has {} parameters, expected {}",
                self.kind,
                self.params.len(),
                expected.len()
            )));
        }
        for (name, shape, _) in expected {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Contract(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Contract(format!("missing parameter `{name}`"))),
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("bundle serialization");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bundle: ModelBundle = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
        if bundle.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint {
                path: "<memory>".into(),
                message: format!("unsupported checkpoint version {}", bundle.format_version),
            });
        }
        bundle.check_layout()?;
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, self.to_json().as_bytes()).map_err(|e| ModelError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            ModelError::Checkpoint { message, .. } => ModelError::Checkpoint {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }
}
