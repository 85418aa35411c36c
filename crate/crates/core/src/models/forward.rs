//! Batched episode scoring shared by training and evaluation.

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

use super::{attentive_head_forward, encoder_forward, relation_head_forward, Bound, ModelBundle, ModelError, ModelKind, Result};

/// Raw vectors of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeInputs {
    /// Support vectors, `[m × d]`.
    pub support: Tensor,
    /// Class index of each support row.
    pub classes: Vec<usize>,
    /// Query vectors, `[n × d]`.
    pub query: Tensor,
    pub c_way: usize,
}

impl EpisodeInputs {
    /// `[m × C]` matrix with `weight(class)` in each support's class column.
    fn class_matrix(&self, weight: impl Fn(usize) -> f64) -> Result<Tensor> {
        let m = self.classes.len();
        let mut data = vec![0.0; m * self.c_way];
        for (i, &k) in self.classes.iter().enumerate() {
            data[i * self.c_way + k] = weight(k);
        }
        Ok(Tensor::new(vec![m, self.c_way], data)?)
    }

    fn check(&self, dim: usize) -> Result<()> {
        let ok = matches!(self.support.shape(), &[m, d] if m == self.classes.len() && d == dim)
            && matches!(self.query.shape(), &[_, d] if d == dim);
        if !ok {
            return Err(ModelError::Contract(format!(
                "episode inputs support {:?} with {} classes and query {:?} do not fit dimension {dim}",
                self.support.shape(),
                self.classes.len(),
                self.query.shape()
            )));
        }
        let mut counts = vec![0usize; self.c_way];
        for &k in &self.classes {
            *counts.get_mut(k).ok_or_else(|| {
                ModelError::Contract(format!("class index {k} outside a {}-way episode", self.c_way))
            })? += 1;
        }
        if let Some(k) = counts.iter().position(|&n| n == 0) {
            return Err(ModelError::Contract(format!("class {k} has no support examples")));
        }
        Ok(())
    }

    fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.c_way];
        self.classes.iter().for_each(|&k| counts[k] += 1);
        counts
    }
}

/// Builds the `[n × C]` score matrix (higher is better) for every query of
/// an episode.
pub fn episode_scores(graph: &mut Graph, bound: &Bound, bundle: &ModelBundle, inputs: &EpisodeInputs) -> Result<NodeId> {
    let cfg = &bundle.config;
    inputs.check(cfg.input_dim)?;
    let n = inputs.query.shape()[0];
    let c = inputs.c_way;
    let support = graph.input(inputs.support.clone());
    let query = graph.input(inputs.query.clone());
    let (support, query) = if bundle.kind.uses_encoder() {
        (encoder_forward(graph, bound, support)?, encoder_forward(graph, bound, query)?)
    } else {
        (support, query)
    };
    let counts = inputs.class_counts();
    match bundle.kind {
        ModelKind::Matching => {
            let s = graph.normalize_rows(support).map_err(|e| numeric("matching support", e))?;
            let q = graph.normalize_rows(query).map_err(|e| numeric("matching query", e))?;
            let st = graph.transpose(s)?;
            let cos = graph.matmul(q, st)?;
            let avg = graph.input(inputs.class_matrix(|k| 1.0 / counts[k] as f64)?);
            Ok(graph.matmul(cos, avg)?)
        }
        ModelKind::Prototypical => {
            let avg = graph.input(inputs.class_matrix(|k| 1.0 / counts[k] as f64)?);
            let avg_t = graph.transpose(avg)?;
            let protos = graph.matmul(avg_t, support)?;
            let dist = graph.pairwise_distance(query, protos)?;
            Ok(graph.scale(dist, -1.0)?)
        }
        ModelKind::Relation | ModelKind::Attentive => {
            let ind = graph.input(inputs.class_matrix(|_| 1.0)?);
            let ind_t = graph.transpose(ind)?;
            let sums = graph.matmul(ind_t, support)?;
            let pairs = graph.pair_sum(query, sums)?;
            let r = if bundle.kind == ModelKind::Relation {
                relation_head_forward(graph, bound, cfg, pairs)?
            } else {
                attentive_head_forward(graph, bound, cfg, pairs)?.r
            };
            Ok(graph.reshape(r, &[n, c])?)
        }
    }
}

fn numeric(stage: &str, e: crate::tensor::TensorError) -> ModelError {
    match e {
        crate::tensor::TensorError::NonFinite { stage: inner } => ModelError::Numeric {
            stage: format!("{stage}: {inner}"),
        },
        other => other.into(),
    }
}
