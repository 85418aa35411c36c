//! Convolutional relation module scoring summed (class, query) pairs.

use crate::graph::{Graph, NodeId, Padding};
use crate::tensor::Tensor;

use super::{Bound, ModelBundle, ModelConfig, ModelError, ModelKind, PredictionDistribution, Result};

/// Relation scores in (0, 1) for a batch of pair features `[p × f]`, shape `[p]`.
pub fn relation_head_forward(graph: &mut Graph, bound: &Bound, cfg: &ModelConfig, pairs: NodeId) -> Result<NodeId> {
    let &[p, f] = graph.value(pairs).shape() else {
        return Err(ModelError::Contract(format!(
            "relation head expects [pairs × features], got {:?}",
            graph.value(pairs).shape()
        )));
    };
    let x = graph.reshape(pairs, &[p, 1, f])?;
    let h = graph.conv1d(x, bound.get("relation.conv1.w"), Padding::Same)?;
    let h = graph.add_channel_bias(h, bound.get("relation.conv1.b"))?;
    let h = graph.relu(h)?;
    let h = graph.conv1d(h, bound.get("relation.conv2.w"), Padding::Same)?;
    let h = graph.add_channel_bias(h, bound.get("relation.conv2.b"))?;
    let h = graph.relu(h)?;
    let h = graph.reshape(h, &[p, cfg.channels * f])?;
    let h = graph.matmul(h, bound.get("relation.fc1.w"))?;
    let h = graph.add_bias(h, bound.get("relation.fc1.b"))?;
    let h = graph.relu(h)?;
    let h = graph.matmul(h, bound.get("relation.fc2.w"))?;
    let h = graph.add_bias(h, bound.get("relation.fc2.b"))?;
    let r = graph.sigmoid(h)?;
    Ok(graph.reshape(r, &[p])?)
}

/// Scores each class by the relation head applied to `class_sum + query`.
///
/// Inputs are already in the head's feature space (encoded features).
pub fn relation_scores<F: AsRef<[f64]>>(
    bundle: &ModelBundle,
    class_sums: &[F],
    query: &[f64],
) -> Result<PredictionDistribution> {
    if bundle.kind != ModelKind::Relation {
        return Err(ModelError::Contract(format!("{} bundle has no relation head", bundle.kind)));
    }
    let f = bundle.config.feature_dim;
    if query.len() != f || class_sums.iter().any(|s| s.as_ref().len() != f) {
        return Err(ModelError::Contract(format!("relation head expects features of dimension {f}")));
    }
    let mut g = Graph::new();
    let bound = bundle.bind(&mut g, false);
    let sums = g.input(Tensor::from_rows(class_sums)?);
    let q = g.input(Tensor::new(vec![1, f], query.to_vec())?);
    let pairs = g.pair_sum(q, sums)?;
    let r = relation_head_forward(&mut g, &bound, &bundle.config, pairs)?;
    PredictionDistribution::from_scores(g.value(r).data().to_vec())
}
