//! Relation head with residual conv blocks and a learned position attention.

use crate::graph::{Graph, NodeId, Padding};
use crate::tensor::Tensor;

use super::{class_sum, BlockWiring, Bound, ModelBundle, ModelConfig, ModelError, ModelKind, PredictionDistribution, Result};

/// Graph nodes of one batched attentive forward pass over `p` pairs of
/// length `d` with `ch` channels.
#[derive(Debug, Clone, Copy)]
pub struct AttentiveNodes {
    /// First local descriptor, `[p × ch × d]`.
    pub l1: NodeId,
    /// Second local descriptor, `[p × ch × d]`.
    pub l2: NodeId,
    /// Compatibility score per position, `[p × 1 × d]`.
    pub c: NodeId,
    /// `σ(c)`, `[p × 1 × d]`.
    pub a: NodeId,
    /// `l1` weighted by `a`, `[p × ch × d]`.
    pub g: NodeId,
    /// Relation score per pair, `[p]`.
    pub r: NodeId,
}

/// Per-class intermediate values of [`attentive_relation_scores`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDiagnostics {
    pub r: f64,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    /// Flattened channel-major `g`.
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentiveOutput {
    pub distribution: PredictionDistribution,
    pub per_class: Vec<ClassDiagnostics>,
}

fn residual_block(
    graph: &mut Graph,
    x: NodeId,
    kernel: NodeId,
    bias: NodeId,
    proj: Option<NodeId>,
) -> Result<NodeId> {
    let h = graph.conv1d(x, kernel, Padding::Same)?;
    let h = graph.add_channel_bias(h, bias)?;
    let skip = match proj {
        Some(w) => graph.conv1d(x, w, Padding::Same)?,
        None => x,
    };
    let h = graph.add(h, skip)?;
    Ok(graph.relu(h)?)
}

fn check_stage(graph: &Graph, node: NodeId, stage: &str) -> Result<()> {
    if graph.value(node).is_finite() {
        Ok(())
    } else {
        Err(ModelError::Numeric {
            stage: format!("attentive.{stage}"),
        })
    }
}

/// Runs the attentive head on pair vectors `[p × d]`.
pub fn attentive_head_forward(
    graph: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    pairs: NodeId,
) -> Result<AttentiveNodes> {
    let &[p, d] = graph.value(pairs).shape() else {
        return Err(ModelError::Contract(format!(
            "attentive head expects [pairs × dimension], got {:?}",
            graph.value(pairs).shape()
        )));
    };
    let x = graph.reshape(pairs, &[p, 1, d])?;
    let l1 = residual_block(
        graph,
        x,
        bound.get("attentive.block1.w"),
        bound.get("attentive.block1.b"),
        Some(bound.get("attentive.block1.proj")),
    )?;
    check_stage(graph, l1, "l1")?;
    let l2 = match cfg.wiring {
        BlockWiring::Sequential => residual_block(
            graph,
            l1,
            bound.get("attentive.block2.w"),
            bound.get("attentive.block2.b"),
            None,
        )?,
        BlockWiring::Parallel => residual_block(
            graph,
            x,
            bound.get("attentive.block2.w"),
            bound.get("attentive.block2.b"),
            Some(bound.get("attentive.block2.proj")),
        )?,
    };
    check_stage(graph, l2, "l2")?;
    let local = graph.add(l1, l2)?;
    let c = graph.conv1d(local, bound.get("attentive.u.w"), Padding::Same)?;
    let c = graph.add_channel_bias(c, bound.get("attentive.u.b"))?;
    check_stage(graph, c, "c")?;
    let a = graph.sigmoid(c)?;
    let g = graph.mul_channels(l1, a)?;
    let g_flat = graph.reshape(g, &[p, cfg.channels * d])?;
    let c_flat = graph.reshape(c, &[p, d])?;
    let features = graph.concat(g_flat, c_flat, 1)?;
    let logit = graph.matmul(features, bound.get("attentive.classifier.w"))?;
    let logit = graph.add_bias(logit, bound.get("attentive.classifier.b"))?;
    check_stage(graph, logit, "classifier")?;
    let r = graph.sigmoid(logit)?;
    let r = graph.reshape(r, &[p])?;
    Ok(AttentiveNodes { l1, l2, c, a, g, r })
}

/// Scores each class from raw support vectors and returns the head's
/// intermediate values alongside the prediction.
pub fn attentive_relation_scores<F: AsRef<[f64]>>(
    bundle: &ModelBundle,
    support: &[F],
    classes: &[usize],
    query: &[f64],
) -> Result<AttentiveOutput> {
    if bundle.kind != ModelKind::Attentive {
        return Err(ModelError::Contract(format!("{} bundle has no attentive head", bundle.kind)));
    }
    let d = bundle.config.input_dim;
    if query.len() != d || support.iter().any(|s| s.as_ref().len() != d) {
        return Err(ModelError::Contract(format!("attentive head expects vectors of dimension {d}")));
    }
    if support.len() != classes.len() {
        return Err(ModelError::Contract("support and class index counts differ".into()));
    }
    let sums = class_sum(support, classes)?;
    let n_classes = sums.len();
    let mut graph = Graph::new();
    let bound = bundle.bind(&mut graph, false);
    let sums = graph.input(Tensor::from_rows(&sums)?);
    let q = graph.input(Tensor::new(vec![1, d], query.to_vec())?);
    let pairs = graph.pair_sum(q, sums)?;
    let nodes = attentive_head_forward(&mut graph, &bound, &bundle.config, pairs)?;
    let ch = bundle.config.channels;
    let per_class = (0..n_classes)
        .map(|k| ClassDiagnostics {
            r: graph.value(nodes.r).data()[k],
            a: graph.value(nodes.a).data()[k * d..(k + 1) * d].to_vec(),
            c: graph.value(nodes.c).data()[k * d..(k + 1) * d].to_vec(),
            g: graph.value(nodes.g).data()[k * ch * d..(k + 1) * ch * d].to_vec(),
        })
        .collect::<Vec<_>>();
    let distribution = PredictionDistribution::from_scores(per_class.iter().map(|c| c.r).collect())?;
    Ok(AttentiveOutput {
        distribution,
        per_class,
    })
}
