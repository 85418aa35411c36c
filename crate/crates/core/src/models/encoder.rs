//! Two-layer fully-connected feature encoder shared by the baseline heads.

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

use super::{Bound, ModelBundle, ModelError, Result};

/// `relu(x·w1 + b1)·w2 + b2` for a batch `x` of shape `[n × d]`.
pub fn encoder_forward(graph: &mut Graph, bound: &Bound, x: NodeId) -> Result<NodeId> {
    let h = graph.matmul(x, bound.get("encoder.w1"))?;
    let h = graph.add_bias(h, bound.get("encoder.b1"))?;
    let h = graph.relu(h)?;
    let out = graph.matmul(h, bound.get("encoder.w2"))?;
    Ok(graph.add_bias(out, bound.get("encoder.b2"))?)
}

/// Encodes a single vector outside of any training graph.
pub fn encode(bundle: &ModelBundle, vector: &[f64]) -> Result<Vec<f64>> {
    if !bundle.kind.uses_encoder() {
        return Err(ModelError::Contract(format!("{} models have no encoder", bundle.kind)));
    }
    if vector.len() != bundle.config.input_dim {
        return Err(ModelError::Contract(format!(
            "vector has dimension {}, encoder expects {}",
            vector.len(),
            bundle.config.input_dim
        )));
    }
    let mut g = Graph::new();
    let bound = bundle.bind(&mut g, false);
    let x = g.input(Tensor::new(vec![1, vector.len()], vector.to_vec())?);
    let y = encoder_forward(&mut g, &bound, x)?;
    Ok(g.value(y).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::models::{ModelConfig, ModelKind};

    #[test]
    fn zero_weights_give_zero_output() {
        let mut b = ModelBundle::init(ModelKind::Matching, ModelConfig::new(5), 1).unwrap();
        b.params.values_mut().for_each(|t| t.data_mut().fill(0.0));
        let out = encode(&b, &[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap();
        assert_eq!(out, vec![0.0; 64]);
    }

    #[test]
    fn identity_weights_pass_through_relu() {
        let mut cfg = ModelConfig::new(64);
        cfg.encoder_hidden = 64;
        let mut b = ModelBundle::init(ModelKind::Prototypical, cfg, 1).unwrap();
        b.params.values_mut().for_each(|t| t.data_mut().fill(0.0));
        for name in ["encoder.w1", "encoder.w2"] {
            let w = b.param_mut(name).unwrap().data_mut();
            (0..64).for_each(|i| w[i * 64 + i] = 1.0);
        }
        let x: Vec<f64> = (0..64).map(|i| i as f64 - 31.5).collect();
        let out = encode(&b, &x).unwrap();
        let expect: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
        assert_eq!(out, expect);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let b = ModelBundle::init(ModelKind::Relation, ModelConfig::new(4), 1).unwrap();
        assert!(encode(&b, &[1.0; 3]).is_err());
        let a = ModelBundle::init(ModelKind::Attentive, ModelConfig::new(4), 1).unwrap();
        assert!(encode(&a, &[1.0; 4]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut cfg = ModelConfig::new(6);
        cfg.encoder_hidden = 10;
        cfg.feature_dim = 4;
        let b = ModelBundle::init(ModelKind::Matching, cfg, 3).unwrap();
        let mut g = Graph::new();
        let bound = b.bind(&mut g, true);
        let x = g.input(Tensor::new(vec![3, 6], (0..18).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap());
        let y = encoder_forward(&mut g, &bound, x).unwrap();
        let sq = g.mul_elementwise(y, y).unwrap();
        let loss = g.mean_all(sq).unwrap();
        let report = grad_check(&mut g, loss, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
