//! Fixed-metric scoring over already-embedded features.

use super::{encode, ModelBundle, ModelError, Result};

/// Per-class scores (higher is better) and the winning class.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDistribution {
    pub scores: Vec<f64>,
    pub predicted: usize,
}

impl PredictionDistribution {
    /// Argmax with ties resolved toward the lowest class index.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(ModelError::Contract("no classes to score".into()));
        }
        if let Some(c) = scores.iter().position(|s| !s.is_finite()) {
            return Err(ModelError::Numeric {
                stage: format!("score of class {c}"),
            });
        }
        let mut predicted = 0;
        for (c, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[predicted] {
                predicted = c;
            }
        }
        Ok(Self { scores, predicted })
    }

    pub fn num_classes(&self) -> usize {
        self.scores.len()
    }
}

/// Number of classes implied by `classes`, requiring every index in
/// `0..C` to occur at least once.
fn class_count(classes: &[usize]) -> Result<usize> {
    let c = classes
        .iter()
        .max()
        .map(|m| m + 1)
        .ok_or_else(|| ModelError::Contract("empty support set".into()))?;
    let mut seen = vec![false; c];
    classes.iter().for_each(|&k| seen[k] = true);
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(ModelError::Contract(format!("class {missing} has no support examples")));
    }
    Ok(c)
}

fn check_dims<F: AsRef<[f64]>>(support: &[F], classes: &[usize], query: &[f64]) -> Result<()> {
    if support.len() != classes.len() {
        return Err(ModelError::Contract(format!(
            "{} support features but {} class indices",
            support.len(),
            classes.len()
        )));
    }
    if let Some(i) = support.iter().position(|s| s.as_ref().len() != query.len()) {
        return Err(ModelError::Contract(format!(
            "support item {i} has dimension {}, query has {}",
            support[i].as_ref().len(),
            query.len()
        )));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Elementwise sum of each class's support features.
pub fn class_sum<F: AsRef<[f64]>>(support: &[F], classes: &[usize]) -> Result<Vec<Vec<f64>>> {
    let c = class_count(classes)?;
    let dim = support.first().map(|s| s.as_ref().len()).unwrap_or(0);
    let mut sums = vec![vec![0.0; dim]; c];
    for (f, &k) in support.iter().zip(classes) {
        let f = f.as_ref();
        if f.len() != dim {
            return Err(ModelError::Contract("support features differ in dimension".into()));
        }
        for (s, v) in sums[k].iter_mut().zip(f) {
            *s += v;
        }
    }
    Ok(sums)
}

/// Mean cosine similarity between the query and each class's supports.
pub fn matching_scores<F: AsRef<[f64]>>(
    support: &[F],
    classes: &[usize],
    query: &[f64],
) -> Result<PredictionDistribution> {
    check_dims(support, classes, query)?;
    let c = class_count(classes)?;
    let qn = norm(query);
    if qn == 0.0 {
        return Err(ModelError::Numeric {
            stage: "matching: query has zero norm".into(),
        });
    }
    let mut totals = vec![0.0; c];
    let mut counts = vec![0usize; c];
    for (i, (s, &k)) in support.iter().zip(classes).enumerate() {
        let s = s.as_ref();
        let sn = norm(s);
        if sn == 0.0 {
            return Err(ModelError::Numeric {
                stage: format!("matching: support item {i} has zero norm"),
            });
        }
        let dot: f64 = s.iter().zip(query).map(|(a, b)| a * b).sum();
        totals[k] += dot / (sn * qn);
        counts[k] += 1;
    }
    let scores = totals.iter().zip(&counts).map(|(t, &n)| t / n as f64).collect();
    PredictionDistribution::from_scores(scores)
}

/// Negative Euclidean distance from the query to each class mean.
pub fn prototypical_scores<F: AsRef<[f64]>>(
    support: &[F],
    classes: &[usize],
    query: &[f64],
) -> Result<PredictionDistribution> {
    check_dims(support, classes, query)?;
    let sums = class_sum(support, classes)?;
    let mut counts = vec![0usize; sums.len()];
    classes.iter().for_each(|&k| counts[k] += 1);
    let scores = sums
        .iter()
        .zip(&counts)
        .map(|(sum, &n)| {
            let dist2: f64 = sum
                .iter()
                .zip(query)
                .map(|(s, q)| {
                    let diff = q - s / n as f64;
                    diff * diff
                })
                .sum();
            -dist2.sqrt()
        })
        .collect();
    PredictionDistribution::from_scores(scores)
}

fn is_unit(v: &[f64]) -> bool {
    (norm(v) - 1.0).abs() <= 1e-9
}

/// Whether cosine matching and nearest-prototype classification agree on a
/// one-shot episode of unit-norm features.
///
/// On the unit sphere `‖q − s‖² = 2 − 2·cos(q, s)`, so the two argmaxes must
/// coincide; unnormalized input or more than one shot per class is refused.
pub fn one_shot_equivalence<F: AsRef<[f64]>>(support: &[F], classes: &[usize], query: &[f64]) -> Result<bool> {
    let c = class_count(classes)?;
    if classes.len() != c {
        return Err(ModelError::Contract(format!(
            "one-shot check needs exactly one support per class, got {} for {c} classes",
            classes.len()
        )));
    }
    if !is_unit(query) {
        return Err(ModelError::Contract("query feature is not unit-normalized".into()));
    }
    if let Some(i) = support.iter().position(|s| !is_unit(s.as_ref())) {
        return Err(ModelError::Contract(format!("support item {i} is not unit-normalized")));
    }
    let m = matching_scores(support, classes, query)?;
    let p = prototypical_scores(support, classes, query)?;
    Ok(m.predicted == p.predicted)
}

/// Encodes raw vectors with the bundle's encoder, normalizes them and runs
/// [`one_shot_equivalence`].
pub fn one_shot_equivalence_check<F: AsRef<[f64]>>(
    bundle: &ModelBundle,
    support: &[F],
    classes: &[usize],
    query: &[f64],
) -> Result<bool> {
    let unit = |v: Vec<f64>| -> Result<Vec<f64>> {
        let n = norm(&v);
        if n == 0.0 {
            return Err(ModelError::Numeric {
                stage: "one-shot check: zero-norm feature".into(),
            });
        }
        Ok(v.into_iter().map(|x| x / n).collect())
    };
    let feats = support
        .iter()
        .map(|s| encode(bundle, s.as_ref()).and_then(unit))
        .collect::<Result<Vec<_>>>()?;
    let q = unit(encode(bundle, query)?)?;
    one_shot_equivalence(&feats, classes, &q)
}
