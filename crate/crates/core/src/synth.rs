//! Gaussian-cluster collections with a controllable class separation.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Collection, CollectionManifest, DataError, Embedder, Triplet};
use crate::seed::{derive_seed, StreamDomain};

pub const SYNTHETIC_DOMAIN: &str = "synthetic";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    /// Radius of the sphere the class means are drawn on.
    pub separation: f64,
    pub values_per_class: usize,
    pub seed: u64,
}

/// Class `c` has mean `separation · u_c` for a uniformly random unit vector
/// `u_c`, and its values are that mean plus standard normal noise.
pub fn synthesize(spec: &SynthSpec) -> Result<Collection, DataError> {
    if spec.classes == 0 || spec.dim == 0 || spec.values_per_class == 0 {
        return Err(DataError::Contract("classes, dim and values per class must be positive".into()));
    }
    if !(spec.separation >= 0.0 && spec.separation.is_finite()) {
        return Err(DataError::Contract(format!("separation must be finite and non-negative, got {}", spec.separation)));
    }
    let width = (spec.classes - 1).to_string().len();
    let mut triplets = Vec::with_capacity(spec.classes * spec.values_per_class);
    for c in 0..spec.classes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, StreamDomain::Synthetic, c as u64));
        let direction: Vec<f64> = loop {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        };
        let label = format!("class{c:0width$}");
        for v in 0..spec.values_per_class {
            let vector = direction
                .iter()
                .map(|u| spec.separation * u + rng.sample::<f64, _>(StandardNormal))
                .collect();
            triplets.push(Triplet::new(format!("{label}_v{v}"), label.clone(), vector));
        }
    }
    let manifest = CollectionManifest::new(
        Embedder::Synthetic,
        spec.dim,
        vec![SYNTHETIC_DOMAIN.to_string()],
        spec.values_per_class,
    );
    Collection::new(manifest, triplets)
}

/// Splits off the last `test_labels` labels (in sorted order) as a
/// label-disjoint test collection.
pub fn holdout_labels(collection: &Collection, test_labels: usize) -> Result<(Collection, Collection), DataError> {
    let labels: Vec<String> = collection.labels().map(str::to_string).collect();
    if test_labels == 0 || test_labels >= labels.len() {
        return Err(DataError::Contract(format!(
            "cannot hold out {test_labels} of {} labels",
            labels.len()
        )));
    }
    let cut = labels.len() - test_labels;
    let train: BTreeSet<String> = labels[..cut].iter().cloned().collect();
    let test: BTreeSet<String> = labels[cut..].iter().cloned().collect();
    let domains = collection.manifest().domains.clone();
    Ok((
        collection.restrict_labels(&train, domains.clone()),
        collection.restrict_labels(&test, domains),
    ))
}
