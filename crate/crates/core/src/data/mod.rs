//! Triplet collections: the labeled token vectors episodes are drawn from.

mod io;
mod split;
mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{read_collection, write_collection, MANIFEST_FILE, TRIPLETS_FILE};
pub use split::{build_domain_splits, subsample_collection, DomainSplit, ShortageWarning, Subsampled};
pub use validate::{validate_collection, Issue, Location, ValidationReport};

/// Current on-disk format revision.
pub const FORMAT_VERSION: u32 = 1;

/// Per-slot collection sizes used for the standard experiment grid.
pub const STANDARD_SIZES: [usize; 3] = [50, 100, 200];

/// Collection size always used on the evaluation side.
pub const TEST_COLLECTION_SIZE: usize = 200;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: validation error: {message}")]
    Validation {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid collection: {0}")]
    Invalid(String),
    #[error("label `{label}` appears in domains `{first}` and `{second}`")]
    AmbiguousLabel {
        label: String,
        first: String,
        second: String,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Embedder {
    Fasttext,
    Elmo,
    Bert,
    Synthetic,
}

impl Embedder {
    pub const ALL: [Embedder; 4] = [Self::Fasttext, Self::Elmo, Self::Bert, Self::Synthetic];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fasttext => "fasttext",
            Self::Elmo => "elmo",
            Self::Bert => "bert",
            Self::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Embedder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Embedder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown embedder `{s}` (expected fasttext, elmo, bert or synthetic)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionManifest {
    pub embedder: Embedder,
    pub dimension: usize,
    pub domains: Vec<String>,
    pub values_per_slot: usize,
    pub format_version: u32,
    /// How the exporter combined model layers, e.g. `bert-L10-13-mean`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_policy: Option<String>,
}

impl CollectionManifest {
    pub fn new(embedder: Embedder, dimension: usize, domains: Vec<String>, values_per_slot: usize) -> Self {
        Self {
            embedder,
            dimension,
            domains,
            values_per_slot,
            format_version: FORMAT_VERSION,
            layer_policy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub token: String,
    pub label: String,
    pub vector: Vec<f64>,
}

impl Triplet {
    pub fn new(token: impl Into<String>, label: impl Into<String>, vector: Vec<f64>) -> Self {
        Self {
            token: token.into(),
            label: label.into(),
            vector,
        }
    }
}

/// An immutable set of triplets plus a label → positions index.
#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    manifest: CollectionManifest,
    triplets: Vec<Triplet>,
    label_index: BTreeMap<String, Vec<usize>>,
}

impl Collection {
    /// Builds a collection, enforcing vector dimensions and non-empty
    /// token/label fields. Finite-ness and domain membership are reported by
    /// [`validate_collection`] instead.
    pub fn new(manifest: CollectionManifest, triplets: Vec<Triplet>) -> Result<Self> {
        if manifest.dimension == 0 {
            return Err(DataError::Invalid("manifest dimension must be positive".into()));
        }
        for (i, t) in triplets.iter().enumerate() {
            if let Some(msg) = structural_problem(t, manifest.dimension) {
                return Err(DataError::Invalid(format!("triplet {i}: {msg}")));
            }
        }
        let label_index = index_labels(&triplets);
        Ok(Self {
            manifest,
            triplets,
            label_index,
        })
    }

    pub fn manifest(&self) -> &CollectionManifest {
        &self.manifest
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn triplet(&self, i: usize) -> &Triplet {
        &self.triplets[i]
    }

    pub fn dimension(&self) -> usize {
        self.manifest.dimension
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Labels in sorted order.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.label_index.keys().map(String::as_str)
    }

    pub fn label_set(&self) -> BTreeSet<String> {
        self.label_index.keys().cloned().collect()
    }

    pub fn label_count(&self) -> usize {
        self.label_index.len()
    }

    /// Positions of the triplets carrying `label`.
    pub fn indices_of(&self, label: &str) -> Option<&[usize]> {
        self.label_index.get(label).map(Vec::as_slice)
    }

    pub fn label_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.label_index
    }

    /// A new collection holding only the triplets whose label is in `labels`.
    pub fn restrict_labels(&self, labels: &BTreeSet<String>, domains: Vec<String>) -> Collection {
        let triplets = self
            .triplets
            .iter()
            .filter(|t| labels.contains(&t.label))
            .cloned()
            .collect::<Vec<_>>();
        let manifest = CollectionManifest {
            domains,
            ..self.manifest.clone()
        };
        let label_index = index_labels(&triplets);
        Collection {
            manifest,
            triplets,
            label_index,
        }
    }

    /// Concatenates collections that share embedder and dimension.
    pub fn merge(parts: &[&Collection], domains: Vec<String>, values_per_slot: usize) -> Result<Collection> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::Contract("merge needs at least one collection".into()))?;
        let mut triplets = Vec::new();
        for part in parts {
            if part.manifest.dimension != first.manifest.dimension
                || part.manifest.embedder != first.manifest.embedder
            {
                return Err(DataError::Invalid(format!(
                    "cannot merge {} dim {} with {} dim {}",
                    first.manifest.embedder,
                    first.manifest.dimension,
                    part.manifest.embedder,
                    part.manifest.dimension
                )));
            }
            triplets.extend(part.triplets.iter().cloned());
        }
        let manifest = CollectionManifest {
            domains,
            values_per_slot,
            ..first.manifest.clone()
        };
        Collection::new(manifest, triplets)
    }
}

pub(crate) fn structural_problem(t: &Triplet, dimension: usize) -> Option<String> {
    if t.token.is_empty() {
        Some("empty token".into())
    } else if t.label.is_empty() {
        Some("empty label".into())
    } else if t.vector.len() != dimension {
        Some(format!(
            "vector has dimension {} but the manifest declares {dimension}",
            t.vector.len()
        ))
    } else {
        None
    }
}

fn index_labels(triplets: &[Triplet]) -> BTreeMap<String, Vec<usize>> {
    let mut index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, t) in triplets.iter().enumerate() {
        index.entry(t.label.clone()).or_default().push(i);
    }
    index
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_exhaustive() {
        let c = testutil::grid_collection(3, 4, 2);
        assert_eq!(c.label_count(), 3);
        let total: usize = c.label_index().values().map(Vec::len).sum();
        assert_eq!(total, c.len());
        for (label, idx) in c.label_index() {
            assert!(idx.iter().all(|&i| &c.triplet(i).label == label));
        }
    }

    #[test]
    fn rejects_wrong_dimension_and_empty_fields() {
        let m = CollectionManifest::new(Embedder::Bert, 4, vec!["d".into()], 50);
        assert!(Collection::new(m.clone(), vec![Triplet::new("a", "x", vec![0.0; 3])]).is_err());
        assert!(Collection::new(m.clone(), vec![Triplet::new("", "x", vec![0.0; 4])]).is_err());
        assert!(Collection::new(m.clone(), vec![Triplet::new("a", "", vec![0.0; 4])]).is_err());
        assert!(Collection::new(m, vec![]).unwrap().is_empty());
    }

    #[test]
    fn embedder_names_round_trip() {
        for e in Embedder::ALL {
            assert_eq!(e.name().parse::<Embedder>().unwrap(), e);
            assert_eq!(serde_json::to_string(&e).unwrap(), format!("\"{}\"", e.name()));
        }
        assert!("glove".parse::<Embedder>().is_err());
    }

    #[test]
    fn restrict_and_merge() {
        let c = testutil::grid_collection(4, 2, 3);
        let keep: BTreeSet<String> = ["label01".to_string(), "label03".to_string()].into();
        let r = c.restrict_labels(&keep, vec!["b".into()]);
        assert_eq!(r.label_set(), keep);
        assert_eq!(r.len(), 4);
        let m = Collection::merge(&[&r, &r], vec!["b".into()], 4).unwrap();
        assert_eq!(m.len(), 8);
        assert_eq!(m.indices_of("label01").unwrap().len(), 4);
    }
}
