//! Non-mutating invariant checks over a collection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use super::{index_labels, structural_problem, Collection, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "at", rename_all = "lowercase")]
pub enum Location {
    Manifest,
    /// 1-based line in the triplets file.
    Line(usize),
    Label(String),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Manifest => f.write_str("manifest"),
            Self::Line(n) => write!(f, "line {n}"),
            Self::Label(l) => write!(f, "label `{l}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub location: Location,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn violation(&mut self, location: Location, message: impl Into<String>) {
        self.violations.push(Issue {
            location,
            message: message.into(),
        });
    }

    fn warning(&mut self, location: Location, message: impl Into<String>) {
        self.warnings.push(Issue {
            location,
            message: message.into(),
        });
    }
}

/// Checks every collection invariant and lists what fails.
///
/// `label_domains`, when supplied, maps each label to its owning domain and
/// enables the domain-membership check.
pub fn validate_collection(
    collection: &Collection,
    label_domains: Option<&BTreeMap<String, String>>,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    let manifest = collection.manifest();
    if manifest.dimension == 0 {
        report.violation(Location::Manifest, "dimension must be positive");
    }
    if manifest.values_per_slot == 0 {
        report.violation(Location::Manifest, "values_per_slot must be positive");
    }
    if manifest.format_version != FORMAT_VERSION {
        report.violation(
            Location::Manifest,
            format!("unsupported format_version {}", manifest.format_version),
        );
    }
    if manifest.domains.is_empty() {
        report.violation(Location::Manifest, "no domains listed");
    }

    let mut seen: BTreeSet<(&str, &str)> = BTreeSet::new();
    for (i, t) in collection.triplets().iter().enumerate() {
        let at = Location::Line(i + 1);
        if let Some(msg) = structural_problem(t, manifest.dimension) {
            report.violation(at.clone(), msg);
        }
        if let Some(pos) = t.vector.iter().position(|v| !v.is_finite()) {
            report.violation(at.clone(), format!("non-finite vector component at index {pos}"));
        }
        if !seen.insert((&t.token, &t.label)) {
            report.warning(at, format!("duplicate token `{}` for label `{}`", t.token, t.label));
        }
    }

    if &index_labels(collection.triplets()) != collection.label_index() {
        report.violation(Location::Manifest, "label index is inconsistent with the triplets");
    }
    for (label, idx) in collection.label_index() {
        if idx.is_empty() {
            report.violation(Location::Label(label.clone()), "label has no triplets");
        } else if idx.len() < manifest.values_per_slot {
            report.warning(
                Location::Label(label.clone()),
                format!("{} values, fewer than values_per_slot {}", idx.len(), manifest.values_per_slot),
            );
        }
        if let Some(map) = label_domains {
            match map.get(label) {
                None => report.violation(Location::Label(label.clone()), "label has no known domain"),
                Some(d) if !manifest.domains.contains(d) => report.violation(
                    Location::Label(label.clone()),
                    format!("label belongs to domain `{d}`, which the manifest does not list"),
                ),
                Some(_) => {}
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::grid_collection;
    use crate::data::{CollectionManifest, Embedder, Triplet};

    #[test]
    fn valid_collection_has_no_violations() {
        let c = grid_collection(3, 4, 2);
        let r = validate_collection(&c, None);
        assert!(r.violations.is_empty(), "{r:?}");
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn duplicate_pairs_are_warnings() {
        let m = CollectionManifest::new(Embedder::Bert, 2, vec!["d".into()], 2);
        let c = Collection::new(
            m,
            vec![Triplet::new("jazz", "genre", vec![0.0, 1.0]), Triplet::new("jazz", "genre", vec![1.0, 0.0])],
        )
        .unwrap();
        let r = validate_collection(&c, None);
        assert!(r.is_valid());
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.warnings[0].location, Location::Line(2));
    }

    #[test]
    fn nan_is_a_violation() {
        let m = CollectionManifest::new(Embedder::Bert, 2, vec!["d".into()], 1);
        let c = Collection::new(
            m,
            vec![Triplet::new("a", "x", vec![0.0, 1.0]), Triplet::new("b", "x", vec![f64::NAN, 0.0])],
        )
        .unwrap();
        let r = validate_collection(&c, None);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].location, Location::Line(2));
    }

    #[test]
    fn foreign_domain_label_is_a_violation() {
        let c = grid_collection(2, 1, 2);
        let map = BTreeMap::from([
            ("label00".to_string(), "synthetic".to_string()),
            ("label01".to_string(), "elsewhere".to_string()),
        ]);
        let r = validate_collection(&c, Some(&map));
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].location, Location::Label("label01".into()));
    }
}
