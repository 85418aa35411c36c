//! Leave-one-domain-out splits and per-label subsampling.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Collection, CollectionManifest, DataError, Result};
use crate::seed::{derive_seed, StreamDomain};

/// One held-out domain and the label spaces on either side of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub test_domain: String,
    pub train_domains: Vec<String>,
    pub train_labels: BTreeSet<String>,
    pub test_labels: BTreeSet<String>,
}

/// One split per domain, each holding that domain out for testing.
///
/// Labels must be unique to a single domain so the train and test label
/// spaces of every split are disjoint.
pub fn build_domain_splits(
    domains: &[String],
    labels_by_domain: &BTreeMap<String, BTreeSet<String>>,
) -> Result<Vec<DomainSplit>> {
    if domains.len() < 2 {
        return Err(DataError::Contract(format!(
            "need at least two domains to split, got {}",
            domains.len()
        )));
    }
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for domain in domains {
        let labels = labels_by_domain
            .get(domain)
            .filter(|l| !l.is_empty())
            .ok_or_else(|| DataError::Contract(format!("domain `{domain}` has no labels")))?;
        for label in labels {
            if let Some(first) = owner.insert(label, domain) {
                if first != domain {
                    return Err(DataError::AmbiguousLabel {
                        label: label.clone(),
                        first: first.to_string(),
                        second: domain.clone(),
                    });
                }
            }
        }
    }
    let unique: BTreeSet<&String> = domains.iter().collect();
    if unique.len() != domains.len() {
        return Err(DataError::Contract("duplicate domain names".into()));
    }

    Ok(domains
        .iter()
        .map(|test_domain| {
            let train_domains: Vec<String> = domains.iter().filter(|d| *d != test_domain).cloned().collect();
            let train_labels = train_domains
                .iter()
                .flat_map(|d| labels_by_domain[d].iter().cloned())
                .collect();
            DomainSplit {
                test_domain: test_domain.clone(),
                train_domains,
                train_labels,
                test_labels: labels_by_domain[test_domain].clone(),
            }
        })
        .collect())
}

/// A label that had fewer triplets than requested.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortageWarning {
    pub label: String,
    pub requested: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subsampled {
    pub collection: Collection,
    pub warnings: Vec<ShortageWarning>,
}

/// Keeps `min(n, available)` uniformly chosen triplets per label.
///
/// Output is grouped by label (sorted) and keeps the original relative order
/// within each label.
pub fn subsample_collection(collection: &Collection, n: usize, seed: u64) -> Result<Subsampled> {
    if n == 0 {
        return Err(DataError::Contract("subsample size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, StreamDomain::Subsample, 0));
    let mut triplets = Vec::new();
    let mut warnings = Vec::new();
    for (label, indices) in collection.label_index() {
        let available = indices.len();
        let take = n.min(available);
        if take < n {
            log::warn!("label `{label}`: requested {n} values, only {available} available");
            warnings.push(ShortageWarning {
                label: label.clone(),
                requested: n,
                available,
            });
        }
        let mut chosen = rand::seq::index::sample(&mut rng, available, take).into_vec();
        chosen.sort_unstable();
        triplets.extend(chosen.into_iter().map(|i| collection.triplet(indices[i]).clone()));
    }
    let manifest = CollectionManifest {
        values_per_slot: n,
        ..collection.manifest().clone()
    };
    Ok(Subsampled {
        collection: Collection::new(manifest, triplets)?,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::grid_collection;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn minimal_two_domain_split() {
        let domains = vec!["A".to_string(), "B".to_string()];
        let labels = BTreeMap::from([("A".to_string(), set(&["x"])), ("B".to_string(), set(&["y"]))]);
        let splits = build_domain_splits(&domains, &labels).unwrap();
        assert_eq!(splits.len(), 2);
        assert_eq!(splits[0].test_domain, "A");
        assert_eq!(splits[0].train_domains, vec!["B".to_string()]);
        assert_eq!(splits[0].train_labels, set(&["y"]));
        assert_eq!(splits[0].test_labels, set(&["x"]));
        assert_eq!(splits[1].train_labels, set(&["x"]));
    }

    #[test]
    fn seven_domains_give_seven_splits() {
        let names = [
            "AddToPlaylist",
            "BookRestaurant",
            "GetWeather",
            "PlayMusic",
            "RateBook",
            "SearchCreativeWork",
            "SearchScreeningEvent",
        ];
        let domains: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        let labels = domains
            .iter()
            .map(|d| (d.clone(), set(&[&format!("{d}.a"), &format!("{d}.b")])))
            .collect();
        let splits = build_domain_splits(&domains, &labels).unwrap();
        assert_eq!(splits.len(), 7);
        for s in &splits {
            assert_eq!(s.train_domains.len(), 6);
            assert!(s.train_labels.is_disjoint(&s.test_labels));
            assert_eq!(s.train_labels.len() + s.test_labels.len(), 14);
        }
    }

    #[test]
    fn shared_label_is_ambiguous() {
        let domains = vec!["A".to_string(), "B".to_string()];
        let labels = BTreeMap::from([
            ("A".to_string(), set(&["x", "shared"])),
            ("B".to_string(), set(&["shared"])),
        ]);
        assert!(matches!(
            build_domain_splits(&domains, &labels),
            Err(DataError::AmbiguousLabel { .. })
        ));
    }

    #[test]
    fn split_preconditions() {
        let one = vec!["A".to_string()];
        let labels = BTreeMap::from([("A".to_string(), set(&["x"]))]);
        assert!(build_domain_splits(&one, &labels).is_err());
        let two = vec!["A".to_string(), "B".to_string()];
        assert!(build_domain_splits(&two, &labels).is_err());
    }

    #[test]
    fn subsample_full_size_is_identity_up_to_order() {
        let c = grid_collection(3, 5, 2);
        let s = subsample_collection(&c, 5, 9).unwrap();
        assert!(s.warnings.is_empty());
        assert_eq!(s.collection.triplets(), c.triplets());
    }

    #[test]
    fn subsample_one_per_label() {
        let c = grid_collection(4, 6, 2);
        let s = subsample_collection(&c, 1, 3).unwrap();
        assert_eq!(s.collection.len(), 4);
        assert!(s.collection.label_index().values().all(|v| v.len() == 1));
        assert_eq!(s.collection.manifest().values_per_slot, 1);
    }

    #[test]
    fn subsample_is_seeded() {
        let c = grid_collection(4, 20, 2);
        let a = subsample_collection(&c, 7, 77).unwrap();
        let b = subsample_collection(&c, 7, 77).unwrap();
        assert_eq!(a, b);
        let other = subsample_collection(&c, 7, 78).unwrap();
        assert_ne!(a.collection, other.collection);
    }

    #[test]
    fn subsample_truncates_with_warning() {
        let c = grid_collection(2, 3, 2);
        let s = subsample_collection(&c, 10, 1).unwrap();
        assert_eq!(s.collection.len(), 6);
        assert_eq!(s.warnings.len(), 2);
        assert_eq!(s.warnings[0].available, 3);
        assert!(subsample_collection(&c, 0, 1).is_err());
    }
}
