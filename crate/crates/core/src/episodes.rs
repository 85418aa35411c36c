//! Seeded C-way K-shot episode sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Collection;
use crate::seed::{derive_seed, StreamDomain};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EpisodeError {
    #[error("collection has {available} labels, episode needs {needed}")]
    TooFewLabels { needed: usize, available: usize },
    #[error("label `{label}` has {available} triplets, episode needs {needed}")]
    TooFewTriplets {
        label: String,
        needed: usize,
        available: usize,
    },
    #[error("invalid episode spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub c_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    /// Spec with as many queries per class as shots.
    pub fn new(c_way: usize, k_shot: usize, seed: u64) -> Self {
        Self {
            c_way,
            k_shot,
            query_per_class: k_shot,
            seed,
        }
    }

    pub fn with_queries(self, query_per_class: usize) -> Self {
        Self {
            query_per_class,
            ..self
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn support_size(&self) -> usize {
        self.c_way * self.k_shot
    }

    pub fn query_size(&self) -> usize {
        self.c_way * self.query_per_class
    }

    fn check(&self) -> Result<(), EpisodeError> {
        if self.c_way == 0 || self.k_shot == 0 || self.query_per_class == 0 {
            return Err(EpisodeError::Spec(format!(
                "c_way, k_shot and query_per_class must be positive (got {}, {}, {})",
                self.c_way, self.k_shot, self.query_per_class
            )));
        }
        Ok(())
    }
}

/// A triplet position in the source collection and its episode class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shot {
    pub index: usize,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    /// Label of each episode class, in class-index order.
    pub labels: Vec<String>,
    /// Class-major: the K shots of class 0, then class 1, ...
    pub support: Vec<Shot>,
    pub query: Vec<Shot>,
}

impl Episode {
    pub fn c_way(&self) -> usize {
        self.labels.len()
    }

    pub fn support_classes(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.class).collect()
    }

    pub fn query_classes(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.class).collect()
    }
}

/// Draws C distinct labels, then K support and `query_per_class` query
/// triplets per label without replacement.
pub fn sample_episode(collection: &Collection, spec: &EpisodeSpec) -> Result<Episode, EpisodeError> {
    spec.check()?;
    let labels: Vec<&str> = collection.labels().collect();
    if labels.len() < spec.c_way {
        return Err(EpisodeError::TooFewLabels {
            needed: spec.c_way,
            available: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chosen = rand::seq::index::sample(&mut rng, labels.len(), spec.c_way);
    let per_class = spec.k_shot + spec.query_per_class;

    let mut episode = Episode {
        labels: Vec::with_capacity(spec.c_way),
        support: Vec::with_capacity(spec.support_size()),
        query: Vec::with_capacity(spec.query_size()),
    };
    for (class, label_pos) in chosen.into_iter().enumerate() {
        let label = labels[label_pos];
        let pool = collection.indices_of(label).expect("label comes from the index");
        if pool.len() < per_class {
            return Err(EpisodeError::TooFewTriplets {
                label: label.to_string(),
                needed: per_class,
                available: pool.len(),
            });
        }
        let picks = rand::seq::index::sample(&mut rng, pool.len(), per_class);
        for (n, p) in picks.into_iter().enumerate() {
            let shot = Shot {
                index: pool[p],
                class,
            };
            if n < spec.k_shot {
                episode.support.push(shot);
            } else {
                episode.query.push(shot);
            }
        }
        episode.labels.push(label.to_string());
    }
    episode.query.sort_by_key(|s| s.class);
    Ok(episode)
}

/// Episode `index` of the stream `(spec.seed, domain)`.
///
/// Each episode depends only on its own derived seed, so any episode can be
/// produced without materializing the ones before it.
pub fn episode_at(
    collection: &Collection,
    spec: &EpisodeSpec,
    domain: StreamDomain,
    index: u64,
) -> Result<Episode, EpisodeError> {
    let derived = spec.with_seed(derive_seed(spec.seed, domain, index));
    sample_episode(collection, &derived)
}

/// Lazily yields `count` episodes of the training-domain stream.
pub fn episode_stream<'a>(collection: &'a Collection, spec: EpisodeSpec, count: usize) -> EpisodeStream<'a> {
    EpisodeStream::new(collection, spec, count, StreamDomain::TrainEpisodes)
}

pub struct EpisodeStream<'a> {
    collection: &'a Collection,
    spec: EpisodeSpec,
    domain: StreamDomain,
    next: usize,
    count: usize,
}

impl<'a> EpisodeStream<'a> {
    pub fn new(collection: &'a Collection, spec: EpisodeSpec, count: usize, domain: StreamDomain) -> Self {
        Self {
            collection,
            spec,
            domain,
            next: 0,
            count,
        }
    }
}

impl Iterator for EpisodeStream<'_> {
    type Item = Result<Episode, EpisodeError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let i = self.next;
        self.next += 1;
        Some(episode_at(self.collection, &self.spec, self.domain, i as u64))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.count - self.next;
        (left, Some(left))
    }

    fn nth(&mut self, n: usize) -> Option<Self::Item> {
        self.next = self.next.saturating_add(n).min(self.count);
        self.next()
    }
}

impl ExactSizeIterator for EpisodeStream<'_> {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::grid_collection;
    use std::collections::BTreeSet;

    #[test]
    fn five_way_five_shot_shape() {
        let c = grid_collection(10, 12, 3);
        let e = sample_episode(&c, &EpisodeSpec::new(5, 5, 1)).unwrap();
        assert_eq!(e.labels.len(), 5);
        assert_eq!(e.support.len(), 25);
        assert_eq!(e.query.len(), 25);
        for class in 0..5 {
            assert_eq!(e.support.iter().filter(|s| s.class == class).count(), 5);
            assert_eq!(e.query.iter().filter(|s| s.class == class).count(), 5);
        }
        for s in e.support.iter().chain(&e.query) {
            assert_eq!(c.triplet(s.index).label, e.labels[s.class]);
        }
    }

    #[test]
    fn three_way_when_domain_has_three_labels() {
        let c = grid_collection(3, 10, 2);
        let e = sample_episode(&c, &EpisodeSpec::new(3, 5, 4)).unwrap();
        assert_eq!(e.c_way(), 3);
        assert!(matches!(
            sample_episode(&c, &EpisodeSpec::new(5, 1, 4)),
            Err(EpisodeError::TooFewLabels { needed: 5, available: 3 })
        ));
    }

    #[test]
    fn one_triplet_short_is_a_capacity_error() {
        // K + Q - 1 triplets per label
        let c = grid_collection(2, 5, 2);
        let err = sample_episode(&c, &EpisodeSpec::new(2, 3, 0)).unwrap_err();
        match err {
            EpisodeError::TooFewTriplets { needed, available, label } => {
                assert_eq!((needed, available), (6, 5));
                assert!(label.starts_with("label"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn support_and_query_are_disjoint() {
        let c = grid_collection(6, 8, 2);
        for e in episode_stream(&c, EpisodeSpec::new(4, 3, 9).with_queries(5), 200) {
            let e = e.unwrap();
            let s: BTreeSet<usize> = e.support.iter().map(|s| s.index).collect();
            let q: BTreeSet<usize> = e.query.iter().map(|s| s.index).collect();
            assert_eq!(s.len(), e.support.len());
            assert_eq!(q.len(), e.query.len());
            assert!(s.is_disjoint(&q));
        }
    }

    #[test]
    fn stream_is_reproducible_and_random_access() {
        let c = grid_collection(8, 10, 2);
        let spec = EpisodeSpec::new(5, 2, 1234);
        let a: Vec<_> = episode_stream(&c, spec, 10).map(Result::unwrap).collect();
        let b: Vec<_> = episode_stream(&c, spec, 10).map(Result::unwrap).collect();
        assert_eq!(a, b);
        let seventh = episode_stream(&c, spec, 10).nth(7).unwrap().unwrap();
        assert_eq!(seventh, a[7]);
        assert_eq!(episode_at(&c, &spec, StreamDomain::TrainEpisodes, 3).unwrap(), a[3]);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn zero_sized_spec_is_rejected() {
        let c = grid_collection(3, 3, 1);
        assert!(matches!(
            sample_episode(&c, &EpisodeSpec::new(2, 0, 0)),
            Err(EpisodeError::Spec(_))
        ));
    }
}
