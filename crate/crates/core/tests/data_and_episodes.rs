use std::collections::{BTreeMap, BTreeSet};

use fsl_core::data::{
    build_domain_splits, read_collection, subsample_collection, write_collection, Collection, CollectionManifest,
    Embedder, Triplet,
};
use fsl_core::episodes::{episode_stream, EpisodeSpec};
use fsl_core::synth::{synthesize, SynthSpec};
use proptest::prelude::*;

fn collection(labels: usize, per_label: usize, dim: usize) -> Collection {
    let triplets = (0..labels)
        .flat_map(|l| {
            (0..per_label).map(move |v| {
                Triplet::new(format!("tok{l}_{v}"), format!("label{l:02}"), vec![(l * 100 + v) as f64; dim])
            })
        })
        .collect();
    let manifest = CollectionManifest::new(Embedder::Fasttext, dim, vec!["Weather".into()], per_label);
    Collection::new(manifest, triplets).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn write_then_read_is_identity(
        rows in prop::collection::vec(
            ("[a-zA-Z\\u{e9}\" ]{1,8}", 0usize..4, prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 3)),
            1..20,
        )
    ) {
        let triplets: Vec<Triplet> = rows
            .into_iter()
            .map(|(token, l, v)| Triplet::new(token, format!("slot_{l}"), v))
            .collect();
        let mut manifest = CollectionManifest::new(Embedder::Bert, 3, vec!["PlayMusic".into()], 200);
        manifest.layer_policy = Some("bert-L10-13-mean".into());
        let c = Collection::new(manifest, triplets).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_collection(&c, dir.path()).unwrap();
        let back = read_collection(dir.path()).unwrap();
        prop_assert_eq!(&back, &c);
        for (a, b) in back.triplets().iter().zip(c.triplets()) {
            let bits_a: Vec<u64> = a.vector.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.vector.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn subsample_keeps_min_of_request_and_supply(n in 1usize..12, per_label in 1usize..10, seed in any::<u64>()) {
        let c = collection(4, per_label, 2);
        let s = subsample_collection(&c, n, seed).unwrap();
        let originals: BTreeSet<String> = c.triplets().iter().map(|t| t.token.clone()).collect();
        for (label, idx) in s.collection.label_index() {
            prop_assert_eq!(idx.len(), n.min(per_label), "{}", label);
        }
        prop_assert!(s.collection.triplets().iter().all(|t| originals.contains(&t.token)));
        prop_assert_eq!(s.warnings.is_empty(), n <= per_label);
        prop_assert_eq!(s.collection.manifest().values_per_slot, n);
        // deterministic in the seed
        prop_assert_eq!(subsample_collection(&c, n, seed).unwrap().collection, s.collection);
    }

    #[test]
    fn domain_splits_partition_labels(sizes in prop::collection::vec(1usize..5, 2..8)) {
        let domains: Vec<String> = (0..sizes.len()).map(|i| format!("D{i}")).collect();
        let by_domain: BTreeMap<String, BTreeSet<String>> = domains
            .iter()
            .zip(&sizes)
            .map(|(d, &n)| (d.clone(), (0..n).map(|j| format!("{d}_slot{j}")).collect()))
            .collect();
        let all: BTreeSet<String> = by_domain.values().flatten().cloned().collect();
        let splits = build_domain_splits(&domains, &by_domain).unwrap();
        prop_assert_eq!(splits.len(), domains.len());
        for s in &splits {
            prop_assert!(s.train_labels.is_disjoint(&s.test_labels));
            let union: BTreeSet<String> = s.train_labels.union(&s.test_labels).cloned().collect();
            prop_assert_eq!(&union, &all);
            prop_assert_eq!(s.train_domains.len(), domains.len() - 1);
            prop_assert!(!s.train_domains.contains(&s.test_domain));
        }
    }

    #[test]
    fn episode_shots_are_disjoint_and_class_consistent(c in 1usize..6, k in 1usize..4, q in 1usize..4, seed in any::<u64>()) {
        let col = collection(6, 8, 2);
        let spec = EpisodeSpec::new(c, k, seed).with_queries(q);
        for ep in episode_stream(&col, spec, 5) {
            let ep = ep.unwrap();
            prop_assert_eq!(ep.support.len(), c * k);
            prop_assert_eq!(ep.query.len(), c * q);
            let support: BTreeSet<usize> = ep.support.iter().map(|s| s.index).collect();
            let query: BTreeSet<usize> = ep.query.iter().map(|s| s.index).collect();
            prop_assert_eq!(support.len(), c * k);
            prop_assert!(support.is_disjoint(&query));
            for shot in ep.support.iter().chain(&ep.query) {
                prop_assert_eq!(&col.triplet(shot.index).label, &ep.labels[shot.class]);
            }
            let distinct: BTreeSet<&String> = ep.labels.iter().collect();
            prop_assert_eq!(distinct.len(), c);
        }
    }
}

#[test]
fn label_selection_frequency_is_uniform() {
    // 10 labels, 5-way: each label is drawn with probability 1/2 per episode
    let col = collection(10, 10, 1);
    let n = 10_000;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for ep in episode_stream(&col, EpisodeSpec::new(5, 5, 2024), n) {
        for l in ep.unwrap().labels {
            *counts.entry(l).or_default() += 1;
        }
    }
    let p = 0.5;
    let expected = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert_eq!(counts.len(), 10);
    for (label, &count) in &counts {
        assert!((count as f64 - expected).abs() <= 5.0 * sd, "{label}: {count} vs {expected} ± {}", 5.0 * sd);
    }
}

#[test]
fn synthetic_collection_shape_and_determinism() {
    let spec = SynthSpec {
        classes: 10,
        dim: 32,
        separation: 4.0,
        values_per_class: 50,
        seed: 7,
    };
    let a = synthesize(&spec).unwrap();
    assert_eq!(a.len(), 500);
    assert_eq!(a.label_count(), 10);
    assert_eq!(a.manifest().embedder, Embedder::Synthetic);
    assert_eq!(a.dimension(), 32);

    let dir = tempfile::tempdir().unwrap();
    write_collection(&a, dir.path().join("a")).unwrap();
    write_collection(&synthesize(&spec).unwrap(), dir.path().join("b")).unwrap();
    for f in ["manifest.json", "triplets.jsonl"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
}
