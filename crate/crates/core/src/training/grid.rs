//! The (domain × embedder × model × K × size) experiment grid.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{Collection, Embedder, STANDARD_SIZES};
use crate::models::ModelKind;
use crate::parallel::{map_slice, Execution};

use super::{meta_test, meta_train, Result, TrainConfig};

/// Which cells to run and how to train each one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Held-out test domains.
    pub domains: Vec<String>,
    pub embedders: Vec<Embedder>,
    pub models: Vec<ModelKind>,
    pub k_shots: Vec<usize>,
    #[serde(default = "standard_sizes")]
    pub sizes: Vec<usize>,
    /// Shared schedule; `k_shot` is replaced per cell.
    #[serde(default)]
    pub train: TrainConfig,
}

fn standard_sizes() -> Vec<usize> {
    STANDARD_SIZES.to_vec()
}

/// Train collections by (test domain, embedder, size) and test collections
/// by (test domain, embedder).
#[derive(Debug, Clone, Default)]
pub struct GridCollections {
    train: BTreeMap<(String, Embedder, usize), Collection>,
    test: BTreeMap<(String, Embedder), Collection>,
}

impl GridCollections {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_train(&mut self, domain: &str, embedder: Embedder, size: usize, collection: Collection) {
        self.train.insert((domain.to_string(), embedder, size), collection);
    }

    pub fn insert_test(&mut self, domain: &str, embedder: Embedder, collection: Collection) {
        self.test.insert((domain.to_string(), embedder), collection);
    }

    pub fn train(&self, domain: &str, embedder: Embedder, size: usize) -> Option<&Collection> {
        self.train.get(&(domain.to_string(), embedder, size))
    }

    pub fn test(&self, domain: &str, embedder: Embedder) -> Option<&Collection> {
        self.test.get(&(domain.to_string(), embedder))
    }
}

/// A cell of the published tables: accuracy averaged over collection sizes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub domain: String,
    pub embedder: Embedder,
    pub model: ModelKind,
    pub k_shot: usize,
}

/// One training run: a cell at a single train-collection size.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridKey {
    pub cell: CellKey,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MissingCollection {
    pub domain: String,
    pub embedder: Embedder,
    /// Train size, or `None` for the test collection.
    pub size: Option<usize>,
}

/// Flat, serializable form of one [`GridResult`] row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub domain: String,
    pub embedder: Embedder,
    pub model: ModelKind,
    pub k_shot: usize,
    pub size: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridResult {
    /// Final accuracy of every completed run.
    pub rows: BTreeMap<GridKey, f64>,
    /// Cells skipped because a collection they need is missing.
    pub absent: BTreeSet<CellKey>,
    pub missing: BTreeSet<MissingCollection>,
}

impl GridResult {
    /// Mean final accuracy over sizes for each completed cell.
    pub fn cells(&self) -> BTreeMap<CellKey, f64> {
        let mut sums: BTreeMap<CellKey, (f64, usize)> = BTreeMap::new();
        for (key, acc) in &self.rows {
            let e = sums.entry(key.cell.clone()).or_insert((0.0, 0));
            e.0 += acc;
            e.1 += 1;
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// Rows in key order, for serialization.
    pub fn to_rows(&self) -> Vec<GridRow> {
        self.rows
            .iter()
            .map(|(k, &accuracy)| GridRow {
                domain: k.cell.domain.clone(),
                embedder: k.cell.embedder,
                model: k.cell.model,
                k_shot: k.cell.k_shot,
                size: k.size,
                accuracy,
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() && self.absent.is_empty()
    }
}

fn run_cell(key: &GridKey, collections: &GridCollections, base: &TrainConfig) -> Result<f64> {
    let cell = &key.cell;
    let train = collections
        .train(&cell.domain, cell.embedder, key.size)
        .expect("jobs are only created for present collections");
    let test = collections
        .test(&cell.domain, cell.embedder)
        .expect("jobs are only created for present collections");
    let cfg = TrainConfig {
        k_shot: cell.k_shot,
        ..base.clone()
    };
    log::info!(
        "grid: {} / {} / {} / K={} / size {}",
        cell.domain,
        cell.embedder,
        cell.model,
        cell.k_shot,
        key.size
    );
    let outcome = meta_train(cell.model, train, Some(test), &cfg, Execution::Serial)?;
    match outcome.eval {
        Some(run) => Ok(run.final_accuracy),
        None => {
            let spec = cfg.eval_spec(test.label_count());
            Ok(meta_test(&outcome.bundle, test, &spec, Execution::Serial)?.accuracy)
        }
    }
}

/// Runs every cell of `spec`, each at every train-collection size.
///
/// Cells whose collections are missing are recorded as absent and skipped.
/// Runs are independent and share no state, so `exec` only changes how they
/// are scheduled, never the result.
pub fn run_experiment_grid(collections: &GridCollections, spec: &GridSpec, exec: Execution) -> Result<GridResult> {
    spec.train.validate()?;
    let mut result = GridResult::default();
    let mut jobs = Vec::new();
    for domain in &spec.domains {
        for &embedder in &spec.embedders {
            let mut missing = Vec::new();
            if collections.test(domain, embedder).is_none() {
                missing.push(None);
            }
            for &size in &spec.sizes {
                if collections.train(domain, embedder, size).is_none() {
                    missing.push(Some(size));
                }
            }
            for &model in &spec.models {
                for &k_shot in &spec.k_shots {
                    let cell = CellKey {
                        domain: domain.clone(),
                        embedder,
                        model,
                        k_shot,
                    };
                    if missing.is_empty() {
                        jobs.extend(spec.sizes.iter().map(|&size| GridKey {
                            cell: cell.clone(),
                            size,
                        }));
                    } else {
                        result.absent.insert(cell);
                    }
                }
            }
            for size in missing {
                log::warn!("grid: missing {} collection for {domain} / {embedder}", match size {
                    Some(s) => format!("train-{s}"),
                    None => "test".to_string(),
                });
                result.missing.insert(MissingCollection {
                    domain: domain.clone(),
                    embedder,
                    size,
                });
            }
        }
    }
    let outcomes = map_slice(&jobs, exec, |key| run_cell(key, collections, &spec.train));
    for (key, acc) in jobs.into_iter().zip(outcomes) {
        result.rows.insert(key, acc?);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::grid_collection;
    use crate::models::ModelConfig;

    fn relabel(c: &Collection, prefix: &str) -> Collection {
        let triplets = c
            .triplets()
            .iter()
            .map(|t| crate::data::Triplet::new(t.token.clone(), format!("{prefix}{}", t.label), t.vector.clone()))
            .collect();
        Collection::new(c.manifest().clone(), triplets).unwrap()
    }

    fn tiny_spec() -> GridSpec {
        let mut model = ModelConfig::new(4);
        model.encoder_hidden = 6;
        model.feature_dim = 4;
        model.channels = 2;
        model.relation_hidden = 3;
        GridSpec {
            domains: vec!["Beta".into(), "Alpha".into()],
            embedders: vec![Embedder::Synthetic],
            models: vec![ModelKind::Prototypical, ModelKind::Relation],
            k_shots: vec![2],
            sizes: vec![6],
            train: TrainConfig {
                train_episodes: 4,
                eval_every: 2,
                eval_episodes: 3,
                c_way: 3,
                k_shot: 2,
                query_per_class: Some(1),
                seed: 3,
                model: Some(model),
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn missing_collections_mark_cells_absent() {
        let mut cols = GridCollections::new();
        cols.insert_train("Alpha", Embedder::Synthetic, 6, relabel(&grid_collection(4, 6, 4), "tr"));
        cols.insert_test("Alpha", Embedder::Synthetic, relabel(&grid_collection(2, 6, 4), "te"));
        let spec = tiny_spec();
        let serial = run_experiment_grid(&cols, &spec, Execution::Serial).unwrap();
        let parallel = run_experiment_grid(&cols, &spec, Execution::Parallel).unwrap();
        assert_eq!(serial, parallel);
        assert_eq!(serial.rows.len(), 2);
        assert_eq!(serial.absent.len(), 2);
        assert!(serial.absent.iter().all(|c| c.domain == "Beta"));
        assert_eq!(serial.missing.len(), 2);
        let cells = serial.cells();
        let keys: Vec<_> = cells.keys().map(|k| (k.domain.as_str(), k.model)).collect();
        assert_eq!(keys, vec![("Alpha", ModelKind::Prototypical), ("Alpha", ModelKind::Relation)]);
    }

    #[test]
    fn spec_parses_with_defaults() {
        let spec: GridSpec = serde_json::from_str(
            r#"{"domains":["RateBook"],"embedders":["bert"],"models":["attentive"],"k_shots":[15]}"#,
        )
        .unwrap();
        assert_eq!(spec.sizes, vec![50, 100, 200]);
        assert_eq!(spec.train, TrainConfig::default());
    }
}
