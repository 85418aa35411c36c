//! CSV and Markdown rendering of grid results, and the published reference table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use crate::data::Embedder;
use crate::models::ModelKind;

use super::{CellKey, GridResult, Result, TrainingError};

/// Accuracies published for the full-scale setup, one row per
/// (domain, embedder, model, K). Shipped for side-by-side display only.
pub const PUBLISHED_GOLDENS: &str = include_str!("../../goldens/published.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            _ => Err(format!("unknown report format `{s}` (expected csv or markdown)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenRow {
    pub cell: CellKey,
    /// Percent, as printed.
    pub accuracy: f64,
}

/// Parses [`PUBLISHED_GOLDENS`].
pub fn published_goldens() -> Vec<GoldenRow> {
    PUBLISHED_GOLDENS
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            GoldenRow {
                cell: CellKey {
                    domain: f[0].to_string(),
                    embedder: f[1].parse().expect("goldens embedder"),
                    model: f[2].parse().expect("goldens model"),
                    k_shot: f[3].parse().expect("goldens K"),
                },
                accuracy: f[4].parse().expect("goldens accuracy"),
            }
        })
        .collect()
}

fn percent(acc: f64) -> String {
    format!("{:.1}", acc * 100.0)
}

/// Renders the per-cell accuracies (mean over sizes) as percentages.
///
/// Rows are ordered by domain, embedder, model and ascending K; the output
/// depends only on `result`.
pub fn aggregate_report(result: &GridResult, format: ReportFormat) -> Result<String> {
    if result.is_empty() {
        return Err(TrainingError::Contract("cannot report an empty grid".into()));
    }
    let cells = result.cells();
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str("domain,embedder,model,k_shot,accuracy\n");
            for (k, acc) in &cells {
                writeln!(out, "{},{},{},{},{}", k.domain, k.embedder, k.model, k.k_shot, percent(*acc)).unwrap();
            }
        }
        ReportFormat::Markdown => {
            let all: BTreeSet<&CellKey> = cells.keys().chain(&result.absent).collect();
            let embedders: BTreeSet<Embedder> = all.iter().map(|k| k.embedder).collect();
            for (i, embedder) in embedders.into_iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                let of_embedder: Vec<&&CellKey> = all.iter().filter(|k| k.embedder == embedder).collect();
                let domains: BTreeSet<&str> = of_embedder.iter().map(|k| k.domain.as_str()).collect();
                let rows: BTreeSet<(ModelKind, usize)> = of_embedder.iter().map(|k| (k.model, k.k_shot)).collect();
                writeln!(out, "## {embedder}\n").unwrap();
                out.push_str("| model | K |");
                domains.iter().for_each(|d| write!(out, " {d} |").unwrap());
                out.push_str("\n|---|---|");
                domains.iter().for_each(|_| out.push_str("---|"));
                out.push('\n');
                for (model, k_shot) in rows {
                    write!(out, "| {model} | {k_shot} |").unwrap();
                    for domain in &domains {
                        let key = CellKey {
                            domain: domain.to_string(),
                            embedder,
                            model,
                            k_shot,
                        };
                        let value = cells.get(&key).map_or_else(|| "n/a".to_string(), |a| percent(*a));
                        write!(out, " {value} |").unwrap();
                    }
                    out.push('\n');
                }
            }
        }
    }
    Ok(out)
}

/// CSV of measured cells next to the published value for the same cell,
/// where one exists.
pub fn compare_with_published(result: &GridResult) -> Result<String> {
    if result.is_empty() {
        return Err(TrainingError::Contract("cannot report an empty grid".into()));
    }
    let published: BTreeMap<CellKey, f64> = published_goldens().into_iter().map(|g| (g.cell, g.accuracy)).collect();
    let mut out = String::from("domain,embedder,model,k_shot,accuracy,published\n");
    for (k, acc) in result.cells() {
        let reference = published.get(&k).map_or_else(String::new, |p| format!("{p:.1}"));
        writeln!(out, "{},{},{},{},{},{reference}", k.domain, k.embedder, k.model, k.k_shot, percent(acc)).unwrap();
    }
    Ok(out)
}
