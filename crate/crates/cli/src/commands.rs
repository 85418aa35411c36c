//! One function per subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fsl_core::data::{
    build_domain_splits, read_collection, subsample_collection, validate_collection, write_collection, Collection,
    Embedder, TEST_COLLECTION_SIZE,
};
use fsl_core::fsio::write_atomic;
use fsl_core::models::ModelBundle;
use fsl_core::optim::OptimizerConfig;
use fsl_core::synth::{holdout_labels, synthesize, SynthSpec};
use fsl_core::training::{
    aggregate_report, compare_with_published, meta_test, meta_train, Checkpoint, EvalRun, GridCollections,
    GridSpec, ReportFormat, TrainConfig,
};

use crate::{CliError, EpisodeArgs, EvalArgs, GridArgs, Result, SplitArgs, SynthArgs, TrainArgs, ValidateArgs};

fn write_file(path: &Path, contents: &str) -> Result<()> {
    write_atomic(path, contents.as_bytes()).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    log::info!("wrote path={}", path.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn load(path: &Path, embedder: Option<Embedder>) -> Result<Collection> {
    let c = read_collection(path)?;
    if let Some(e) = embedder {
        if c.manifest().embedder != e {
            return Err(CliError::Usage(format!(
                "{} holds {} vectors, --embedder says {e}",
                path.display(),
                c.manifest().embedder
            )));
        }
    }
    log::info!(
        "loaded path={} triplets={} labels={} dim={}",
        path.display(),
        c.len(),
        c.label_count(),
        c.dimension()
    );
    Ok(c)
}

fn eval_csv(run: &EvalRun) -> String {
    let mut out = String::from("step,accuracy\n");
    for c in &run.checkpoints {
        writeln!(out, "{},{}", c.step, c.accuracy).unwrap();
    }
    writeln!(out, "final,{}", run.final_accuracy).unwrap();
    out
}

fn episode_config(e: &EpisodeArgs) -> TrainConfig {
    TrainConfig {
        c_way: e.c_way,
        k_shot: e.k_shot,
        query_per_class: e.queries,
        eval_episodes: e.eval_episodes,
        seed: e.seed,
        ..TrainConfig::default()
    }
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<()> {
    let collection = read_collection(&args.collection)?;
    let label_domains: Option<BTreeMap<String, String>> =
        args.label_domains.as_deref().map(read_json).transpose()?;
    let report = validate_collection(&collection, label_domains.as_ref());
    for issue in &report.violations {
        println!("violation: {}: {}", issue.location, issue.message);
    }
    for issue in &report.warnings {
        println!("warning: {}: {}", issue.location, issue.message);
    }
    println!(
        "{}: {} triplets, {} labels, {} violation(s), {} warning(s)",
        args.collection.display(),
        collection.len(),
        collection.label_count(),
        report.violations.len(),
        report.warnings.len()
    );
    if report.is_valid() {
        Ok(())
    } else {
        Err(CliError::Invalid(report.violations.len()))
    }
}

pub fn cmd_split(args: &SplitArgs) -> Result<()> {
    if args.size.is_empty() {
        return Err(CliError::Usage("at least one --size is required".into()));
    }
    let entries = std::fs::read_dir(&args.collection).map_err(|source| CliError::Io {
        path: args.collection.clone(),
        source,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut by_domain = BTreeMap::new();
    for dir in dirs {
        let domain = dir.file_name().expect("read_dir entries have names").to_string_lossy().into_owned();
        by_domain.insert(domain, load(&dir, None)?);
    }
    let domains: Vec<String> = by_domain.keys().cloned().collect();
    let labels = by_domain.iter().map(|(d, c)| (d.clone(), c.label_set())).collect();
    let splits = build_domain_splits(&domains, &labels)?;
    for split in &splits {
        let root = args.out.join(&split.test_domain);
        let parts: Vec<&Collection> = split.train_domains.iter().map(|d| &by_domain[d]).collect();
        let per_slot = parts.iter().map(|c| c.manifest().values_per_slot).max().unwrap_or(1);
        let train = Collection::merge(&parts, split.train_domains.clone(), per_slot)?;
        let mut shortages = BTreeMap::new();
        for &size in &args.size {
            let sub = subsample_collection(&train, size, args.seed)?;
            write_collection(&sub.collection, root.join(format!("train-{size}")))?;
            shortages.insert(format!("train-{size}"), sub.warnings);
        }
        let test = subsample_collection(&by_domain[&split.test_domain], args.test_size, args.seed)?;
        write_collection(&test.collection, root.join(format!("test-{}", args.test_size)))?;
        shortages.insert(format!("test-{}", args.test_size), test.warnings);
        let record = serde_json::json!({ "split": split, "shortages": shortages });
        write_file(&root.join("split.json"), &(serde_json::to_string_pretty(&record).unwrap() + "\n"))?;
        log::info!(
            "split test_domain={} train_labels={} test_labels={}",
            split.test_domain,
            split.train_labels.len(),
            split.test_labels.len()
        );
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let train = load(&args.collection, args.embedder)?;
    let test = args
        .test_collection
        .as_deref()
        .map(|p| load(p, args.embedder))
        .transpose()?;
    let cfg = TrainConfig {
        train_episodes: args.train_episodes,
        eval_every: args.eval_every,
        optimizer: OptimizerConfig {
            learning_rate: args.learning_rate,
            ..OptimizerConfig::default()
        },
        ..episode_config(&args.episodes)
    };
    log::info!(
        "train model={} episodes={} c_way={} k_shot={} seed={}",
        args.model,
        cfg.train_episodes,
        cfg.c_way,
        cfg.k_shot,
        cfg.seed
    );
    let outcome = meta_train(args.model, &train, test.as_ref(), &cfg, args.execution.into())?;
    outcome.bundle.save(args.out.join("checkpoint.json"))?;
    log::info!("wrote path={}", args.out.join("checkpoint.json").display());
    let mut curve = String::from("episode,loss,accuracy\n");
    for r in &outcome.curve {
        writeln!(curve, "{},{},{}", r.episode, r.loss, r.accuracy).unwrap();
    }
    write_file(&args.out.join("loss_curve.csv"), &curve)?;
    if let Some(run) = &outcome.eval {
        write_file(&args.out.join("eval.csv"), &eval_csv(run))?;
        log::info!("train final_accuracy={:.4}", run.final_accuracy);
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let bundle = ModelBundle::load(&args.checkpoint)?;
    let test = load(&args.test_collection, args.embedder)?;
    let cfg = episode_config(&args.episodes);
    let spec = cfg.eval_spec(test.label_count());
    let result = meta_test(&bundle, &test, &spec, args.execution.into())?;
    let run = EvalRun::new(vec![Checkpoint {
        step: result.step,
        accuracy: result.accuracy,
    }])?;
    write_file(&args.out.join("eval.csv"), &eval_csv(&run))?;
    let mut episodes = String::from("episode,accuracy\n");
    for (i, a) in result.episode_accuracies.iter().enumerate() {
        writeln!(episodes, "{},{}", i + 1, a).unwrap();
    }
    write_file(&args.out.join("episodes.csv"), &episodes)?;
    log::info!("eval c_way={} accuracy={:.4}", spec.episode.c_way, result.accuracy);
    Ok(())
}

/// Loads every collection a grid spec refers to from
/// `<root>/<embedder>/<domain>/{train-<size>,test-200}`; absent directories
/// are left out so the grid can report them.
pub fn read_grid_collections(root: &Path, spec: &GridSpec) -> Result<GridCollections> {
    let mut cols = GridCollections::new();
    for &embedder in &spec.embedders {
        for domain in &spec.domains {
            let base = root.join(embedder.name()).join(domain);
            let test = base.join(format!("test-{TEST_COLLECTION_SIZE}"));
            if test.is_dir() {
                cols.insert_test(domain, embedder, load(&test, Some(embedder))?);
            }
            for &size in &spec.sizes {
                let train = base.join(format!("train-{size}"));
                if train.is_dir() {
                    cols.insert_train(domain, embedder, size, load(&train, Some(embedder))?);
                }
            }
        }
    }
    Ok(cols)
}

pub fn cmd_grid(args: &GridArgs) -> Result<()> {
    let mut spec: GridSpec = read_json(&args.spec)?;
    if let Some(n) = args.train_episodes {
        spec.train.train_episodes = n;
    }
    if let Some(n) = args.eval_every {
        spec.train.eval_every = n;
    }
    if let Some(n) = args.eval_episodes {
        spec.train.eval_episodes = n;
    }
    if let Some(s) = args.seed {
        spec.train.seed = s;
    }
    let collections = read_grid_collections(&args.collection, &spec)?;
    let result = fsl_core::training::run_experiment_grid(&collections, &spec, args.execution.into())?;
    for m in &result.missing {
        log::warn!(
            "grid missing domain={} embedder={} collection={}",
            m.domain,
            m.embedder,
            m.size.map_or_else(|| "test".to_string(), |s| format!("train-{s}"))
        );
    }
    let record = serde_json::json!({
        "rows": result.to_rows(),
        "absent": result.absent,
        "missing": result.missing,
    });
    write_file(&args.out.join("grid.json"), &(serde_json::to_string_pretty(&record).unwrap() + "\n"))?;
    if result.is_empty() {
        return Err(CliError::Usage("grid spec selects no cells".into()));
    }
    write_file(&args.out.join("report.csv"), &aggregate_report(&result, ReportFormat::Csv)?)?;
    write_file(&args.out.join("report.md"), &aggregate_report(&result, ReportFormat::Markdown)?)?;
    write_file(&args.out.join("published.csv"), &compare_with_published(&result)?)?;
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        classes: args.classes,
        dim: args.dim,
        separation: args.separation,
        values_per_class: args.size,
        seed: args.seed,
    };
    let collection = synthesize(&spec)?;
    match args.holdout {
        None => write_collection(&collection, &args.out)?,
        Some(n) => {
            let (train, test) = holdout_labels(&collection, n)?;
            write_collection(&collection, args.out.join("all"))?;
            write_collection(&train, args.out.join("train"))?;
            write_collection(&test, args.out.join("test"))?;
        }
    }
    log::info!(
        "synth classes={} dim={} separation={} size={} seed={} out={}",
        spec.classes,
        spec.dim,
        spec.separation,
        spec.values_per_class,
        spec.seed,
        args.out.display()
    );
    Ok(())
}
