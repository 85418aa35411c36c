//! Line-delimited collection files.
//!
//! A collection lives in a directory holding `manifest.json` and
//! `triplets.jsonl`; each triplet line is an object with `token`, `label` and
//! `vector` keys. Vectors are written with 17 significant digits so they
//! parse back to the identical `f64`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{structural_problem, Collection, CollectionManifest, DataError, Result, Triplet};
use crate::fsio::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    token: String,
    label: String,
    vector: Vec<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_collection(dir: impl AsRef<Path>) -> Result<Collection> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: CollectionManifest = serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: manifest_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.dimension == 0 {
        return Err(DataError::Validation {
            path: manifest_path,
            line: 1,
            message: "dimension must be positive".into(),
        });
    }

    let triplets_path = dir.join(TRIPLETS_FILE);
    let body = std::fs::read_to_string(&triplets_path).map_err(io_err(&triplets_path))?;
    let mut triplets = Vec::new();
    for (n, line) in body.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| DataError::Parse {
            path: triplets_path.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        let t = Triplet::new(rec.token, rec.label, rec.vector);
        if let Some(message) = structural_problem(&t, manifest.dimension) {
            return Err(DataError::Validation {
                path: triplets_path,
                line: line_no,
                message,
            });
        }
        triplets.push(t);
    }
    Collection::new(manifest, triplets)
}

/// Writes `collection` under `dir`, creating the directory if needed.
pub fn write_collection(collection: &Collection, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut body = String::new();
    for (i, t) in collection.triplets().iter().enumerate() {
        if let Some(bad) = t.vector.iter().find(|v| !v.is_finite()) {
            return Err(DataError::Validation {
                path: dir.join(TRIPLETS_FILE),
                line: i + 1,
                message: format!("non-finite vector component {bad} cannot be serialized"),
            });
        }
        body.push_str("{\"token\":");
        body.push_str(&serde_json::to_string(&t.token).expect("string serialization"));
        body.push_str(",\"label\":");
        body.push_str(&serde_json::to_string(&t.label).expect("string serialization"));
        body.push_str(",\"vector\":[");
        for (j, v) in t.vector.iter().enumerate() {
            if j > 0 {
                body.push(',');
            }
            write!(body, "{v:.16e}").expect("write to string");
        }
        body.push_str("]}\n");
    }
    let manifest = serde_json::to_string_pretty(collection.manifest()).expect("manifest serialization");
    let triplets_path: PathBuf = dir.join(TRIPLETS_FILE);
    write_atomic(&triplets_path, body.as_bytes()).map_err(io_err(&triplets_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    write_atomic(&manifest_path, format!("{manifest}\n").as_bytes()).map_err(io_err(&manifest_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Embedder, FORMAT_VERSION};

    fn two_triplets() -> Collection {
        let m = CollectionManifest::new(Embedder::Elmo, 3, vec!["PlayMusic".into()], 50);
        Collection::new(
            m,
            vec![
                Triplet::new("beatles", "artist", vec![0.1, -2.5e-7, 1.0 / 3.0]),
                Triplet::new("say \"hi\"", "track", vec![f64::MIN_POSITIVE, 1e300, -0.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn write_then_read_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let c = two_triplets();
        write_collection(&c, dir.path()).unwrap();
        let back = read_collection(dir.path()).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.triplets().iter().zip(c.triplets()) {
            for (x, y) in a.vector.iter().zip(&b.vector) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn manifest_uses_exact_key_names() {
        let dir = tempfile::tempdir().unwrap();
        write_collection(&two_triplets(), dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["dimension", "domains", "embedder", "format_version", "values_per_slot"]);
        assert_eq!(v["format_version"], FORMAT_VERSION);
        let line = std::fs::read_to_string(dir.path().join(TRIPLETS_FILE)).unwrap();
        assert!(line.starts_with("{\"token\":\"beatles\",\"label\":\"artist\",\"vector\":["));
    }

    #[test]
    fn dimension_mismatch_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let m = CollectionManifest::new(Embedder::Bert, 4, vec!["d".into()], 50);
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        std::fs::write(
            dir.path().join(TRIPLETS_FILE),
            "{\"token\":\"a\",\"label\":\"x\",\"vector\":[1,2,3,4]}\n\
             {\"token\":\"b\",\"label\":\"x\",\"vector\":[1,2,3]}\n",
        )
        .unwrap();
        match read_collection(dir.path()) {
            Err(DataError::Validation { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let m = CollectionManifest::new(Embedder::Bert, 1, vec!["d".into()], 50);
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        std::fs::write(
            dir.path().join(TRIPLETS_FILE),
            "{\"token\":\"a\",\"label\":\"x\",\"vector\":[1]}\n\n{\"token\":\"b\",\"vector\":[1]}\n",
        )
        .unwrap();
        match read_collection(dir.path()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_collection_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = CollectionManifest::new(Embedder::Fasttext, 300, vec!["GetWeather".into()], 100);
        let c = Collection::new(m, vec![]).unwrap();
        write_collection(&c, dir.path()).unwrap();
        assert_eq!(read_collection(dir.path()).unwrap(), c);
    }

    #[test]
    fn refuses_to_write_nan() {
        let dir = tempfile::tempdir().unwrap();
        let m = CollectionManifest::new(Embedder::Fasttext, 1, vec!["d".into()], 1);
        let c = Collection::new(m, vec![Triplet::new("a", "x", vec![f64::NAN])]).unwrap();
        assert!(matches!(write_collection(&c, dir.path()), Err(DataError::Validation { .. })));
    }
}
