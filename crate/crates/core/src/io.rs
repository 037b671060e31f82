//! File formats: annotation and assignment JSON Lines, JSON documents, round
//! histories and binary parameter checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::metrics::{RoundHistory, RoundRecord};
use crate::partition::PartitionPlan;
use crate::semantics::{AnnotationRecord, CategoryMap, ClusterAssignment};
use crate::trainer::{ModelLayout, ModelParams};
use crate::{Error, Result};

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, reason: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.to_string(),
    }
}

/// Non-blank lines of a JSON Lines file, each parsed as `T`, with 1-based
/// line numbers.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e))?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads annotation records, one JSON object per line. Relation indices are
/// checked against `bounds` when given.
pub fn load_annotations(path: &Path, bounds: Option<[usize; 3]>) -> Result<Vec<AnnotationRecord>> {
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for (line, rec) in read_jsonl::<AnnotationRecord>(path)? {
        rec.validate(bounds).map_err(|e| parse_err(path, line, e))?;
        if !seen.insert(rec.sample_id.clone()) {
            return Err(parse_err(path, line, format!("duplicate sample_id `{}`", rec.sample_id)));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let mut text = String::new();
    open(path)?
        .read_to_string(&mut text)
        .map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_category_map(path: &Path) -> Result<CategoryMap> {
    read_json(path)
}

#[derive(Serialize, Deserialize)]
struct AssignmentLine {
    sample_id: String,
    cluster: usize,
}

/// Reads `{"sample_id", "cluster"}` lines. Without `n_clusters`, the count is
/// one more than the largest index.
pub fn load_assignment(path: &Path, n_clusters: Option<usize>) -> Result<ClusterAssignment> {
    let mut labels = BTreeMap::new();
    for (line, a) in read_jsonl::<AssignmentLine>(path)? {
        if labels.insert(a.sample_id.clone(), a.cluster).is_some() {
            return Err(parse_err(path, line, format!("duplicate sample_id `{}`", a.sample_id)));
        }
    }
    let n = n_clusters.unwrap_or_else(|| labels.values().max().map_or(0, |m| m + 1));
    Ok(ClusterAssignment::new(n, labels)?)
}

pub fn write_assignment(path: &Path, assignment: &ClusterAssignment) -> Result<()> {
    write_jsonl(
        path,
        assignment.iter().map(|(id, c)| AssignmentLine {
            sample_id: id.to_string(),
            cluster: c,
        }),
    )
}

pub fn load_plan(path: &Path) -> Result<PartitionPlan> {
    read_json(path)
}

pub fn write_plan(path: &Path, plan: &PartitionPlan) -> Result<()> {
    write_json(path, plan)
}

pub fn load_history(path: &Path) -> Result<RoundHistory> {
    let records = read_jsonl::<RoundRecord>(path)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    Ok(RoundHistory { records })
}

pub fn write_history(path: &Path, history: &RoundHistory) -> Result<()> {
    write_text(path, &history.to_jsonl())
}

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    num_classes: usize,
    feature_dim: usize,
    count: usize,
}

/// Writes a JSON header line followed by the parameters as little-endian f64.
pub fn write_params(path: &Path, params: &ModelParams) -> Result<()> {
    let layout = params.layout();
    let header = ParamsHeader {
        num_classes: layout.num_classes,
        feature_dim: layout.feature_dim,
        count: params.len(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for v in params.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| parse_err(path, 1, "missing header line"))?;
    let header: ParamsHeader = serde_json::from_slice(&bytes[..split]).map_err(|e| parse_err(path, 1, e))?;
    let body = &bytes[split + 1..];
    if body.len() != header.count * 8 {
        return Err(parse_err(
            path,
            2,
            format!("expected {} parameter bytes, found {}", header.count * 8, body.len()),
        ));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let layout = ModelLayout {
        num_classes: header.num_classes,
        feature_dim: header.feature_dim,
    };
    Ok(ModelParams::from_vec(layout, values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GeneratorSpec};
    use crate::semantics::{build_category_tensor, Triplet, PSG_DIMS};
    use tempfile::tempdir;

    #[test]
    fn empty_and_single_line_files() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_annotations(&p, None).unwrap().is_empty());
        fs::write(&p, "{\"sample_id\":\"img1\",\"relations\":[[0,1,2]]}\n\n").unwrap();
        let recs = load_annotations(&p, Some(PSG_DIMS)).unwrap();
        assert_eq!(recs, vec![AnnotationRecord::with_relations("img1", vec![Triplet::new(0, 1, 2)])]);
    }

    #[test]
    fn annotation_round_trip() {
        let (records, _) = generate(&GeneratorSpec::psg_like(4, 25, 0.1, 9)).unwrap();
        assert_eq!(records.len(), 100);
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        write_annotations(&p, &records).unwrap();
        assert_eq!(load_annotations(&p, Some(PSG_DIMS)).unwrap(), records);
    }

    #[test]
    fn annotation_errors_carry_line_numbers() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        fs::write(&p, "{\"sample_id\":\"a\",\"relations\":[[0,0,0]]}\n{oops\n").unwrap();
        let err = load_annotations(&p, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        let line = "{\"sample_id\":\"a\",\"relations\":[[0,0,0]]}\n";
        fs::write(&p, format!("{line}{line}")).unwrap();
        let err = load_annotations(&p, None).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("duplicate"), "{err}");

        fs::write(&p, "{\"sample_id\":\"a\",\"relations\":[[13,0,0]]}\n").unwrap();
        assert!(load_annotations(&p, Some(PSG_DIMS)).is_err());
        assert!(load_annotations(&p, None).is_ok());
    }

    #[test]
    fn category_maps() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("map.json");
        let map = CategoryMap::identity(PSG_DIMS).unwrap();
        write_json(&p, &map).unwrap();
        let loaded = load_category_map(&p).unwrap();
        assert_eq!(loaded.dims(), [13, 13, 7]);
        let rec = AnnotationRecord::with_relations("x", vec![Triplet::new(1, 2, 3)]);
        assert_eq!(build_category_tensor(&rec, &loaded).unwrap().len(), 1183);

        fs::write(&p, r#"{"object_map":{"0":0,"1":1},"predicate_map":{"0":0},"dims":[2,2,1]}"#).unwrap();
        let small = load_category_map(&p).unwrap();
        let err = small
            .map_record(&AnnotationRecord::with_relations("x", vec![Triplet::new(0, 5, 0)]))
            .unwrap_err();
        assert!(err.to_string().contains('5'), "{err}");

        fs::write(&p, r#"{"object_map":{"0":0,"1":2},"predicate_map":{"0":0},"dims":[3,3,1]}"#).unwrap();
        assert!(load_category_map(&p).is_err());
    }

    #[test]
    fn assignment_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("assignment.jsonl");
        let a = ClusterAssignment::from_labels(4, ["b", "a", "c"], &[0, 3, 1]).unwrap();
        write_assignment(&p, &a).unwrap();
        assert_eq!(load_assignment(&p, Some(4)).unwrap(), a);
        assert_eq!(load_assignment(&p, None).unwrap(), a);
    }

    #[test]
    fn params_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("global_params.bin");
        let layout = ModelLayout::for_dims(PSG_DIMS);
        let values: Vec<f64> = (0..layout.param_count()).map(|i| (i as f64).sin() * 1e-3).collect();
        let params = ModelParams::from_vec(layout, values).unwrap();
        write_params(&p, &params).unwrap();
        assert_eq!(load_params(&p).unwrap(), params);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(load_params(&p).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_annotations(Path::new("/nonexistent/x.jsonl"), None).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.jsonl"));
    }
}
