//! Ingestion of ScanQA-style question files.
//!
//! Question file: a JSON array of records
//! `{"question_id", "scene_id", "question", "answers": [..]}`; other fields are
//! ignored. Annotation file: a JSON array of
//! `{"scene_id", "objects": [{"label", "center": [x,y,z], "size": [dx,dy,dz]}]}`
//! where `size` is the full box extent. Clouds are looked up as
//! `<cloud_dir>/<scene_id>.ply` or `.xyz`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{DatasetManifest, ManifestHeader, QaItem, SceneRecord, TaskTag, MANIFEST_VERSION, VIEWER_CONVENTION};
use crate::error::{Error, Result};
use crate::pointcloud::AxisAlignedBox;

fn schema(index: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        index,
        field: field.to_string(),
        message: message.into(),
    }
}

fn read_json_array(path: &Path) -> Result<Vec<Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Array(a)) => Ok(a),
        Ok(_) => Err(Error::Parse {
            path: path.display().to_string(),
            message: "expected a JSON array of records".into(),
        }),
        Err(e) => Err(Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        }),
    }
}

fn string_field(rec: &Value, index: usize, field: &str) -> Result<String> {
    match rec.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) if field.ends_with("_id") => Ok(n.to_string()),
        Some(_) => Err(schema(index, field, "expected a string")),
        None => Err(schema(index, field, "missing")),
    }
}

fn vec3_field(obj: &Value, index: usize, field: &str) -> Result<[f64; 3]> {
    let arr = obj
        .get(field)
        .and_then(Value::as_array)
        .ok_or_else(|| schema(index, field, "expected an array of three numbers"))?;
    if arr.len() != 3 {
        return Err(schema(index, field, format!("expected 3 numbers, found {}", arr.len())));
    }
    let mut out = [0.0; 3];
    for (k, v) in arr.iter().enumerate() {
        out[k] = v
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| schema(index, field, "non-numeric entry"))?;
    }
    Ok(out)
}

fn find_cloud(cloud_dir: &Path, scene_id: &str) -> Option<PathBuf> {
    ["ply", "xyz"]
        .iter()
        .map(|ext| cloud_dir.join(format!("{scene_id}.{ext}")))
        .find(|p| p.is_file())
}

/// Builds a manifest for `split`. Cloud paths are stored relative to `root`
/// when the cloud lies under it. Questions whose cloud is missing are skipped
/// and listed in the header.
pub fn ingest_scanqa(
    question_file: &Path,
    annotation_file: Option<&Path>,
    cloud_dir: &Path,
    root: &Path,
    split: &str,
) -> Result<DatasetManifest> {
    let questions = read_json_array(question_file)?;
    let mut boxes_by_scene: BTreeMap<String, Vec<(String, [f64; 3], [f64; 3])>> = BTreeMap::new();
    if let Some(path) = annotation_file {
        for (i, rec) in read_json_array(path)?.iter().enumerate() {
            let scene = string_field(rec, i, "scene_id")?;
            let objects = rec
                .get("objects")
                .and_then(Value::as_array)
                .ok_or_else(|| schema(i, "objects", "expected an array"))?;
            for obj in objects {
                let label = string_field(obj, i, "label")?;
                let center = vec3_field(obj, i, "center")?;
                let size = vec3_field(obj, i, "size")?;
                if size.iter().any(|s| *s <= 0.0) {
                    return Err(schema(i, "size", "extents must be positive"));
                }
                boxes_by_scene.entry(scene.clone()).or_default().push((label, center, size));
            }
        }
    }
    let labels: Vec<String> = boxes_by_scene
        .values()
        .flatten()
        .map(|(l, _, _)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut header = ManifestHeader {
        version: MANIFEST_VERSION,
        split: split.to_string(),
        source: "scanqa".into(),
        seed: None,
        config_hash: None,
        convention: VIEWER_CONVENTION.into(),
        reduced: vec![],
        skipped: vec![],
        warnings: vec![],
        labels: vec![],
    };
    if questions.is_empty() {
        header.warnings.push("question file contains zero samples".into());
    }

    let mut scenes: BTreeMap<String, SceneRecord> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in questions.iter().enumerate() {
        let qid = string_field(rec, i, "question_id")?;
        let scene_id = string_field(rec, i, "scene_id")?;
        let question = string_field(rec, i, "question")?;
        let answers = rec
            .get("answers")
            .and_then(Value::as_array)
            .ok_or_else(|| schema(i, "answers", "expected an array of strings"))?
            .iter()
            .map(|a| a.as_str().map(str::to_string).ok_or_else(|| schema(i, "answers", "non-string answer")))
            .collect::<Result<Vec<_>>>()?;
        if answers.is_empty() {
            return Err(schema(i, "answers", "at least one answer is required"));
        }
        if !seen.insert(qid.clone()) {
            return Err(schema(i, "question_id", format!("duplicate id {qid}")));
        }
        if !scenes.contains_key(&scene_id) {
            let Some(cloud) = find_cloud(cloud_dir, &scene_id) else {
                header.skipped.push(qid);
                continue;
            };
            let rel = cloud.strip_prefix(root).unwrap_or(&cloud).display().to_string();
            let boxes = boxes_by_scene
                .get(&scene_id)
                .into_iter()
                .flatten()
                .map(|(label, c, s)| {
                    let cat = labels.binary_search(label).expect("label collected") as u32;
                    AxisAlignedBox::new(*c, s.map(|v| v / 2.0), cat, 0)
                })
                .collect::<Result<Vec<_>>>()?;
            scenes.insert(
                scene_id.clone(),
                SceneRecord {
                    scene_id: scene_id.clone(),
                    cloud: rel,
                    boxes,
                    qa: vec![],
                },
            );
        }
        scenes.get_mut(&scene_id).expect("inserted above").qa.push(QaItem {
            id: qid,
            instruction: question,
            answers,
            task: TaskTag::Qa,
            template: String::new(),
        });
    }
    if !header.skipped.is_empty() {
        header
            .warnings
            .push(format!("{} questions skipped for missing point clouds", header.skipped.len()));
    }
    header.labels = labels;
    Ok(DatasetManifest {
        header,
        scenes: scenes.into_values().collect(),
    })
}
