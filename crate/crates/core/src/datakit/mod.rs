//! Dataset supply: synthetic scenes with template question answering,
//! ScanQA-style ingestion, manifests and token statistics.

mod scanqa;
mod stats;
pub mod synth;

pub use scanqa::ingest_scanqa;
pub use stats::{token_stats, TokenStats};
pub use synth::{generate_dataset, generate_scene, CategorySpec, ColorSpec, SceneConfig, SplitPlan};

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{io::read_cloud, AxisAlignedBox, PointCloud};

pub const MANIFEST_VERSION: u32 = 1;
/// Environment variable that overrides the dataset root on the command line.
pub const DATASET_ENV: &str = "SCENEQA_DATASET";
pub const VIEWER_CONVENTION: &str = "camera at -y looking toward +y; left is -x, front is -y, up is +z";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Qa,
    DenseCaption,
    SceneCaption,
    Dialogue,
}

impl TaskTag {
    pub const ALL: [TaskTag; 4] = [TaskTag::Qa, TaskTag::DenseCaption, TaskTag::SceneCaption, TaskTag::Dialogue];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::Qa => "qa",
            TaskTag::DenseCaption => "dense_caption",
            TaskTag::SceneCaption => "scene_caption",
            TaskTag::Dialogue => "dialogue",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub instruction: String,
    /// One or more reference answers; training uses the first.
    pub answers: Vec<String>,
    pub task: TaskTag,
    /// Template that produced the item, empty for ingested data.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    /// Cloud path relative to the dataset root.
    pub cloud: String,
    pub boxes: Vec<AxisAlignedBox>,
    pub qa: Vec<QaItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub split: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub convention: String,
    /// Scenes that were generated with fewer objects than requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reduced: Vec<String>,
    /// Samples dropped during ingestion.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Category names indexed by `AxisAlignedBox::category`, for ingested data.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub scenes: Vec<SceneRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(ManifestHeader),
    Scene(SceneRecord),
}

impl DatasetManifest {
    pub fn num_items(&self) -> usize {
        self.scenes.iter().map(|s| s.qa.len()).sum()
    }

    /// Line-delimited JSON: a header record followed by one record per scene.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Line::Header(self.header.clone())).expect("serializable header");
        out.push('\n');
        for s in &self.scenes {
            out.push_str(&serde_json::to_string(&Line::Scene(s.clone())).expect("serializable scene"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.display().to_string(),
            message: format!("line {line}: {message}"),
        };
        let mut header = None;
        let mut scenes = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str::<Line>(line).map_err(|e| parse_err(i + 1, e.to_string()))? {
                Line::Header(h) if header.is_none() => header = Some(h),
                Line::Header(_) => return Err(parse_err(i + 1, "second header record".into())),
                Line::Scene(s) => scenes.push(s),
            }
        }
        let header = header.ok_or_else(|| parse_err(1, "missing header record".into()))?;
        if header.version != MANIFEST_VERSION {
            return Err(parse_err(1, format!("unsupported manifest version {}", header.version)));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &scenes {
            for q in &s.qa {
                if !seen.insert(q.id.as_str()) {
                    return Err(parse_err(0, format!("duplicate item id {}", q.id)));
                }
            }
        }
        Ok(Self { header, scenes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Every answer and instruction, for vocabulary construction.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.scenes
            .iter()
            .flat_map(|s| s.qa.iter())
            .flat_map(|q| std::iter::once(q.instruction.as_str()).chain(q.answers.iter().map(String::as_str)))
    }
}

pub fn manifest_path(root: &Path, split: &str) -> PathBuf {
    root.join(format!("{split}.jsonl"))
}

pub fn vocab_path(root: &Path) -> PathBuf {
    root.join("vocab.txt")
}

/// A split loaded into memory: manifest plus every referenced cloud.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub manifest: DatasetManifest,
    pub clouds: Vec<PointCloud>,
}

impl LoadedSplit {
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let manifest = DatasetManifest::load(&manifest_path(root, split))?;
        let clouds = manifest
            .scenes
            .iter()
            .map(|s| read_cloud(&root.join(&s.cloud)))
            .collect::<Result<_>>()?;
        Ok(Self { manifest, clouds })
    }

    /// An in-memory split built from generated scenes, nothing written to disk.
    pub fn from_generated(split: &str, scenes: Vec<synth::GeneratedScene>) -> Self {
        let header = ManifestHeader {
            version: MANIFEST_VERSION,
            split: split.to_string(),
            source: "synthetic".into(),
            seed: None,
            config_hash: None,
            convention: VIEWER_CONVENTION.into(),
            reduced: vec![],
            skipped: vec![],
            warnings: vec![],
            labels: vec![],
        };
        let (records, clouds) = scenes.into_iter().map(|s| (s.record, s.cloud)).unzip();
        Self {
            manifest: DatasetManifest { header, scenes: records },
            clouds,
        }
    }

    /// Flattened `(scene index, item)` pairs in manifest order.
    pub fn items(&self) -> Vec<(usize, &QaItem)> {
        self.manifest
            .scenes
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.qa.iter().map(move |q| (i, q)))
            .collect()
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of item `index` in a stream rooted at `seed`:
/// `splitmix64(seed + index · 0x9E3779B97F4A7C15)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}
