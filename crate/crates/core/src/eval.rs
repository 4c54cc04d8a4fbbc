//! Batch prediction over a split and metric reports with a per-task breakdown.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datakit::{LoadedSplit, QaItem, TaskTag};
use crate::error::{Error, Result};
use crate::lm::Decoding;
use crate::metrics::{EvalPair, MetricReport};
use crate::model::{prepare_scene, Model};
use crate::text::Vocabulary;
use crate::training::encode_instruction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub task: TaskTag,
    pub question: String,
    pub answer: String,
    pub references: Vec<String>,
}

/// Generates an answer for every item of `split` accepted by `keep`. Each
/// scene is encoded once.
pub fn predict(
    model: &Model,
    split: &LoadedSplit,
    vocab: &Vocabulary,
    mode: Decoding,
    keep: impl Fn(&QaItem) -> bool,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (scene, cloud) in split.manifest.scenes.iter().zip(&split.clouds) {
        let items: Vec<&QaItem> = scene.qa.iter().filter(|q| keep(q)).collect();
        if items.is_empty() {
            continue;
        }
        let features = model.spatial_features(&prepare_scene(cloud, model.cfg.sample_points)?)?;
        for q in items {
            let ids = model.generate(&features, &encode_instruction(vocab, &model.cfg, &q.instruction), mode)?;
            out.push(Prediction {
                id: q.id.clone(),
                task: q.task,
                question: q.instruction.clone(),
                answer: vocab.decode(&ids),
                references: q.answers.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: MetricReport,
    pub by_task: BTreeMap<String, MetricReport>,
}

fn pairs<'a>(preds: impl Iterator<Item = &'a Prediction>) -> Vec<EvalPair> {
    preds
        .map(|p| EvalPair::new(p.id.clone(), p.answer.clone(), p.references.clone()))
        .collect()
}

impl EvalReport {
    pub fn compute(preds: &[Prediction]) -> Self {
        let mut by_task = BTreeMap::new();
        for tag in TaskTag::ALL {
            let subset = pairs(preds.iter().filter(|p| p.task == tag));
            if !subset.is_empty() {
                by_task.insert(tag.as_str().to_string(), MetricReport::compute(&subset));
            }
        }
        Self {
            overall: MetricReport::compute(&pairs(preds.iter())),
            by_task,
        }
    }

    /// Header plus one row for the whole split and one per task.
    pub fn table(&self, label: &str) -> String {
        let mut lines = vec![MetricReport::header(), self.overall.row(label)];
        for (task, r) in &self.by_task {
            lines.push(r.row(&format!("  {task}")));
        }
        lines.join("\n")
    }

    /// Line-delimited records: one per scope, without per-sample scores.
    pub fn to_jsonl(&self, split: &str) -> Result<String> {
        let mut out = String::new();
        let scopes = std::iter::once(("all", &self.overall)).chain(self.by_task.iter().map(|(k, v)| (k.as_str(), v)));
        for (scope, r) in scopes {
            let mut r = r.clone();
            r.samples.clear();
            let mut v = serde_json::to_value(&r)?;
            v["split"] = split.into();
            v["scope"] = scope.into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for p in preds {
        writeln!(f, "{}", serde_json::to_string(p)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
