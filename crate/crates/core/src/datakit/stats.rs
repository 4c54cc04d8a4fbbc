use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::text::tokenize;

/// Token-length distribution of questions and answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub items: usize,
    /// Token count → number of questions.
    pub question_lengths: BTreeMap<usize, usize>,
    /// Token count → number of answers (first reference of each item).
    pub answer_lengths: BTreeMap<usize, usize>,
    pub questions_under_16: f64,
    pub answers_over_7: f64,
    pub tasks: BTreeMap<String, usize>,
}

pub fn token_stats(manifest: &DatasetManifest) -> TokenStats {
    let mut q = BTreeMap::new();
    let mut a = BTreeMap::new();
    let mut tasks = BTreeMap::new();
    let mut items = 0;
    for item in manifest.scenes.iter().flat_map(|s| &s.qa) {
        items += 1;
        *q.entry(tokenize(&item.instruction).len()).or_insert(0) += 1;
        let answer = item.answers.first().map_or(0, |s| tokenize(s).len());
        *a.entry(answer).or_insert(0) += 1;
        *tasks.entry(item.task.as_str().to_string()).or_insert(0) += 1;
    }
    let frac = |h: &BTreeMap<usize, usize>, f: &dyn Fn(usize) -> bool| {
        if items == 0 {
            0.0
        } else {
            h.iter().filter(|(k, _)| f(**k)).map(|(_, v)| *v).sum::<usize>() as f64 / items as f64
        }
    };
    TokenStats {
        items,
        questions_under_16: frac(&q, &|n| n < 16),
        answers_over_7: frac(&a, &|n| n > 7),
        question_lengths: q,
        answer_lengths: a,
        tasks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{ManifestHeader, QaItem, SceneRecord, TaskTag};

    fn manifest(items: &[(&str, &str)]) -> DatasetManifest {
        DatasetManifest {
            header: ManifestHeader {
                version: 1,
                split: "t".into(),
                source: "test".into(),
                seed: None,
                config_hash: None,
                convention: String::new(),
                reduced: vec![],
                skipped: vec![],
                warnings: vec![],
                labels: vec![],
            },
            scenes: vec![SceneRecord {
                scene_id: "s".into(),
                cloud: "s.ply".into(),
                boxes: vec![],
                qa: items
                    .iter()
                    .enumerate()
                    .map(|(i, (q, a))| QaItem {
                        id: i.to_string(),
                        instruction: q.to_string(),
                        answers: vec![a.to_string()],
                        task: TaskTag::Qa,
                        template: String::new(),
                    })
                    .collect(),
            }],
        }
    }

    #[test]
    fn fraction_of_short_questions() {
        let ten = vec!["w"; 10].join(" ");
        let twenty = vec!["w"; 20].join(" ");
        let s = token_stats(&manifest(&[(&ten, "a b c d e f g h"), (&twenty, "")]));
        assert_eq!(s.questions_under_16, 0.5);
        assert_eq!(s.answers_over_7, 0.5);
        assert_eq!(s.answer_lengths[&0], 1);
        assert_eq!(s.tasks["qa"], 2);
    }
}
