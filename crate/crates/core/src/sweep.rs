//! Compressor query-count sweep: train and evaluate one model per `N_q` and
//! measure decode throughput.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datakit::LoadedSplit;
use crate::encoder::SpatialFeatures;
use crate::error::{Error, Result};
use crate::eval::{predict, EvalReport};
use crate::lm::Decoding;
use crate::model::{prepare_scene, Model, ModelConfig};
use crate::text::Vocabulary;
use crate::training::{encode_instruction, train, Phase, TrainData, TrainOptions, TrainPlan};

/// Where the throughput numbers were measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub precision: String,
    pub version: String,
}

impl Environment {
    pub fn current(cfg: &ModelConfig) -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            precision: format!("{:?}", cfg.precision).to_lowercase(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_q: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub em_at_1: f64,
    pub train_loss: f64,
    /// Decode steps per measured pass.
    pub tokens: usize,
    /// Median seconds per pass.
    pub decode_secs: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub environment: Environment,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn table(&self) -> String {
        let mut lines = vec![format!(
            "{:>5} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9} {:>10}",
            "N_q", "BLEU-1", "BLEU-4", "ROUGE-L", "CIDEr", "EM@1", "loss", "tokens/s"
        )];
        for r in &self.rows {
            lines.push(format!(
                "{:>5} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>9.4} {:>10.1}",
                r.n_q, r.bleu1, r.bleu4, r.rouge_l, r.cider, r.em_at_1, r.train_loss, r.tokens_per_sec
            ));
        }
        lines.join("\n")
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            let mut v = serde_json::to_value(r)?;
            v["environment"] = serde_json::to_value(&self.environment)?;
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub n_qs: Vec<usize>,
    pub train: TrainPlan,
    pub decoding: Decoding,
    /// Timed passes per model; the median is reported.
    pub repeats: usize,
    pub init_seed: u64,
}

/// Rejects query counts the base configuration cannot host.
pub fn validate_sweep(base: &ModelConfig, n_qs: &[usize]) -> Result<()> {
    if n_qs.is_empty() {
        return Err(Error::arg("no query counts given"));
    }
    for &n in n_qs {
        if n == 0 {
            return Err(Error::arg("query count must be positive"));
        }
        base.clone().with_queries(n).validate()?;
    }
    Ok(())
}

/// Decode steps and median wall time of compress + greedy generation over
/// `items`. Encoder features are computed beforehand and not timed.
pub fn decode_throughput(model: &Model, items: &[(SpatialFeatures, Vec<usize>)], mode: Decoding, repeats: usize) -> Result<(usize, f64)> {
    let max_len = model.cfg.lm.max_response_len;
    let mut times = Vec::with_capacity(repeats.max(1));
    let mut tokens = 0;
    for _ in 0..repeats.max(1) {
        tokens = 0;
        let t = Instant::now();
        for (f, instr) in items {
            let ids = model.generate(f, instr, mode)?;
            tokens += (ids.len() + 1).min(max_len);
        }
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok((tokens, times[times.len() / 2]))
}

/// Trains a fresh model per query count on `train_split` and evaluates it on
/// `eval_split`. All query counts are validated before any training starts.
pub fn query_sweep(
    base: &ModelConfig,
    plan: &SweepPlan,
    train_split: &LoadedSplit,
    eval_split: &LoadedSplit,
    vocab: &Vocabulary,
) -> Result<SweepReport> {
    validate_sweep(base, &plan.n_qs)?;
    plan.train.validate()?;
    let phase = plan.train.phase;
    let mut rows = Vec::new();
    for &n_q in &plan.n_qs {
        let cfg = base.clone().with_queries(n_q);
        let mut model = Model::new(cfg.clone(), plan.init_seed)?;
        let data = TrainData::for_phase(train_split, vocab, &cfg, phase)?;
        let outcome = train(&mut model, &plan.train, &data, &TrainOptions::default())?;
        let preds = predict(&model, eval_split, vocab, plan.decoding, |q| phase.includes(q.task))?;
        let report = EvalReport::compute(&preds).overall;

        let mut items = Vec::new();
        for (scene, cloud) in eval_split.manifest.scenes.iter().zip(&eval_split.clouds) {
            let features = model.spatial_features(&prepare_scene(cloud, cfg.sample_points)?)?;
            for q in scene.qa.iter().filter(|q| phase == Phase::Pretrain || phase.includes(q.task)) {
                items.push((features.clone(), encode_instruction(vocab, &cfg, &q.instruction)));
            }
        }
        let (tokens, secs) = decode_throughput(&model, &items, plan.decoding, plan.repeats)?;
        rows.push(SweepRow {
            n_q,
            bleu1: report.bleu[0],
            bleu4: report.bleu[3],
            rouge_l: report.rouge_l,
            cider: report.cider,
            em_at_1: report.em_at_1,
            train_loss: outcome.recent_loss(plan.train.steps_per_epoch(data.samples.len())),
            tokens,
            decode_secs: secs,
            tokens_per_sec: if secs > 0.0 { tokens as f64 / secs } else { 0.0 },
        });
    }
    Ok(SweepReport {
        environment: Environment::current(base),
        rows,
    })
}
