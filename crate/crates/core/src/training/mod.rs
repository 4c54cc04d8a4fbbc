//! Optimization: AdamW, cosine schedule, the two training phases and
//! detection pre-training of the spatial encoder.

mod checkpoint;
mod detector;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use detector::{detection_hits, pretrain_detector, DetectionRecord, DetectorPlan, DetectionScene};
pub use optim::{adamw_step, clip_grad_norm, cosine_lr, AdamConfig, AdamState};

use crate::datakit::{derive_seed, LoadedSplit, QaItem, TaskTag};
use crate::encoder::SpatialFeatures;
use crate::error::{Error, Result};
use crate::model::{prepare_scene, Model, ModelConfig, Perception, PreparedScene};
use crate::tensor::Var;
use crate::text::{Vocabulary, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Mixed tasks: QA, captions and dialogue.
    Pretrain,
    /// QA only.
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }

    pub fn includes(self, task: TaskTag) -> bool {
        match self {
            Phase::Pretrain => true,
            Phase::Finetune => task == TaskTag::Qa,
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            _ => Err(Error::arg(format!("unknown phase '{s}' (expected pretrain or finetune)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub compressor_trainable: bool,
    pub query_fusion: bool,
    pub lm_frozen: bool,
    pub encoder_frozen: bool,
    /// Global gradient norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
    /// Stops early after this many optimizer steps; the schedule still spans
    /// the full plan unless `schedule_steps` is set.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Overrides the schedule length.
    #[serde(default)]
    pub schedule_steps: Option<usize>,
}

impl TrainPlan {
    pub fn pretrain(seed: u64) -> Self {
        Self {
            phase: Phase::Pretrain,
            epochs: 20,
            batch_size: 8,
            lr_max: 1e-4,
            lr_min: 1e-5,
            seed,
            compressor_trainable: true,
            query_fusion: true,
            lm_frozen: false,
            encoder_frozen: false,
            grad_clip: Some(1.0),
            adam: AdamConfig::default(),
            max_steps: None,
            schedule_steps: None,
        }
    }

    pub fn finetune(seed: u64) -> Self {
        Self {
            phase: Phase::Finetune,
            epochs: 100,
            lr_min: 1e-6,
            ..Self::pretrain(seed)
        }
    }

    pub fn for_phase(phase: Phase, seed: u64) -> Self {
        match phase {
            Phase::Pretrain => Self::pretrain(seed),
            Phase::Finetune => Self::finetune(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr_min.is_finite() && self.lr_max.is_finite()) || self.lr_min < 0.0 || self.lr_min > self.lr_max {
            return Err(Error::config(format!(
                "learning rates must satisfy 0 <= lr_min ({}) <= lr_max ({})",
                self.lr_min, self.lr_max
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable plan")))
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(samples);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    fn schedule_len(&self, samples: usize) -> usize {
        self.schedule_steps.unwrap_or(self.epochs * self.steps_per_epoch(samples))
    }

    /// Sets trainable flags and the fusion switch on `model`.
    pub fn apply(&self, model: &mut Model) {
        model.store.set_trainable("encoder.", !self.encoder_frozen);
        model.store.set_trainable("compressor.", self.compressor_trainable);
        model.store.set_trainable("lm.", !self.lm_frozen);
        model.cfg.compressor.query_fusion = self.query_fusion;
        model.cfg.compressor.trainable = self.compressor_trainable;
        model.compressor.cfg.query_fusion = self.query_fusion;
        model.compressor.cfg.trainable = self.compressor_trainable;
    }
}

/// One tokenized instruction/response pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: usize,
    pub id: String,
    pub task: TaskTag,
    pub instruction: Vec<usize>,
    /// Response ids ending in EOS.
    pub response: Vec<usize>,
}

/// Prepared scenes plus tokenized samples.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub scenes: Vec<PreparedScene>,
    pub samples: Vec<Sample>,
}

/// Instruction ids cut to the model's limit.
pub fn encode_instruction(vocab: &Vocabulary, cfg: &ModelConfig, text: &str) -> Vec<usize> {
    let mut ids = vocab.encode(text);
    ids.truncate(cfg.lm.max_instruction_len);
    ids
}

/// Response ids cut to the model's limit; the last id is always EOS.
pub fn encode_target(vocab: &Vocabulary, cfg: &ModelConfig, text: &str) -> Vec<usize> {
    let mut ids = vocab.encode_response(text);
    if ids.len() > cfg.lm.max_response_len {
        ids.truncate(cfg.lm.max_response_len - 1);
        ids.push(EOS);
    }
    ids
}

impl TrainData {
    /// Tokenizes the items of `split` accepted by `keep`; each item trains on
    /// its first answer.
    pub fn build(split: &LoadedSplit, vocab: &Vocabulary, cfg: &ModelConfig, keep: impl Fn(&QaItem) -> bool) -> Result<Self> {
        let scenes = split
            .clouds
            .iter()
            .map(|c| prepare_scene(c, cfg.sample_points))
            .collect::<Result<Vec<_>>>()?;
        let samples = split
            .items()
            .into_iter()
            .filter(|(_, q)| keep(q))
            .map(|(scene, q)| Sample {
                scene,
                id: q.id.clone(),
                task: q.task,
                instruction: encode_instruction(vocab, cfg, &q.instruction),
                response: encode_target(vocab, cfg, q.answers.first().map_or("", String::as_str)),
            })
            .collect();
        Ok(Self { scenes, samples })
    }

    pub fn for_phase(split: &LoadedSplit, vocab: &Vocabulary, cfg: &ModelConfig, phase: Phase) -> Result<Self> {
        Self::build(split, vocab, cfg, |q| phase.includes(q.task))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// `last.ckpt` is rewritten here after every epoch and at the end.
    pub checkpoint_dir: Option<PathBuf>,
    /// Line-delimited log records are appended here.
    pub log_path: Option<PathBuf>,
    /// Continue from this checkpoint's step and optimizer state.
    pub resume: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub steps: usize,
    pub optimizer: AdamState,
    pub warnings: Vec<String>,
    pub last_checkpoint: Option<PathBuf>,
}

impl TrainOutcome {
    /// Mean loss over the last `n` logged steps.
    pub fn recent_loss(&self, n: usize) -> f64 {
        let tail = &self.log[self.log.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

fn diverged(step: usize, last_good: &Option<PathBuf>) -> Error {
    Error::Diverged {
        step,
        last_good: last_good.clone(),
    }
}

/// Mean teacher-forced loss over a batch; each scene is encoded once.
fn batch_loss(
    model: &Model,
    g: &mut crate::tensor::Graph,
    data: &TrainData,
    batch: &[usize],
    cached: Option<&[SpatialFeatures]>,
) -> Result<Var> {
    let mut perceptions: BTreeMap<usize, Perception> = BTreeMap::new();
    let mut losses = Vec::with_capacity(batch.len());
    for &i in batch {
        let s = &data.samples[i];
        if !perceptions.contains_key(&s.scene) {
            let p = match cached {
                Some(f) => Perception::from_features(g, &f[s.scene])?,
                None => {
                    let (_, vars) = model.perceive(g, &data.scenes[s.scene])?;
                    Perception::from_vars(g, &vars)
                }
            };
            perceptions.insert(s.scene, p);
        }
        losses.push(model.answer_loss(g, &perceptions[&s.scene], &s.instruction, &s.response)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    g.scale(total, 1.0 / losses.len() as f64)
}

/// Mean teacher-forced loss over every sample, one graph per scene.
pub fn evaluate_loss(model: &Model, data: &TrainData) -> Result<f64> {
    if data.samples.is_empty() {
        return Err(Error::arg("no samples to evaluate"));
    }
    let mut by_scene: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.samples.iter().enumerate() {
        by_scene.entry(s.scene).or_default().push(i);
    }
    let mut total = 0.0;
    for idx in by_scene.values() {
        let mut g = model.graph();
        let loss = batch_loss(model, &mut g, data, idx, None)?;
        total += g.value(loss).item() * idx.len() as f64;
    }
    Ok(total / data.samples.len() as f64)
}

fn append_log(path: &Path, rec: &LogRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path, e))
}

/// Runs `plan` over `data`, updating `model` in place.
pub fn train(model: &mut Model, plan: &TrainPlan, data: &TrainData, opts: &TrainOptions) -> Result<TrainOutcome> {
    plan.validate()?;
    if data.samples.is_empty() {
        return Err(Error::arg("training set has no samples for this phase"));
    }
    plan.apply(model);
    let n = data.samples.len();
    let spe = plan.steps_per_epoch(n);
    let total = plan.total_steps(n);
    let schedule = plan.schedule_len(n);
    let plan_hash = plan.hash();

    let mut warnings = Vec::new();
    let (mut state, mut step) = match &opts.resume {
        Some(ck) => {
            if ck.meta.plan_hash.as_deref() != Some(plan_hash.as_str()) {
                warnings.push(format!(
                    "resuming with a different plan (checkpoint {}, current {})",
                    ck.meta.plan_hash.as_deref().unwrap_or("none"),
                    plan_hash
                ));
            }
            ck.load_into(&mut model.store)?;
            let st = ck.optimizer_state(&model.store);
            let step = st.step as usize;
            (st, step)
        }
        None => (AdamState::new(model.store.len()), 0),
    };

    let cached: Option<Vec<SpatialFeatures>> = if plan.encoder_frozen {
        Some(data.scenes.iter().map(|s| model.spatial_features(s)).collect::<Result<_>>()?)
    } else {
        None
    };

    let ckpt_path = opts.checkpoint_dir.as_ref().map(|d| d.join("last.ckpt"));
    let mut last_good: Option<PathBuf> = None;
    let save = |model: &Model, state: &AdamState, step: usize| -> Result<()> {
        if let Some(p) = &ckpt_path {
            let meta = CheckpointMeta {
                model: model.cfg.clone(),
                plan_hash: Some(plan_hash.clone()),
                phase: Some(plan.phase),
                step: step as u64,
                epoch: step / spe,
            };
            save_checkpoint(p, model, Some(state), &meta)?;
        }
        Ok(())
    };

    let start = Instant::now();
    let mut log = Vec::new();
    while step < total {
        let epoch = step / spe;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, epoch as u64)));
        for batch in order.chunks(plan.batch_size).skip(step % spe) {
            if step >= total {
                break;
            }
            let lr = cosine_lr(step, schedule, plan.lr_max, plan.lr_min);
            let mut g = model.graph();
            let loss = match batch_loss(model, &mut g, data, batch, cached.as_deref()) {
                Ok(l) => l,
                Err(e) if e.is_numeric() => return Err(diverged(step, &last_good)),
                Err(e) => return Err(e),
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(diverged(step, &last_good));
            }
            if let Err(e) = g.backward(loss) {
                return Err(if e.is_numeric() { diverged(step, &last_good) } else { e });
            }
            let mut grads = g.param_grads(&model.store);
            if let Some(c) = plan.grad_clip {
                if !clip_grad_norm(&mut grads, c).is_finite() {
                    return Err(diverged(step, &last_good));
                }
            }
            adamw_step(&mut model.store, &grads, &mut state, lr, &plan.adam)?;
            step += 1;
            let rec = LogRecord {
                step,
                phase: plan.phase,
                lr,
                loss: value,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            if let Some(p) = &opts.log_path {
                append_log(p, &rec)?;
            }
            log.push(rec);
        }
        if step % spe == 0 || step >= total {
            save(model, &state, step)?;
            last_good.clone_from(&ckpt_path);
        }
    }
    Ok(TrainOutcome {
        log,
        steps: step,
        optimizer: state,
        warnings,
        last_checkpoint: last_good,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_defaults() {
        let p = TrainPlan::pretrain(0);
        assert_eq!((p.epochs, p.lr_max, p.lr_min), (20, 1e-4, 1e-5));
        let f = TrainPlan::finetune(0);
        assert_eq!((f.epochs, f.lr_max, f.lr_min), (100, 1e-4, 1e-6));
        assert_eq!(f.batch_size, 8);
        assert_eq!("finetune".parse::<Phase>().unwrap(), Phase::Finetune);
        assert!("warmup".parse::<Phase>().is_err());
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let mut p = TrainPlan::pretrain(0);
        p.lr_min = 1.0;
        assert!(p.validate().is_err());
        let mut p = TrainPlan::pretrain(0);
        p.epochs = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn step_counts() {
        let mut p = TrainPlan::pretrain(0);
        p.epochs = 3;
        assert_eq!(p.steps_per_epoch(17), 3);
        assert_eq!(p.total_steps(17), 9);
        p.max_steps = Some(4);
        assert_eq!(p.total_steps(17), 4);
        assert_eq!(p.schedule_len(17), 9);
    }

    #[test]
    fn target_truncation_keeps_eos() {
        let vocab = Vocabulary::build(["a b c d e f"]);
        let mut cfg = ModelConfig::tiny(vocab.len());
        cfg.lm.max_response_len = 3;
        let ids = encode_target(&vocab, &cfg, "a b c d e f");
        assert_eq!(ids.len(), 3);
        assert_eq!(*ids.last().unwrap(), EOS);
    }
}
