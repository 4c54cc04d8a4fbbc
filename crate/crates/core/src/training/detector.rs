use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, clip_grad_norm, cosine_lr, AdamConfig, AdamState};
use crate::datakit::derive_seed;
use crate::encoder::detection_loss;
use crate::error::{Error, Result};
use crate::model::{prepare_scene, Model, PreparedScene};
use crate::pointcloud::{AxisAlignedBox, PointCloud};

/// A prepared scene with boxes in the same normalized frame.
#[derive(Debug, Clone)]
pub struct DetectionScene {
    pub scene: PreparedScene,
    pub boxes: Vec<AxisAlignedBox>,
}

impl DetectionScene {
    pub fn new(cloud: &PointCloud, boxes: &[AxisAlignedBox], sample_points: usize) -> Result<Self> {
        let scene = prepare_scene(cloud, sample_points)?;
        let boxes = boxes.iter().map(|b| b.normalized(scene.centroid, scene.scale)).collect();
        Ok(Self { scene, boxes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for DetectorPlan {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 4,
            lr_max: 3e-3,
            lr_min: 1e-4,
            seed: 0,
            grad_clip: Some(1.0),
            adam: AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub epoch: usize,
    pub loss: f64,
    pub matched_center_error: f64,
}

/// Trains the encoder parameters on the set-prediction loss. Returns one
/// record per epoch with means over scenes.
pub fn pretrain_detector(
    model: &mut Model,
    plan: &DetectorPlan,
    scenes: &[DetectionScene],
    log_path: Option<&Path>,
) -> Result<Vec<DetectionRecord>> {
    if scenes.is_empty() || plan.epochs == 0 || plan.batch_size == 0 {
        return Err(Error::arg("detection pre-training needs scenes, epochs and a batch size"));
    }
    if plan.lr_min > plan.lr_max {
        return Err(Error::config("lr_min exceeds lr_max"));
    }
    model.store.set_trainable("encoder.", true);
    let spe = scenes.len().div_ceil(plan.batch_size);
    let total = plan.epochs * spe;
    let mut state = AdamState::new(model.store.len());
    let mut step = 0;
    let mut records = Vec::with_capacity(plan.epochs);
    let start = Instant::now();
    for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, epoch as u64)));
        let (mut loss_sum, mut err_sum, mut err_n) = (0.0, 0.0, 0usize);
        for batch in order.chunks(plan.batch_size) {
            let mut g = model.graph();
            let mut total_loss = None;
            for &i in batch {
                let (_, vars) = model.perceive(&mut g, &scenes[i].scene)?;
                let d = detection_loss(&mut g, &vars, &scenes[i].boxes)?;
                loss_sum += g.value(d.loss).item();
                if !scenes[i].boxes.is_empty() {
                    err_sum += d.matched_center_error;
                    err_n += 1;
                }
                total_loss = Some(match total_loss {
                    None => d.loss,
                    Some(t) => g.add(t, d.loss)?,
                });
            }
            let loss = g.scale(total_loss.expect("nonempty batch"), 1.0 / batch.len() as f64)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::Diverged { step, last_good: None });
            }
            g.backward(loss)?;
            let mut grads = g.param_grads(&model.store);
            if let Some(c) = plan.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            let lr = cosine_lr(step, total, plan.lr_max, plan.lr_min);
            adamw_step(&mut model.store, &grads, &mut state, lr, &plan.adam)?;
            step += 1;
        }
        let rec = DetectionRecord {
            epoch,
            loss: loss_sum / scenes.len() as f64,
            matched_center_error: if err_n == 0 { 0.0 } else { err_sum / err_n as f64 },
        };
        if let Some(p) = log_path {
            let mut line = serde_json::to_value(&rec)?;
            line["wall_ms"] = (start.elapsed().as_millis() as u64).into();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            use std::io::Write;
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        records.push(rec);
    }
    Ok(records)
}

/// Counts ground-truth boxes whose Hungarian-matched query center lies inside
/// the box. Returns `(hits, objects)`.
pub fn detection_hits(model: &Model, scenes: &[DetectionScene]) -> Result<(usize, usize)> {
    let (mut hits, mut objects) = (0, 0);
    for s in scenes {
        if s.boxes.is_empty() {
            continue;
        }
        let mut g = model.graph();
        let (_, vars) = model.perceive(&mut g, &s.scene)?;
        let d = detection_loss(&mut g, &vars, &s.boxes)?;
        let centers = g.value(vars.centers);
        for (j, b) in s.boxes.iter().enumerate() {
            let c = centers.row(d.assignment[j]);
            objects += 1;
            if b.contains([c[0], c[1], c[2]]) {
                hits += 1;
            }
        }
    }
    Ok((hits, objects))
}
