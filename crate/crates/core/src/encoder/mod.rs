//! Simplified set-prediction detector that turns a point cloud into scene
//! tokens (`F_enc`), decoded object queries (`Q_3D`), objectness and boxes.
//!
//! The encoder runs one set-abstraction stage (farthest point sampling, radius
//! grouping, a shared two-layer perceptron over neighbor offsets and a max
//! pool) followed by pre-norm self-attention blocks with fixed sinusoidal
//! coordinate encodings. The decoder refines learned query embeddings with
//! self-attention, cross-attention to the scene tokens and a feed-forward
//! layer, then reads out objectness and an axis-aligned box per query.

mod detection;
mod hungarian;

pub use detection::{detection_loss, matching_cost, DetectionLoss, OBJECTNESS_COST_WEIGHT};
pub use hungarian::{assignment_cost, hungarian_match};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::pointcloud::{farthest_point_sample, squared_distance, Point3, PointCloud};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Largest distance a predicted center may move away from its attention-weighted reference point.
pub const CENTER_OFFSET_BOUND: f64 = 0.25;
const INITIAL_HALF_EXTENT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Scene tokens produced by the encoder.
    pub n_enc: usize,
    /// Object queries produced by the decoder.
    pub n_3d: usize,
    pub width: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Grouping radius in normalized coordinates.
    pub radius: f64,
    pub max_neighbors: usize,
    /// Append point RGB to the grouped features.
    pub use_colors: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_enc: 1024,
            n_3d: 256,
            width: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            radius: 0.2,
            max_neighbors: 16,
            use_colors: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_enc == 0 || self.n_3d == 0 {
            return Err(Error::config("encoder token and query counts must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "encoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(self.radius > 0.0) || self.max_neighbors == 0 {
            return Err(Error::config("grouping radius and neighbor cap must be positive"));
        }
        Ok(())
    }

    fn point_features(&self) -> usize {
        if self.use_colors {
            6
        } else {
            3
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ffn: FeedForward,
}

/// Output of [`SpatialEncoder::encode`].
#[derive(Debug, Clone)]
pub struct EncodedScene {
    pub f_enc: Var,
    /// Indices (into the input cloud) of the sampled seed points, in FPS order.
    pub seeds: Vec<usize>,
    pub seed_xyz: Vec<Point3>,
    /// Grouped point indices per seed; the seed itself comes first.
    pub neighborhoods: Vec<Vec<usize>>,
}

/// Graph handles for the decoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct SpatialVars {
    pub f_enc: Var,
    pub q3d: Var,
    /// `n_3d × 1` objectness logits.
    pub obj_logits: Var,
    pub p_obj: Var,
    pub centers: Var,
    pub half_extents: Var,
}

/// Detached copy of the encoder/decoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeatures {
    pub f_enc: Tensor,
    pub q3d: Tensor,
    pub p_obj: Vec<f64>,
    pub pred_boxes: Vec<(Point3, Point3)>,
}

impl SpatialVars {
    pub fn detach(&self, g: &Graph) -> SpatialFeatures {
        let c = g.value(self.centers);
        let h = g.value(self.half_extents);
        let pred_boxes = (0..c.rows())
            .map(|i| {
                let (cr, hr) = (c.row(i), h.row(i));
                ([cr[0], cr[1], cr[2]], [hr[0], hr[1], hr[2]])
            })
            .collect();
        SpatialFeatures {
            f_enc: g.value(self.f_enc).clone(),
            q3d: g.value(self.q3d).clone(),
            p_obj: g.value(self.p_obj).data().to_vec(),
            pred_boxes,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpatialEncoder {
    pub cfg: EncoderConfig,
    mlp1: Linear,
    mlp2: Linear,
    blocks: Vec<EncoderBlock>,
    enc_norm: LayerNorm,
    queries: ParamId,
    dec_blocks: Vec<DecoderBlock>,
    dec_norm: LayerNorm,
    obj_head: Linear,
    center_head: Linear,
    size_head: Linear,
}

impl SpatialEncoder {
    /// Registers parameters under `encoder.`.
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let mlp1 = Linear::new(store, "encoder.group.fc1", cfg.point_features(), c, true, rng)?;
        let mlp2 = Linear::new(store, "encoder.group.fc2", c, c, true, rng)?;
        let blocks = (0..cfg.enc_layers)
            .map(|i| EncoderBlock::new(store, &format!("encoder.block{i}"), c, cfg.heads, rng))
            .collect::<Result<_>>()?;
        let enc_norm = LayerNorm::new(store, "encoder.norm", c)?;
        let queries = store.insert_normal("encoder.queries", &[cfg.n_3d, c], 1.0, rng)?;
        let dec_blocks = (0..cfg.dec_layers)
            .map(|i| {
                let n = format!("decoder.block{i}");
                Ok(DecoderBlock {
                    norm1: LayerNorm::new(store, &format!("encoder.{n}.norm1"), c)?,
                    self_attn: MultiHeadAttention::new(store, &format!("encoder.{n}.self_attn"), c, cfg.heads, rng)?,
                    norm2: LayerNorm::new(store, &format!("encoder.{n}.norm2"), c)?,
                    cross_attn: MultiHeadAttention::new(store, &format!("encoder.{n}.cross_attn"), c, cfg.heads, rng)?,
                    norm3: LayerNorm::new(store, &format!("encoder.{n}.norm3"), c)?,
                    ffn: FeedForward::new(store, &format!("encoder.{n}.ffn"), c, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let dec_norm = LayerNorm::new(store, "encoder.decoder.norm", c)?;
        let obj_head = Linear::new(store, "encoder.head.objectness", c, 1, true, rng)?;
        let center_head = Linear::new(store, "encoder.head.center", c, 3, true, rng)?;
        let size_head = Linear::new(store, "encoder.head.size", c, 3, true, rng)?;
        if let Some(b) = size_head.bias {
            store.set(b, &[INITIAL_HALF_EXTENT.ln(); 3])?;
        }
        Ok(Self {
            cfg,
            mlp1,
            mlp2,
            blocks,
            enc_norm,
            queries,
            dec_blocks,
            dec_norm,
            obj_head,
            center_head,
            size_head,
        })
    }

    pub fn objectness_head(&self) -> &Linear {
        &self.obj_head
    }

    /// Radius grouping around each seed: the seed first, then the nearest
    /// points within the radius (ties by index), capped at `max_neighbors`.
    pub fn group(&self, pc: &PointCloud, seeds: &[usize]) -> Vec<Vec<usize>> {
        let pts = pc.points();
        let r2 = self.cfg.radius * self.cfg.radius;
        seeds
            .iter()
            .map(|&s| {
                let mut near: Vec<(f64, usize)> = pts
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != s)
                    .map(|(i, p)| (squared_distance(*p, pts[s]), i))
                    .filter(|(d, _)| *d <= r2)
                    .collect();
                near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                std::iter::once(s)
                    .chain(near.into_iter().map(|x| x.1))
                    .take(self.cfg.max_neighbors)
                    .collect()
            })
            .collect()
    }

    /// Encodes a normalized cloud into `n_enc × width` scene tokens.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, pc: &PointCloud, fps_start: usize) -> Result<EncodedScene> {
        let n_enc = self.cfg.n_enc;
        if pc.len() < n_enc {
            return Err(Error::arg(format!(
                "cloud has {} points but the encoder needs at least {n_enc}; resample the scene",
                pc.len()
            )));
        }
        let seeds = farthest_point_sample(pc, n_enc, fps_start)?;
        let neighborhoods = self.group(pc, &seeds);
        let pts = pc.points();
        let seed_xyz: Vec<Point3> = seeds.iter().map(|&s| pts[s]).collect();

        let width = self.cfg.point_features();
        let mut rows = Vec::new();
        let mut segments = Vec::with_capacity(n_enc);
        for (hood, &s) in neighborhoods.iter().zip(&seeds) {
            segments.push((rows.len() / width, hood.len()));
            for &i in hood {
                for k in 0..3 {
                    rows.push((pts[i][k] - pts[s][k]) / self.cfg.radius);
                }
                if self.cfg.use_colors {
                    let rgb = pc.colors().map_or([0.5; 3], |c| c[i]);
                    rows.extend(rgb.iter().map(|v| v - 0.5));
                }
            }
        }
        let n_rows = rows.len() / width;
        let x = g.constant(Tensor::new(vec![n_rows, width], rows)?)?;
        let h = self.mlp1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        let h = self.mlp2.forward(g, store, h)?;
        let pooled = g.segment_max(h, &segments)?;
        let pos = g.constant(sinusoidal_encoding(&seed_xyz, self.cfg.width))?;
        let mut x = g.add(pooled, pos)?;
        for b in &self.blocks {
            x = b.forward(g, store, x, None)?;
        }
        let f_enc = self.enc_norm.forward(g, store, x)?;
        Ok(EncodedScene {
            f_enc,
            seeds,
            seed_xyz,
            neighborhoods,
        })
    }

    /// Decodes object queries against the scene tokens.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, f_enc: Var, seed_xyz: &[Point3]) -> Result<SpatialVars> {
        if g.shape(f_enc)[0] != seed_xyz.len() {
            return Err(Error::Shape {
                op: "decode",
                lhs: g.shape(f_enc).to_vec(),
                rhs: vec![seed_xyz.len(), 3],
            });
        }
        let mut q = g.param(store, self.queries)?;
        let mut last_probs = Vec::new();
        for b in &self.dec_blocks {
            let h = b.norm1.forward(g, store, q)?;
            let a = b.self_attn.forward(g, store, h, h, None)?;
            q = g.add(q, a.out)?;
            let h = b.norm2.forward(g, store, q)?;
            let a = b.cross_attn.forward(g, store, h, f_enc, None)?;
            q = g.add(q, a.out)?;
            last_probs = a.probs;
            let h = b.norm3.forward(g, store, q)?;
            let f = b.ffn.forward(g, store, h)?;
            q = g.add(q, f)?;
        }
        let q3d = self.dec_norm.forward(g, store, q)?;
        let obj_logits = self.obj_head.forward(g, store, q3d)?;
        let p_obj = g.sigmoid(obj_logits)?;

        let xyz = g.constant(Tensor::new(
            vec![seed_xyz.len(), 3],
            seed_xyz.iter().flat_map(|p| p.iter().copied()).collect(),
        )?)?;
        let reference = if last_probs.is_empty() {
            // No cross-attention layers: anchor every query at the seed centroid.
            let n = seed_xyz.len();
            let uniform = g.constant(Tensor::full(&[self.cfg.n_3d, n], 1.0 / n as f64))?;
            g.matmul(uniform, xyz)?
        } else {
            let mut acc = last_probs[0];
            for p in &last_probs[1..] {
                acc = g.add(acc, *p)?;
            }
            let mean = g.scale(acc, 1.0 / last_probs.len() as f64)?;
            g.matmul(mean, xyz)?
        };
        let offset = self.center_head.forward(g, store, q3d)?;
        let offset = g.tanh(offset)?;
        let offset = g.scale(offset, CENTER_OFFSET_BOUND)?;
        let centers = g.add(reference, offset)?;
        let log_size = self.size_head.forward(g, store, q3d)?;
        let half_extents = g.exp(log_size)?;
        Ok(SpatialVars {
            f_enc,
            q3d,
            obj_logits,
            p_obj,
            centers,
            half_extents,
        })
    }

    /// `encode` followed by `decode`.
    pub fn perceive(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pc: &PointCloud,
        fps_start: usize,
    ) -> Result<(EncodedScene, SpatialVars)> {
        let enc = self.encode(g, store, pc, fps_start)?;
        let vars = self.decode(g, store, enc.f_enc, &enc.seed_xyz)?;
        Ok((enc, vars))
    }
}

/// Fixed sinusoidal encoding of 3D coordinates. Dimension `d` encodes axis
/// `d % 3`; consecutive slots for an axis alternate sin/cos over frequencies
/// spaced geometrically from π to 64π.
pub fn sinusoidal_encoding(xyz: &[Point3], width: usize) -> Tensor {
    let slots = width.div_ceil(3);
    let pairs = slots.div_ceil(2).max(1);
    let freq = |pair: usize| {
        let t = if pairs > 1 { pair as f64 / (pairs - 1) as f64 } else { 0.0 };
        std::f64::consts::PI * 2f64.powf(6.0 * t)
    };
    let mut data = Vec::with_capacity(xyz.len() * width);
    for p in xyz {
        for d in 0..width {
            let slot = d / 3;
            let arg = freq(slot / 2) * p[d % 3];
            data.push(if slot % 2 == 0 { arg.sin() } else { arg.cos() });
        }
    }
    Tensor::new(vec![xyz.len(), width], data).expect("consistent encoding shape")
}
