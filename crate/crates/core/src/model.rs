//! The full pipeline: spatial encoder → compressor → prefix language model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compressor::{Compressed, Compressor, CompressorConfig};
use crate::encoder::{EncodedScene, EncoderConfig, SpatialEncoder, SpatialFeatures, SpatialVars};
use crate::error::{Error, Result};
use crate::lm::{Decoding, LmConfig, PrefixLm};
use crate::pointcloud::{farthest_point_sample, normalize, PointCloud};
use crate::tensor::{Graph, ParamStore, Precision, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub compressor: CompressorConfig,
    pub lm: LmConfig,
    /// Points kept per scene (farthest point sampling after normalization).
    pub sample_points: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn desk(vocab_size: usize) -> Self {
        let encoder = EncoderConfig {
            n_enc: 256,
            n_3d: 128,
            width: 64,
            ..EncoderConfig::default()
        };
        Self::assemble(encoder, 32, 64, vocab_size, 1024)
    }

    /// Very small model used by tests and quick runs.
    pub fn tiny(vocab_size: usize) -> Self {
        let encoder = EncoderConfig {
            n_enc: 16,
            n_3d: 8,
            width: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            radius: 0.3,
            max_neighbors: 8,
            use_colors: false,
        };
        let mut cfg = Self::assemble(encoder, 4, 8, vocab_size, 64);
        cfg.compressor.blocks = 1;
        cfg.lm.layers = 1;
        cfg.lm.heads = 2;
        cfg.compressor.heads = 2;
        cfg
    }

    fn assemble(encoder: EncoderConfig, n_q: usize, width: usize, vocab_size: usize, sample_points: usize) -> Self {
        let compressor = CompressorConfig {
            n_q,
            c_q: width,
            c_t: width,
            c: width,
            c_lm: width,
            visual_width: encoder.width,
            vocab_size,
            ..CompressorConfig::default()
        };
        let lm = LmConfig {
            vocab_size,
            width,
            n_visual: n_q,
            ..LmConfig::default()
        };
        Self {
            encoder,
            compressor,
            lm,
            sample_points,
            precision: Precision::F64,
        }
    }

    /// Changes the compressor query count and the matching LM prefix length.
    pub fn with_queries(mut self, n_q: usize) -> Self {
        self.compressor.n_q = n_q;
        self.lm.n_visual = n_q;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.compressor.validate()?;
        self.lm.validate()?;
        let mismatch = |what: &str, a: usize, b: usize| {
            Err(Error::config(format!("{what}: {a} != {b}")))
        };
        if self.compressor.visual_width != self.encoder.width {
            return mismatch("compressor visual width vs encoder width", self.compressor.visual_width, self.encoder.width);
        }
        if self.compressor.c_lm != self.lm.width {
            return mismatch("compressor output width vs language model width", self.compressor.c_lm, self.lm.width);
        }
        if self.compressor.n_q != self.lm.n_visual {
            return mismatch("compressor queries vs language model visual tokens", self.compressor.n_q, self.lm.n_visual);
        }
        if self.compressor.vocab_size != self.lm.vocab_size {
            return mismatch("compressor vs language model vocabulary", self.compressor.vocab_size, self.lm.vocab_size);
        }
        if self.compressor.n_q > self.encoder.n_3d {
            return Err(Error::config(format!(
                "{} compressor queries exceed {} decoder queries",
                self.compressor.n_q, self.encoder.n_3d
            )));
        }
        if self.sample_points < self.encoder.n_enc {
            return Err(Error::config(format!(
                "sample_points {} below encoder token count {}",
                self.sample_points, self.encoder.n_enc
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable config")))
    }
}

/// A scene ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScene {
    /// Normalized, down-sampled cloud.
    pub cloud: PointCloud,
    /// Index into the original cloud of every kept point.
    pub source_index: Vec<usize>,
    pub centroid: [f64; 3],
    pub scale: f64,
}

/// Normalizes the cloud and keeps `sample_points` points by farthest point
/// sampling from index 0. Smaller clouds are kept whole.
pub fn prepare_scene(pc: &PointCloud, sample_points: usize) -> Result<PreparedScene> {
    let n = normalize(pc);
    let k = sample_points.min(pc.len());
    let idx = farthest_point_sample(&n.cloud, k, 0)?;
    Ok(PreparedScene {
        cloud: n.cloud.select(&idx)?,
        source_index: idx,
        centroid: n.centroid,
        scale: n.scale,
    })
}

/// Encoder outputs fed to the compressor, either live graph nodes or cached
/// constants.
#[derive(Debug, Clone)]
pub struct Perception {
    pub f_enc: Var,
    pub q3d: Var,
    pub p_obj: Vec<f64>,
}

impl Perception {
    pub fn from_vars(g: &Graph, v: &SpatialVars) -> Self {
        Self {
            f_enc: v.f_enc,
            q3d: v.q3d,
            p_obj: g.value(v.p_obj).data().to_vec(),
        }
    }

    pub fn from_features(g: &mut Graph, f: &SpatialFeatures) -> Result<Self> {
        Ok(Self {
            f_enc: g.constant(f.f_enc.clone())?,
            q3d: g.constant(f.q3d.clone())?,
            p_obj: f.p_obj.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: SpatialEncoder,
    pub compressor: Compressor,
    pub lm: PrefixLm,
}

impl Model {
    /// Initializes every parameter from `seed`. Parameter names and order do
    /// not depend on the seed.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(cfg.precision);
        let encoder = SpatialEncoder::new(cfg.encoder.clone(), &mut store, &mut rng)?;
        let compressor = Compressor::new(cfg.compressor.clone(), &mut store, &mut rng)?;
        let lm = PrefixLm::new(cfg.lm.clone(), &mut store, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            encoder,
            compressor,
            lm,
        })
    }

    pub fn graph(&self) -> Graph {
        Graph::with_precision(self.cfg.precision)
    }

    pub fn perceive(&self, g: &mut Graph, scene: &PreparedScene) -> Result<(EncodedScene, SpatialVars)> {
        self.encoder.perceive(g, &self.store, &scene.cloud, 0)
    }

    /// Detached encoder outputs for one scene.
    pub fn spatial_features(&self, scene: &PreparedScene) -> Result<SpatialFeatures> {
        let mut g = self.graph();
        let (_, v) = self.perceive(&mut g, scene)?;
        Ok(v.detach(&g))
    }

    pub fn compress(&self, g: &mut Graph, p: &Perception, instruction: &[usize]) -> Result<Compressed> {
        self.compressor.compress(g, &self.store, p.f_enc, p.q3d, &p.p_obj, instruction)
    }

    /// Teacher-forced response loss for one sample.
    pub fn answer_loss(&self, g: &mut Graph, p: &Perception, instruction: &[usize], response: &[usize]) -> Result<Var> {
        let c = self.compress(g, p, instruction)?;
        self.lm.sequence_loss(g, &self.store, c.q_final, instruction, response)
    }

    /// Compressed visual tokens for generation.
    pub fn visual_tokens(&self, features: &SpatialFeatures, instruction: &[usize]) -> Result<Tensor> {
        let mut g = self.graph();
        let p = Perception::from_features(&mut g, features)?;
        let c = self.compress(&mut g, &p, instruction)?;
        Ok(g.value(c.q_final).clone())
    }

    pub fn generate(&self, features: &SpatialFeatures, instruction: &[usize], mode: Decoding) -> Result<Vec<usize>> {
        let visual = self.visual_tokens(features, instruction)?;
        self.lm
            .generate(&self.store, &visual, instruction, self.cfg.lm.max_response_len, mode)
    }

    /// Parameter names in registration order.
    pub fn param_names(&self) -> Vec<String> {
        self.store.iter().map(|(_, n, _)| n.to_string()).collect()
    }
}
