//! Learnable-query compressor: condenses the scene tokens and object queries
//! into a fixed number of visual tokens for the language model, optionally
//! seeding the learnable queries with the most object-like decoder queries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{scaled_dot_attention, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelfAttentionForm {
    /// Pre-norm residual block with learned Q/K/V maps.
    #[default]
    MultiHead,
    /// `softmax(F Fᵀ/√C_t) F` with no learned maps and no residual.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub n_q: usize,
    pub blocks: usize,
    /// Width of the learnable queries.
    pub c_q: usize,
    /// Width of the text embeddings and of the self-attention stream.
    pub c_t: usize,
    /// Cross-attention width; must equal `c_t` because the block output is
    /// re-joined with the text rows.
    pub c: usize,
    pub c_lm: usize,
    /// Width of the encoder features being compressed.
    pub visual_width: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub trainable: bool,
    pub query_fusion: bool,
    #[serde(default)]
    pub self_attention: SelfAttentionForm,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            n_q: 32,
            blocks: 2,
            c_q: 64,
            c_t: 64,
            c: 64,
            c_lm: 64,
            visual_width: 64,
            heads: 4,
            vocab_size: 256,
            max_text_len: 32,
            trainable: true,
            query_fusion: true,
            self_attention: SelfAttentionForm::MultiHead,
        }
    }
}

impl CompressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_q == 0 || self.blocks == 0 {
            return Err(Error::config("compressor needs at least one query and one block"));
        }
        if self.c != self.c_t {
            return Err(Error::config(format!(
                "cross-attention width {} must equal text width {}",
                self.c, self.c_t
            )));
        }
        if self.heads == 0 || self.c_t % self.heads != 0 || self.c % self.heads != 0 {
            return Err(Error::config(format!(
                "compressor widths {}/{} not divisible by {} heads",
                self.c_t, self.c, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_text_len == 0 {
            return Err(Error::config("compressor vocabulary and text length must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Compressed {
    /// `n_q × c_lm` tokens handed to the language model.
    pub q_final: Var,
    /// `n_q × c` block-stack output before the output projection.
    pub f_final: Var,
    /// Last block's cross-attention probabilities, one `n_q × (n_enc + n_3d)` matrix per head.
    pub cross_probs: Vec<Var>,
    /// Decoder queries used by fusion, in descending objectness order.
    pub fused: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Compressor {
    pub cfg: CompressorConfig,
    q_l: ParamId,
    fusion: Linear,
    query_proj: Linear,
    text_embed: ParamId,
    text_pos: ParamId,
    kv_enc: Linear,
    kv_q3d: Linear,
    blocks: Vec<Block>,
    out_proj: Linear,
}

/// Indices of the `k` largest probabilities, largest first, ties to the lower index.
pub fn top_k_objectness(p_obj: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > p_obj.len() {
        return Err(Error::config(format!(
            "{k} compressor queries exceed {} decoder queries",
            p_obj.len()
        )));
    }
    let mut idx: Vec<usize> = (0..p_obj.len()).collect();
    idx.sort_by(|&a, &b| p_obj[b].total_cmp(&p_obj[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

impl Compressor {
    /// Registers parameters under `compressor.`.
    pub fn new(cfg: CompressorConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let q_l = store.insert_normal("compressor.q_l", &[cfg.n_q, cfg.c_q], 1.0, rng)?;
        let fusion = Linear::new(store, "compressor.fusion.proj", cfg.visual_width, cfg.c_q, true, rng)?;
        let query_proj = Linear::new(store, "compressor.query_proj", cfg.c_q, cfg.c_t, true, rng)?;
        let text_embed = store.insert_normal("compressor.text_embed", &[cfg.vocab_size, cfg.c_t], 1.0, rng)?;
        let text_pos = store.insert_normal("compressor.text_pos", &[cfg.max_text_len, cfg.c_t], 0.1, rng)?;
        let kv_enc = Linear::new(store, "compressor.kv_enc", cfg.visual_width, cfg.c, true, rng)?;
        let kv_q3d = Linear::new(store, "compressor.kv_q3d", cfg.visual_width, cfg.c, true, rng)?;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let n = format!("compressor.block{i}");
                Ok(Block {
                    self_norm: LayerNorm::new(store, &format!("{n}.self_norm"), cfg.c_t)?,
                    self_attn: MultiHeadAttention::new(store, &format!("{n}.self_attn"), cfg.c_t, cfg.heads, rng)?,
                    cross_norm: LayerNorm::new(store, &format!("{n}.cross_norm"), cfg.c)?,
                    cross_attn: MultiHeadAttention::new(store, &format!("{n}.cross_attn"), cfg.c, cfg.heads, rng)?,
                    ffn_norm: LayerNorm::new(store, &format!("{n}.ffn_norm"), cfg.c)?,
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), cfg.c, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let out_proj = Linear::new(store, "compressor.out_proj", cfg.c, cfg.c_lm, true, rng)?;
        Ok(Self {
            cfg,
            q_l,
            fusion,
            query_proj,
            text_embed,
            text_pos,
            kv_enc,
            kv_q3d,
            blocks,
            out_proj,
        })
    }

    pub fn fusion_projection(&self) -> &Linear {
        &self.fusion
    }

    /// `Q_l + Linear(Q_3D[top-k by objectness])`.
    pub fn query_fusion(&self, g: &mut Graph, store: &ParamStore, q3d: Var, p_obj: &[f64]) -> Result<(Var, Vec<usize>)> {
        if g.shape(q3d)[0] != p_obj.len() {
            return Err(Error::arg(format!(
                "{} objectness scores for {} decoder queries",
                p_obj.len(),
                g.shape(q3d)[0]
            )));
        }
        let idx = top_k_objectness(p_obj, self.cfg.n_q)?;
        let q_l = g.param(store, self.q_l)?;
        let picked = g.gather_rows(q3d, &idx)?;
        let proj = self.fusion.forward(g, store, picked)?;
        Ok((g.add(q_l, proj)?, idx))
    }

    /// Instruction embeddings `F_T` (`n_t × c_t`), or `None` for an empty instruction.
    pub fn embed_text(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Option<Var>> {
        if ids.is_empty() {
            return Ok(None);
        }
        if ids.len() > self.cfg.max_text_len {
            return Err(Error::arg(format!(
                "instruction of {} tokens exceeds the compressor limit of {}",
                ids.len(),
                self.cfg.max_text_len
            )));
        }
        let table = g.param(store, self.text_embed)?;
        let tok = g.embedding(table, ids)?;
        let pos_table = g.param(store, self.text_pos)?;
        let pos = g.slice_rows(pos_table, 0, ids.len())?;
        Ok(Some(g.add(tok, pos)?))
    }

    /// Key/value memory: projected scene tokens followed by projected decoder queries.
    pub fn visual_memory(&self, g: &mut Graph, store: &ParamStore, f_enc: Var, q3d: Var) -> Result<Var> {
        let a = self.kv_enc.forward(g, store, f_enc)?;
        let b = self.kv_q3d.forward(g, store, q3d)?;
        g.concat(&[a, b], 0)
    }

    /// Self-attention over `F_c = [queries; text]`; returns `F_s` and the per-head probabilities.
    pub fn self_fuse(&self, g: &mut Graph, store: &ParamStore, block: usize, f_c: Var) -> Result<(Var, Vec<Var>)> {
        let b = &self.blocks[block];
        match self.cfg.self_attention {
            SelfAttentionForm::MultiHead => {
                let h = b.self_norm.forward(g, store, f_c)?;
                let a = b.self_attn.forward(g, store, h, h, None)?;
                Ok((g.add(f_c, a.out)?, a.probs))
            }
            SelfAttentionForm::Literal => {
                let p = scaled_dot_attention(g, f_c, f_c, 1.0 / (self.cfg.c_t as f64).sqrt(), None)?;
                Ok((g.matmul(p, f_c)?, vec![p]))
            }
        }
    }

    /// Cross-attention of the leading `n_q` rows of `F_s` over the visual memory, then the FFN.
    pub fn cross_attend(&self, g: &mut Graph, store: &ParamStore, block: usize, f_s: Var, memory: Var) -> Result<(Var, Vec<Var>)> {
        let b = &self.blocks[block];
        let q = g.slice_rows(f_s, 0, self.cfg.n_q)?;
        let h = b.cross_norm.forward(g, store, q)?;
        let a = b.cross_attn.forward(g, store, h, memory, None)?;
        let x = g.add(q, a.out)?;
        let h = b.ffn_norm.forward(g, store, x)?;
        let f = b.ffn.forward(g, store, h)?;
        Ok((g.add(x, f)?, a.probs))
    }

    pub fn compress(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_enc: Var,
        q3d: Var,
        p_obj: &[f64],
        text: &[usize],
    ) -> Result<Compressed> {
        let (queries, fused) = if self.cfg.query_fusion {
            self.query_fusion(g, store, q3d, p_obj)?
        } else {
            (g.param(store, self.q_l)?, Vec::new())
        };
        let f_t = self.embed_text(g, store, text)?;
        let memory = self.visual_memory(g, store, f_enc, q3d)?;
        let mut x = self.query_proj.forward(g, store, queries)?;
        let mut cross_probs = Vec::new();
        for i in 0..self.blocks.len() {
            let f_c = match f_t {
                Some(t) => g.concat(&[x, t], 0)?,
                None => x,
            };
            let (f_s, _) = self.self_fuse(g, store, i, f_c)?;
            let (out, probs) = self.cross_attend(g, store, i, f_s, memory)?;
            x = out;
            cross_probs = probs;
        }
        let q_final = self.out_proj.forward(g, store, x)?;
        Ok(Compressed {
            q_final,
            f_final: x,
            cross_probs,
            fused,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(fusion: bool) -> CompressorConfig {
        CompressorConfig {
            n_q: 4,
            blocks: 2,
            c_q: 6,
            c_t: 8,
            c: 8,
            c_lm: 10,
            visual_width: 8,
            heads: 2,
            vocab_size: 16,
            max_text_len: 12,
            trainable: true,
            query_fusion: fusion,
            self_attention: SelfAttentionForm::MultiHead,
        }
    }

    fn inputs(g: &mut Graph, seed: u64) -> (Var, Var, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |r: usize, c: usize| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let f_enc = g.constant(rand_t(16, 8)).unwrap();
        let q3d = g.constant(rand_t(8, 8)).unwrap();
        let p = vec![0.1, 0.9, 0.5, 0.3, 0.3, 0.8, 0.0, 0.2];
        (f_enc, q3d, p)
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_objectness(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_objectness(&[0.4; 5], 3).unwrap(), vec![0, 1, 2]);
        assert!(top_k_objectness(&[0.4; 2], 3).is_err());
    }

    #[test]
    fn shapes() {
        let mut store = ParamStore::default();
        let c = Compressor::new(tiny(true), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for text in [vec![], vec![3, 4, 5]] {
            let mut g = Graph::new();
            let (f, q, p) = inputs(&mut g, 1);
            let out = c.compress(&mut g, &store, f, q, &p, &text).unwrap();
            assert_eq!(g.shape(out.q_final), &[4, 10]);
            assert_eq!(g.shape(out.f_final), &[4, 8]);
            assert_eq!(out.fused, vec![1, 5, 2, 3]);
            assert_eq!(out.cross_probs.len(), 2);
            assert_eq!(g.shape(out.cross_probs[0]), &[4, 24]);
        }
    }

    #[test]
    fn zero_fusion_projection_matches_disabled_fusion() {
        let mut store = ParamStore::default();
        let mut on = Compressor::new(tiny(true), &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let fp = on.fusion_projection().clone();
        store.set(fp.weight, &vec![0.0; 48]).unwrap();
        store.set(fp.bias.unwrap(), &[0.0; 6]).unwrap();
        let run = |c: &Compressor| {
            let mut g = Graph::new();
            let (f, q, p) = inputs(&mut g, 7);
            let out = c.compress(&mut g, &store, f, q, &p, &[2, 9]).unwrap();
            g.value(out.q_final).clone()
        };
        let with = run(&on);
        on.cfg.query_fusion = false;
        assert_eq!(with, run(&on));
    }

    #[test]
    fn width_mismatch_is_a_construction_error() {
        let mut store = ParamStore::default();
        let cfg = CompressorConfig { c: 16, ..tiny(true) };
        assert!(Compressor::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn literal_self_attention_rows_are_convex_combinations() {
        let mut store = ParamStore::default();
        let cfg = CompressorConfig {
            self_attention: SelfAttentionForm::Literal,
            ..tiny(false)
        };
        let c = Compressor::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 8], (0..24).map(|v| v as f64 / 24.0).collect()).unwrap()).unwrap();
        let (f_s, probs) = c.self_fuse(&mut g, &store, 0, x).unwrap();
        assert_eq!(g.shape(f_s), &[3, 8]);
        for r in 0..3 {
            let s: f64 = g.value(probs[0]).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
