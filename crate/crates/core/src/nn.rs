//! Parameterized layers shared by the encoder, compressor and language model.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = store.insert_normal(&format!("{name}.w"), &[in_dim, out_dim], std, rng)?;
        let bias = if bias {
            Some(store.insert_full(&format!("{name}.b"), &[out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert_full(&format!("{name}.gain"), &[dim], 1.0)?,
            bias: store.insert_full(&format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer GELU perceptron with ×4 expansion.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, 4 * dim, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), 4 * dim, dim, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, store, h)
    }
}

pub struct AttentionOutput {
    pub out: Var,
    /// One `(n_query × n_key)` probability matrix per head.
    pub probs: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::with_kv_dim(store, name, dim, dim, heads, rng)
    }

    /// Keys/values may come from a source of different width.
    pub fn with_kv_dim(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("{name}: width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `allowed`, if given, is a row-major `(n_query × n_key)` visibility mask.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        kv: Var,
        allowed: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, kv)?;
        let v = self.v.forward(g, store, kv)?;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dk, dk)?,
                    g.slice_cols(k, h * dk, dk)?,
                    g.slice_cols(v, h * dk, dk)?,
                )
            };
            let p = scaled_dot_attention(g, qh, kh, scale, allowed)?;
            heads.push(g.matmul(p, vh)?);
            probs.push(p);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        let out = self.o.forward(g, store, cat)?;
        Ok(AttentionOutput { out, probs })
    }
}

/// `softmax(q kᵀ · scale)` with an optional visibility mask.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, scale: f64, allowed: Option<&[bool]>) -> Result<Var> {
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, scale)?;
    match allowed {
        Some(m) => g.softmax_rows_masked(s, m),
        None => g.softmax_rows(s),
    }
}

/// Pre-norm self-attention + feed-forward block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, allowed)?;
        let x = g.add(x, a.out)?;
        let h = self.norm2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        g.add(x, f)
    }
}
