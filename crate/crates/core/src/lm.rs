//! Small decoder-only language model that reads compressed visual tokens and
//! the instruction as a bidirectional prefix and generates the response
//! causally.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, LayerNorm, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::text::{BOS, EOS, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Number of visual prefix tokens.
    pub n_visual: usize,
    pub max_instruction_len: usize,
    /// Longest response, counting the closing EOS.
    pub max_response_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            width: 64,
            layers: 2,
            heads: 4,
            n_visual: 32,
            max_instruction_len: 32,
            max_response_len: 24,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "language model width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.vocab_size <= EOS || self.max_response_len == 0 {
            return Err(Error::config("language model needs reserved tokens and a positive response length"));
        }
        Ok(())
    }

    fn max_positions(&self) -> usize {
        self.n_visual + self.max_instruction_len + self.max_response_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "width")]
pub enum Decoding {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone)]
pub struct PrefixLm {
    pub cfg: LmConfig,
    tok_embed: ParamId,
    pos_embed: ParamId,
    visual_segment: ParamId,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
    head: Linear,
}

/// Visibility mask for a sequence of `prefix` bidirectional positions
/// followed by `resp` causal positions.
pub fn prefix_causal_mask(prefix: usize, resp: usize) -> Vec<bool> {
    let n = prefix + resp;
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = if i < prefix { j < prefix } else { j <= i };
        }
    }
    m
}

impl PrefixLm {
    /// Registers parameters under `lm.`.
    pub fn new(cfg: LmConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let tok_embed = store.insert_normal("lm.tok_embed", &[cfg.vocab_size, c], 1.0, rng)?;
        let pos_embed = store.insert_normal("lm.pos_embed", &[cfg.max_positions(), c], 0.1, rng)?;
        let visual_segment = store.insert_normal("lm.visual_segment", &[1, c], 0.1, rng)?;
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(store, &format!("lm.block{i}"), c, cfg.heads, rng))
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(store, "lm.final_norm", c)?;
        let head = Linear::new(store, "lm.head", c, cfg.vocab_size, true, rng)?;
        Ok(Self {
            cfg,
            tok_embed,
            pos_embed,
            visual_segment,
            blocks,
            final_norm,
            head,
        })
    }

    /// Logits for every response position. `visual` is `n_visual × width`;
    /// `response_in` is the decoder input starting with BOS.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, visual: Var, instruction: &[usize], response_in: &[usize]) -> Result<Var> {
        let cfg = &self.cfg;
        if g.shape(visual) != [cfg.n_visual, cfg.width] {
            return Err(Error::Shape {
                op: "lm.forward",
                lhs: g.shape(visual).to_vec(),
                rhs: vec![cfg.n_visual, cfg.width],
            });
        }
        if instruction.len() > cfg.max_instruction_len {
            return Err(Error::arg(format!(
                "instruction of {} tokens exceeds the limit of {}",
                instruction.len(),
                cfg.max_instruction_len
            )));
        }
        if response_in.is_empty() || response_in.len() > cfg.max_response_len {
            return Err(Error::arg(format!(
                "response prefix of {} tokens outside 1..={}",
                response_in.len(),
                cfg.max_response_len
            )));
        }
        let seg = g.param(store, self.visual_segment)?;
        let vis = g.add_row(visual, seg)?;
        let table = g.param(store, self.tok_embed)?;
        let text_ids: Vec<usize> = instruction.iter().chain(response_in).copied().collect();
        let text = g.embedding(table, &text_ids)?;
        let x = g.concat(&[vis, text], 0)?;
        let len = g.shape(x)[0];
        let pos_table = g.param(store, self.pos_embed)?;
        let pos = g.slice_rows(pos_table, 0, len)?;
        let mut x = g.add(x, pos)?;

        let prefix = cfg.n_visual + instruction.len();
        let mask = prefix_causal_mask(prefix, response_in.len());
        for b in &self.blocks {
            x = b.forward(g, store, x, Some(&mask))?;
        }
        let resp = g.slice_rows(x, prefix, response_in.len())?;
        let h = self.final_norm.forward(g, store, resp)?;
        self.head.forward(g, store, h)
    }

    /// Teacher-forced token cross-entropy over the response, averaged per
    /// token. Positions after the first EOS are ignored.
    pub fn sequence_loss(&self, g: &mut Graph, store: &ParamStore, visual: Var, instruction: &[usize], response: &[usize]) -> Result<Var> {
        if response.is_empty() {
            return Err(Error::arg("response must contain at least one token"));
        }
        let (input, mask) = teacher_forcing(response);
        let logits = self.forward(g, store, visual, instruction, &input)?;
        g.cross_entropy(logits, response, &mask)
    }

    fn next_log_probs(&self, store: &ParamStore, visual: &Tensor, instruction: &[usize], response_in: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::with_precision(store.precision());
        let v = g.constant(visual.clone())?;
        let logits = self.forward(&mut g, store, v, instruction, response_in)?;
        let last = g.value(logits).row(response_in.len() - 1);
        Ok(log_softmax(last))
    }

    /// Decodes up to `max_len` tokens (EOS included). Returns the response ids
    /// without EOS.
    pub fn generate(
        &self,
        store: &ParamStore,
        visual: &Tensor,
        instruction: &[usize],
        max_len: usize,
        mode: Decoding,
    ) -> Result<Vec<usize>> {
        let max_len = max_len.min(self.cfg.max_response_len);
        match mode {
            Decoding::Greedy => self.greedy(store, visual, instruction, max_len),
            Decoding::Beam(w) => self.beam(store, visual, instruction, max_len, w.max(1)),
        }
    }

    fn greedy(&self, store: &ParamStore, visual: &Tensor, instruction: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let mut seq = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..max_len {
            let lp = self.next_log_probs(store, visual, instruction, &seq)?;
            let next = argmax(&lp);
            if next == EOS {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    fn beam(&self, store: &ParamStore, visual: &Tensor, instruction: &[usize], max_len: usize, width: usize) -> Result<Vec<usize>> {
        #[derive(Clone)]
        struct Hyp {
            ids: Vec<usize>,
            logp: f64,
            done: bool,
        }
        let score = |h: &Hyp| h.logp / h.ids.len().max(1) as f64;
        let order = |a: &Hyp, b: &Hyp| score(b).total_cmp(&score(a)).then_with(|| a.ids.cmp(&b.ids));
        let mut beams = vec![Hyp {
            ids: Vec::new(),
            logp: 0.0,
            done: false,
        }];
        for _ in 0..max_len {
            if beams.iter().all(|h| h.done) {
                break;
            }
            let mut cand = Vec::new();
            for h in &beams {
                if h.done {
                    cand.push(h.clone());
                    continue;
                }
                let input: Vec<usize> = std::iter::once(BOS).chain(h.ids.iter().copied()).collect();
                let lp = self.next_log_probs(store, visual, instruction, &input)?;
                for (tok, l) in lp.iter().enumerate() {
                    let mut ids = h.ids.clone();
                    ids.push(tok);
                    cand.push(Hyp {
                        ids,
                        logp: h.logp + l,
                        done: tok == EOS,
                    });
                }
            }
            cand.sort_by(order);
            cand.truncate(width);
            beams = cand;
        }
        beams.sort_by(order);
        let mut best = beams.into_iter().next().map(|h| h.ids).unwrap_or_default();
        if best.last() == Some(&EOS) {
            best.pop();
        }
        Ok(best)
    }
}

/// Decoder input `[BOS, r₀, …, r_{T−2}]` and the loss mask covering tokens up
/// to and including the first EOS.
pub fn teacher_forcing(response: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let input: Vec<usize> = std::iter::once(BOS)
        .chain(response[..response.len() - 1].iter().copied())
        .collect();
    let mut mask = Vec::with_capacity(response.len());
    let mut ended = false;
    for &t in response {
        mask.push(!ended && t != PAD);
        ended |= t == EOS;
    }
    (input, mask)
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
