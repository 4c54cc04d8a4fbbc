//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use sceneqa::compressor::{Compressor, CompressorConfig};
use sceneqa::datakit::{derive_seed, generate_scene, LoadedSplit, SceneConfig, TaskTag};
use sceneqa::pointcloud::Point3;
use sceneqa::tensor::{Graph, ParamStore, Tensor, Var};

// ---------------------------------------------------------------- text metrics

pub fn oracle_tokens(s: &str) -> Vec<String> {
    let mut spaced = String::new();
    for ch in s.to_lowercase().chars() {
        if ch.is_ascii_punctuation() {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.push(ch);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

fn ngrams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn occurrences(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub struct Case {
    pub hyp: String,
    pub refs: Vec<String>,
}

/// Corpus BLEU-n (percentage) with the `1/(2·count)` floor for empty precisions.
pub fn oracle_bleu(cases: &[Case], n: usize) -> f64 {
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c, mut r) = (0usize, 0usize);
    for case in cases {
        let h = oracle_tokens(&case.hyp);
        let refs: Vec<Vec<String>> = case.refs.iter().map(|x| oracle_tokens(x)).collect();
        c += h.len();
        let mut best: Option<usize> = None;
        for rt in &refs {
            let d = rt.len().abs_diff(h.len());
            best = match best {
                None => Some(rt.len()),
                Some(b) => {
                    let bd = b.abs_diff(h.len());
                    if d < bd || (d == bd && rt.len() < b) {
                        Some(rt.len())
                    } else {
                        Some(b)
                    }
                }
            };
        }
        r += best.unwrap_or(0);
        for k in 1..=n {
            let hg = ngrams(&h, k);
            let rg: Vec<Vec<Vec<String>>> = refs.iter().map(|x| ngrams(x, k)).collect();
            let mut distinct = hg.clone();
            distinct.sort();
            distinct.dedup();
            for g in &distinct {
                let cnt = occurrences(&hg, g);
                let cap = rg.iter().map(|l| occurrences(l, g)).max().unwrap_or(0);
                matched[k - 1] += cnt.min(cap);
                total[k - 1] += cnt;
            }
        }
    }
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        let p = if matched[k] > 0 {
            matched[k] as f64 / total[k] as f64
        } else {
            0.5 / total[k].max(1) as f64
        };
        log_sum += p.ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * (log_sum / n as f64).exp()
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

/// LCS length by enumerating every subsequence of `a` (keep `a` short).
pub fn brute_lcs(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16);
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let ones = mask.count_ones() as usize;
        if ones <= best {
            continue;
        }
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if is_subsequence(&sub, b) {
            best = ones;
        }
    }
    best
}

/// Mean best-reference ROUGE-L F-measure (percentage), `β² = 1.2`.
pub fn oracle_rouge_l(cases: &[Case]) -> f64 {
    if cases.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for case in cases {
        let h = oracle_tokens(&case.hyp);
        let mut best: f64 = 0.0;
        for r in &case.refs {
            let rt = oracle_tokens(r);
            let l = brute_lcs(&h, &rt) as f64;
            if l == 0.0 {
                continue;
            }
            let p = l / h.len() as f64;
            let rec = l / rt.len() as f64;
            best = best.max(2.2 * p * rec / (rec + 1.2 * p));
        }
        sum += best;
    }
    100.0 * sum / cases.len() as f64
}

/// CIDEr on the ×10 scale, averaged over pairs.
pub fn oracle_cider(cases: &[Case]) -> f64 {
    if cases.is_empty() {
        return 0.0;
    }
    let n_docs = cases.len() as f64;
    let toks: Vec<(Vec<String>, Vec<Vec<String>>)> = cases
        .iter()
        .map(|c| (oracle_tokens(&c.hyp), c.refs.iter().map(|r| oracle_tokens(r)).collect()))
        .collect();
    let mut total = 0.0;
    for n in 1..=4 {
        let mut df: BTreeMap<Vec<String>, f64> = BTreeMap::new();
        for (_, refs) in &toks {
            let mut all: Vec<Vec<String>> = refs.iter().flat_map(|r| ngrams(r, n)).collect();
            all.sort();
            all.dedup();
            for g in all {
                *df.entry(g).or_default() += 1.0;
            }
        }
        let idf = |g: &Vec<String>| (n_docs / df.get(g).copied().unwrap_or(0.0).max(1.0)).ln();
        for (h, refs) in &toks {
            let mut hv: BTreeMap<Vec<String>, f64> = BTreeMap::new();
            for g in ngrams(h, n) {
                *hv.entry(g).or_default() += 1.0;
            }
            for (g, v) in hv.iter_mut() {
                *v *= idf(g);
            }
            let mut rv: BTreeMap<Vec<String>, f64> = BTreeMap::new();
            for r in refs {
                for g in ngrams(r, n) {
                    let w = idf(&g) / refs.len() as f64;
                    *rv.entry(g).or_default() += w;
                }
            }
            let dot: f64 = hv.iter().map(|(g, v)| v * rv.get(g).copied().unwrap_or(0.0)).sum();
            let nh = hv.values().map(|v| v * v).sum::<f64>().sqrt();
            let nr = rv.values().map(|v| v * v).sum::<f64>().sqrt();
            if nh > 0.0 && nr > 0.0 {
                total += dot / (nh * nr) / 4.0;
            }
        }
    }
    10.0 * total / n_docs
}

fn oracle_normalize(s: &str) -> String {
    let mut words: Vec<String> = s.to_lowercase().split_whitespace().map(str::to_string).collect();
    while let Some(last) = words.last_mut() {
        while last.ends_with(|c: char| c.is_ascii_punctuation()) {
            last.pop();
        }
        if last.is_empty() {
            words.pop();
        } else {
            break;
        }
    }
    words.join(" ")
}

pub fn oracle_em(cases: &[Case]) -> f64 {
    if cases.is_empty() {
        return 0.0;
    }
    let hits = cases
        .iter()
        .filter(|c| c.refs.iter().any(|r| oracle_normalize(r) == oracle_normalize(&c.hyp)))
        .count();
    100.0 * hits as f64 / cases.len() as f64
}

const WORDS: [&str; 12] = [
    "the", "red", "chair", "table", "left", "of", "a", "lamp", "two", "blue", "near", "box",
];

fn random_sentence(rng: &mut impl Rng, max_len: usize) -> String {
    let len = rng.random_range(0..=max_len);
    let mut words: Vec<String> = (0..len)
        .map(|_| {
            let w = WORDS[rng.random_range(0..WORDS.len())];
            if rng.random_bool(0.1) {
                w.to_uppercase()
            } else {
                w.to_string()
            }
        })
        .collect();
    if !words.is_empty() && rng.random_bool(0.2) {
        words.last_mut().unwrap().push('.');
    }
    words.join(" ")
}

/// A random corpus; hypotheses sometimes copy a reference so matches occur.
pub fn random_corpus(rng: &mut impl Rng) -> Vec<Case> {
    let n = rng.random_range(1..=6);
    (0..n)
        .map(|_| {
            let refs: Vec<String> = (0..rng.random_range(1..=3)).map(|_| random_sentence(rng, 8)).collect();
            let hyp = if rng.random_bool(0.3) {
                refs[rng.random_range(0..refs.len())].clone()
            } else {
                random_sentence(rng, 8)
            };
            Case { hyp, refs }
        })
        .collect()
}

// ------------------------------------------------------------------- geometry

fn sq(a: Point3, b: Point3) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// Greedy max-min selection recomputing every min-distance from scratch.
pub fn oracle_fps(points: &[Point3], k: usize, start: usize) -> Vec<usize> {
    let mut picked = vec![start];
    while picked.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..points.len() {
            if picked.contains(&i) {
                continue;
            }
            let d = picked.iter().map(|&j| sq(points[i], points[j])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        picked.push(best.unwrap().1);
    }
    picked
}

/// Minimum total cost over every injective map of columns to rows.
pub fn oracle_assignment_cost(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], col: usize, used: &mut Vec<bool>) -> f64 {
        let g = cost[0].len();
        if col == g {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for r in 0..cost.len() {
            if !used[r] {
                used[r] = true;
                best = best.min(cost[r][col] + go(cost, col + 1, used));
                used[r] = false;
            }
        }
        best
    }
    if cost.is_empty() || cost[0].is_empty() {
        return 0.0;
    }
    go(cost, 0, &mut vec![false; cost.len()])
}

// ------------------------------------------------------------------ optimizer

/// Scalar AdamW, written out step by step.
pub struct OracleAdam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl OracleAdam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) {
        self.t += 1;
        for i in 0..w.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            w[i] -= lr * wd * w[i];
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

// ----------------------------------------------------------------------- data

/// In-memory split of generated scenes with at least `n_items` items, cut to
/// exactly `n_items`. Scene `i` uses `derive_seed(root, start + i)`.
pub fn generated_split(root: u64, start: u64, n_items: usize, qa_only: bool) -> LoadedSplit {
    let cfg = SceneConfig::default();
    let mut scenes = Vec::new();
    let mut n = 0;
    let mut i = start;
    while n < n_items {
        let mut s = generate_scene(derive_seed(root, i), &cfg, &format!("s{i}")).unwrap();
        if qa_only {
            s.record.qa.retain(|q| q.task == TaskTag::Qa);
        }
        s.record.qa.truncate(n_items - n);
        n += s.record.qa.len();
        scenes.push(s);
        i += 1;
    }
    LoadedSplit::from_generated("train", scenes)
}

// ------------------------------------------------------------------- autodiff


pub type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> sceneqa::Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

pub fn seeded_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `Σ x ⊙ W` with fixed, non-uniform weights so every output entry matters.
pub fn weighted_sum(g: &mut Graph, x: Var) -> sceneqa::Result<Var> {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| (1.0 + 0.7 * i as f64).sin()).collect())?;
    let w = g.constant(w)?;
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> sceneqa::Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// One gradient-check case per differentiable graph operation. Inputs avoid
/// the kinks of `abs` and ties inside `segment_max`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| seeded_tensor(&mut rng, shape, -1.5, 1.5);
    let away_from_zero = Tensor::new(vec![2, 3], vec![0.4, -0.9, 1.3, -0.2, 0.7, -1.1]).unwrap();
    let distinct = Tensor::new(vec![5, 2], vec![0.1, 1.9, -0.7, 0.3, 1.2, -1.4, 0.8, 0.55, -0.3, 1.05]).unwrap();
    let mask = vec![true, false, true, true, true, true, false, true, false, false, true, true];
    vec![
        case("matmul", vec![t(&[3, 4]), t(&[4, 2])], |g, p| {
            let y = g.matmul(p[0], p[1])?;
            weighted_sum(g, y)
        }),
        case("transpose", vec![t(&[2, 3])], |g, p| {
            let y = g.transpose(p[0])?;
            weighted_sum(g, y)
        }),
        case("add", vec![t(&[2, 3]), t(&[2, 3])], |g, p| {
            let y = g.add(p[0], p[1])?;
            weighted_sum(g, y)
        }),
        case("sub", vec![t(&[2, 3]), t(&[2, 3])], |g, p| {
            let y = g.sub(p[0], p[1])?;
            weighted_sum(g, y)
        }),
        case("mul", vec![t(&[2, 3]), t(&[2, 3])], |g, p| {
            let y = g.mul(p[0], p[1])?;
            weighted_sum(g, y)
        }),
        case("add_row", vec![t(&[3, 4]), t(&[4])], |g, p| {
            let y = g.add_row(p[0], p[1])?;
            weighted_sum(g, y)
        }),
        case("scale", vec![t(&[2, 3])], |g, p| {
            let y = g.scale(p[0], -1.7)?;
            weighted_sum(g, y)
        }),
        case("concat_rows", vec![t(&[2, 3]), t(&[1, 3])], |g, p| {
            let y = g.concat(&[p[0], p[1]], 0)?;
            weighted_sum(g, y)
        }),
        case("concat_cols", vec![t(&[2, 3]), t(&[2, 2])], |g, p| {
            let y = g.concat(&[p[0], p[1]], 1)?;
            weighted_sum(g, y)
        }),
        case("slice_rows", vec![t(&[4, 3])], |g, p| {
            let y = g.slice_rows(p[0], 1, 2)?;
            weighted_sum(g, y)
        }),
        case("slice_cols", vec![t(&[3, 4])], |g, p| {
            let y = g.slice_cols(p[0], 1, 2)?;
            weighted_sum(g, y)
        }),
        case("gather_rows", vec![t(&[4, 3])], |g, p| {
            let y = g.gather_rows(p[0], &[2, 0, 2, 3])?;
            weighted_sum(g, y)
        }),
        case("embedding", vec![t(&[5, 3])], |g, p| {
            let y = g.embedding(p[0], &[4, 1, 1])?;
            weighted_sum(g, y)
        }),
        case("layer_norm", vec![t(&[3, 5]), t(&[5]), t(&[5])], |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2])?;
            weighted_sum(g, y)
        }),
        case("gelu", vec![t(&[2, 3])], |g, p| {
            let y = g.gelu(p[0])?;
            weighted_sum(g, y)
        }),
        case("sigmoid", vec![t(&[2, 3])], |g, p| {
            let y = g.sigmoid(p[0])?;
            weighted_sum(g, y)
        }),
        case("tanh", vec![t(&[2, 3])], |g, p| {
            let y = g.tanh(p[0])?;
            weighted_sum(g, y)
        }),
        case("exp", vec![t(&[2, 3])], |g, p| {
            let y = g.exp(p[0])?;
            weighted_sum(g, y)
        }),
        case("abs", vec![away_from_zero], |g, p| {
            let y = g.abs(p[0])?;
            weighted_sum(g, y)
        }),
        case("softmax_rows", vec![t(&[3, 4])], |g, p| {
            let y = g.softmax_rows(p[0])?;
            weighted_sum(g, y)
        }),
        case("softmax_rows_masked", vec![t(&[3, 4])], move |g, p| {
            let y = g.softmax_rows_masked(p[0], &mask)?;
            weighted_sum(g, y)
        }),
        case("cross_entropy", vec![t(&[4, 5])], |g, p| {
            g.cross_entropy(p[0], &[1, 4, 0, 2], &[true, true, false, true])
        }),
        case("bce_with_logits", vec![t(&[2, 3])], |g, p| {
            g.bce_with_logits(p[0], &[1.0, 0.0, 0.3, 1.0, 0.0, 0.9])
        }),
        case("sum", vec![t(&[2, 3])], |g, p| {
            let y = g.exp(p[0])?;
            g.sum(y)
        }),
        case("mean", vec![t(&[2, 3])], |g, p| {
            let y = g.exp(p[0])?;
            g.mean(y)
        }),
        case("segment_max", vec![distinct], |g, p| {
            let y = g.segment_max(p[0], &[(0, 2), (2, 3), (4, 1)])?;
            weighted_sum(g, y)
        }),
    ]
}

// ------------------------------------------------------------------ attention


pub fn small_compressor_config(fusion: bool) -> CompressorConfig {
    CompressorConfig {
        n_q: 4,
        blocks: 2,
        c_q: 6,
        c_t: 8,
        c: 8,
        c_lm: 8,
        visual_width: 8,
        heads: 2,
        vocab_size: 16,
        max_text_len: 8,
        query_fusion: fusion,
        ..CompressorConfig::default()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionTrial {
    /// Largest `|Σ row − 1|` over every attention matrix produced.
    pub row_sum_err: f64,
    /// Largest output change after permuting the keys of one cross-attention call.
    pub cross_attend_gap: f64,
    /// Largest change of the compressed tokens after permuting scene tokens
    /// and, consistently, decoder queries with their objectness.
    pub compress_gap: f64,
}

fn max_row_sum_err(t: &Tensor) -> f64 {
    (0..t.rows()).map(|r| (t.row(r).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// One seeded key-permutation trial on a freshly initialized compressor.
pub fn attention_trial(seed: u64) -> AttentionTrial {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_compressor_config(true);
    let mut store = ParamStore::default();
    let comp = Compressor::new(cfg.clone(), &mut store, &mut rng).unwrap();
    let n_enc = rng.random_range(3..12);
    let n_3d = rng.random_range(cfg.n_q..10);
    let n_t = rng.random_range(0..cfg.max_text_len);
    let f_enc = seeded_tensor(&mut rng, &[n_enc, cfg.visual_width], -2.0, 2.0);
    let q3d = seeded_tensor(&mut rng, &[n_3d, cfg.visual_width], -2.0, 2.0);
    let p_obj: Vec<f64> = (0..n_3d).map(|_| rng.random_range(0.0..1.0)).collect();
    let text: Vec<usize> = (0..n_t).map(|_| rng.random_range(4..cfg.vocab_size)).collect();
    let mut out = AttentionTrial::default();

    // Single cross-attention call, memory rows permuted.
    let f_s = seeded_tensor(&mut rng, &[cfg.n_q + n_t, cfg.c_t], -2.0, 2.0);
    let memory = seeded_tensor(&mut rng, &[n_enc + n_3d, cfg.c], -2.0, 2.0);
    let mut perm: Vec<usize> = (0..memory.rows()).collect();
    perm.shuffle(&mut rng);
    let cross = |mem: &Tensor| {
        let mut g = Graph::new();
        let fs = g.constant(f_s.clone()).unwrap();
        let m = g.constant(mem.clone()).unwrap();
        let (y, probs) = comp.cross_attend(&mut g, &store, 0, fs, m).unwrap();
        let err = probs.iter().map(|p| max_row_sum_err(g.value(*p))).fold(0.0, f64::max);
        (g.value(y).clone(), err)
    };
    let (a, e1) = cross(&memory);
    let (b, e2) = cross(&permute_rows(&memory, &perm));
    out.cross_attend_gap = a.max_abs_diff(&b);
    out.row_sum_err = e1.max(e2);

    // Whole compressor, scene tokens and decoder queries permuted.
    let mut pe: Vec<usize> = (0..n_enc).collect();
    pe.shuffle(&mut rng);
    let mut pq: Vec<usize> = (0..n_3d).collect();
    pq.shuffle(&mut rng);
    let run = |f: &Tensor, q: &Tensor, p: &[f64]| {
        let mut g = Graph::new();
        let fv = g.constant(f.clone()).unwrap();
        let qv = g.constant(q.clone()).unwrap();
        let c = comp.compress(&mut g, &store, fv, qv, p, &text).unwrap();
        let err = c.cross_probs.iter().map(|p| max_row_sum_err(g.value(*p))).fold(0.0, f64::max);
        (g.value(c.q_final).clone(), err)
    };
    let (a, e1) = run(&f_enc, &q3d, &p_obj);
    let p_perm: Vec<f64> = pq.iter().map(|&i| p_obj[i]).collect();
    let (b, e2) = run(&permute_rows(&f_enc, &pe), &permute_rows(&q3d, &pq), &p_perm);
    out.compress_gap = a.max_abs_diff(&b);
    out.row_sum_err = out.row_sum_err.max(e1).max(e2);

    // Self-attention probabilities over queries and text.
    let mut g = Graph::new();
    let fc = g.constant(f_s.clone()).unwrap();
    let (_, probs) = comp.self_fuse(&mut g, &store, 1, fc).unwrap();
    for p in probs {
        out.row_sum_err = out.row_sum_err.max(max_row_sum_err(g.value(p)));
    }
    out
}
