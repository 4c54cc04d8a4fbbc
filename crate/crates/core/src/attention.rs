//! Projection of compressor cross-attention back onto the input points.
//!
//! For each selected compressor query the head-averaged cross-attention row of
//! the last block is spread over points: the weight of a scene token is shared
//! uniformly by the members of its grouping neighborhood, the weight of a
//! decoder-query key by the points inside that query's predicted box. Points
//! dropped by down-sampling take the token share of their nearest kept point.
//! Each map is then min-max normalized to `[0, 1]`.

use std::path::{Path, PathBuf};

use crate::compressor::top_k_objectness;
use crate::error::{Error, Result};
use crate::model::{prepare_scene, Model, Perception};
use crate::pointcloud::io::write_cloud;
use crate::pointcloud::{squared_distance, PointCloud};

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMap {
    /// Row of the compressor output.
    pub compressor_query: usize,
    /// Decoder query paired with it by objectness rank.
    pub decoder_query: usize,
    pub p_obj: f64,
    /// One score in `[0, 1]` per input point.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub queries: Vec<QueryMap>,
    /// Pointwise maximum over the query maps.
    pub composite: Vec<f64>,
}

fn min_max(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
    }
}

/// Attention maps of the `k` compressor queries paired with the most
/// confident decoder queries. Compressor query `i` is paired with the decoder
/// query of objectness rank `i`, which is the pairing used by query fusion.
pub fn attention_maps(model: &Model, cloud: &PointCloud, instruction: &[usize], k: usize) -> Result<AttentionExport> {
    let n_q = model.cfg.compressor.n_q;
    if k == 0 || k > n_q {
        return Err(Error::arg(format!("k must be in 1..={n_q}, got {k}")));
    }
    let scene = prepare_scene(cloud, model.cfg.sample_points)?;
    let mut g = model.graph();
    let (enc, vars) = model.perceive(&mut g, &scene)?;
    let features = vars.detach(&g);
    let perception = Perception::from_vars(&g, &vars);
    let compressed = model.compress(&mut g, &perception, instruction)?;

    let heads = compressed.cross_probs.len();
    let n_enc = enc.seeds.len();
    let n_keys = n_enc + features.pred_boxes.len();
    let mut probs = vec![0.0; n_q * n_keys];
    for h in &compressed.cross_probs {
        for (acc, v) in probs.iter_mut().zip(g.value(*h).data()) {
            *acc += v / heads as f64;
        }
    }

    let normalized: Vec<[f64; 3]> = cloud
        .points()
        .iter()
        .map(|p| [0, 1, 2].map(|a| (p[a] - scene.centroid[a]) / scene.scale))
        .collect();
    // Kept point (index into the prepared cloud) standing in for every input point.
    let mut proxy = vec![usize::MAX; cloud.len()];
    for (kept, &src) in scene.source_index.iter().enumerate() {
        proxy[src] = kept;
    }
    let kept_pts = scene.cloud.points();
    for (i, p) in normalized.iter().enumerate() {
        if proxy[i] == usize::MAX {
            let mut best = (f64::INFINITY, 0);
            for (j, q) in kept_pts.iter().enumerate() {
                let d = squared_distance(*p, *q);
                if d < best.0 {
                    best = (d, j);
                }
            }
            proxy[i] = best.1;
        }
    }
    let in_box: Vec<Vec<usize>> = features
        .pred_boxes
        .iter()
        .map(|(c, h)| {
            (0..normalized.len())
                .filter(|&i| (0..3).all(|a| (normalized[i][a] - c[a]).abs() <= h[a]))
                .collect()
        })
        .collect();

    let ranked = top_k_objectness(&features.p_obj, n_q)?;
    let mut queries = Vec::with_capacity(k);
    for (q, &dq) in ranked.iter().enumerate().take(k) {
        let row = &probs[q * n_keys..(q + 1) * n_keys];
        let mut kept_score = vec![0.0; kept_pts.len()];
        for (hood, w) in enc.neighborhoods.iter().zip(&row[..n_enc]) {
            for &m in hood {
                kept_score[m] += w / hood.len() as f64;
            }
        }
        let mut scores: Vec<f64> = proxy.iter().map(|&j| kept_score[j]).collect();
        for (members, w) in in_box.iter().zip(&row[n_enc..]) {
            for &i in members {
                scores[i] += w / members.len() as f64;
            }
        }
        min_max(&mut scores);
        queries.push(QueryMap {
            compressor_query: q,
            decoder_query: dq,
            p_obj: features.p_obj[dq],
            scores,
        });
    }
    let composite = (0..cloud.len())
        .map(|i| queries.iter().map(|m| m.scores[i]).fold(0.0, f64::max))
        .collect();
    Ok(AttentionExport { queries, composite })
}

fn heat_cloud(cloud: &PointCloud, scores: &[f64]) -> Result<PointCloud> {
    PointCloud::new(cloud.points().to_vec(), Some(scores.iter().map(|&s| [s, 0.0, 0.0]).collect()))
}

/// Writes `query_NN.ply` per map (rank order) and `composite.ply`; the red
/// channel carries the score.
pub fn write_attention(out_dir: &Path, cloud: &PointCloud, export: &AttentionExport) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    for (rank, m) in export.queries.iter().enumerate() {
        let p = out_dir.join(format!("query_{rank:02}.ply"));
        write_cloud(&p, &heat_cloud(cloud, &m.scores)?)?;
        paths.push(p);
    }
    let p = out_dir.join("composite.ply");
    write_cloud(&p, &heat_cloud(cloud, &export.composite)?)?;
    paths.push(p);
    Ok(paths)
}
