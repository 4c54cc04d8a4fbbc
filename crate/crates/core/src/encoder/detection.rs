use super::{hungarian_match, SpatialVars};
use crate::error::{Error, Result};
use crate::pointcloud::AxisAlignedBox;
use crate::tensor::{Graph, Tensor, Var};

pub const OBJECTNESS_COST_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct DetectionLoss {
    pub loss: Var,
    /// `assignment[j]` is the query matched to ground-truth box `j`.
    pub assignment: Vec<usize>,
    /// Mean L1 distance between matched centers and true centers.
    pub matched_center_error: f64,
}

/// `q × g` matching cost: center L1 plus `λ·(1 − p_obj)`.
pub fn matching_cost(centers: &Tensor, p_obj: &[f64], truth: &[AxisAlignedBox]) -> Vec<Vec<f64>> {
    (0..centers.rows())
        .map(|i| {
            let c = centers.row(i);
            truth
                .iter()
                .map(|b| {
                    let l1: f64 = (0..3).map(|k| (c[k] - b.center[k]).abs()).sum();
                    l1 + OBJECTNESS_COST_WEIGHT * (1.0 - p_obj[i])
                })
                .collect()
        })
        .collect()
}

/// Set-prediction loss: Hungarian matching, then matched center L1 + matched
/// half-extent L1 (both averaged over objects) + objectness BCE averaged over
/// all queries (matched → 1, others → 0).
pub fn detection_loss(g: &mut Graph, preds: &SpatialVars, truth: &[AxisAlignedBox]) -> Result<DetectionLoss> {
    let n_q = g.shape(preds.centers)[0];
    if truth.len() > n_q {
        return Err(Error::arg(format!("{} objects exceed {n_q} queries", truth.len())));
    }
    let cost = matching_cost(g.value(preds.centers), g.value(preds.p_obj).data(), truth);
    let assignment = hungarian_match(&cost)?;

    let mut targets = vec![0.0; n_q];
    for &q in &assignment {
        targets[q] = 1.0;
    }
    let bce = g.bce_with_logits(preds.obj_logits, &targets)?;
    if truth.is_empty() {
        return Ok(DetectionLoss {
            loss: bce,
            assignment,
            matched_center_error: 0.0,
        });
    }

    let n = truth.len();
    let true_centers = Tensor::new(vec![n, 3], truth.iter().flat_map(|b| b.center).collect())?;
    let true_sizes = Tensor::new(vec![n, 3], truth.iter().flat_map(|b| b.half_extent).collect())?;
    let l1 = |g: &mut Graph, pred: Var, target: Tensor| -> Result<Var> {
        let picked = g.gather_rows(pred, &assignment)?;
        let t = g.constant(target)?;
        let d = g.sub(picked, t)?;
        let d = g.abs(d)?;
        let s = g.sum(d)?;
        g.scale(s, 1.0 / n as f64)
    };
    let center = l1(g, preds.centers, true_centers)?;
    let matched_center_error = g.value(center).item();
    let size = l1(g, preds.half_extents, true_sizes)?;
    let loss = g.add(center, size)?;
    let loss = g.add(loss, bce)?;
    Ok(DetectionLoss {
        loss,
        assignment,
        matched_center_error,
    })
}
