//! Set-matching losses: bipartite matching between predictions and ground
//! truth, the point-query loss, the split-map loss, and dual supervision.

mod hungarian;

pub use hungarian::{assign, assignment_cost, CostMatrix};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Smooth l1 (Huber at delta = 1) of a scalar difference.
pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Matching cost between one prediction (probability, normalized location)
/// and one ground-truth point: mirrors the loss terms with the same
/// localization weight.
pub fn match_cost(prob: f64, pred: (f64, f64), gt: (f64, f64), lambda_loc: f64) -> f64 {
    -prob + lambda_loc * (smooth_l1(pred.0 - gt.0) + smooth_l1(pred.1 - gt.1))
}

/// Bipartite match of ground-truth points to queries.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// `assignment[i]` = query index matched with ground-truth point i.
    pub assignment: Vec<usize>,
    /// Per-query classification label; true exactly for matched queries.
    pub labels: Vec<bool>,
}

/// Match M ground-truth points to N queries (N >= M) by minimum total cost.
pub fn match_queries(
    probs: &[f64],
    locs: &[(f64, f64)],
    gts: &[(f64, f64)],
    lambda_loc: f64,
) -> Result<MatchResult> {
    let n = probs.len();
    let m = gts.len();
    if locs.len() != n {
        return Err(Error::Dim("probs and locations disagree in length".into()));
    }
    if m > n {
        return Err(Error::Contract(format!(
            "more ground-truth points ({m}) than queries ({n})"
        )));
    }
    let mut labels = vec![false; n];
    if m == 0 {
        return Ok(MatchResult {
            assignment: Vec::new(),
            labels,
        });
    }
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        for gt in gts {
            data.push(match_cost(probs[i], locs[i], *gt, lambda_loc));
        }
    }
    let cost = CostMatrix::new(n, m, data)?;
    let assignment = assign(&cost)?;
    for &q in &assignment {
        labels[q] = true;
    }
    Ok(MatchResult { assignment, labels })
}

/// Differentiable point-query loss: 2-way cross entropy averaged over all
/// queries plus the weighted smooth-l1 localization term averaged over the
/// matched pairs.
///
/// `logits`: `[N,2]` (no-person, person); `locs`: `[N,2]` normalized
/// locations; `gts` normalized ground-truth points; `matched` from
/// [`match_queries`].
pub fn point_query_loss(
    g: &mut Graph,
    logits: Var,
    locs: Var,
    gts: &[(f64, f64)],
    matched: &MatchResult,
    lambda_loc: f64,
) -> Result<Var> {
    let n = g.value(logits).dim(0);
    if g.value(logits).dim(1) != 2 {
        return Err(Error::Dim("classification logits must be [N,2]".into()));
    }
    if matched.labels.len() != n {
        return Err(Error::Dim("match labels disagree with query count".into()));
    }

    // cross entropy via stable log-softmax and a one-hot label mask
    let lsm = g.log_softmax(logits, 1)?;
    let mut mask = vec![0.0; n * 2];
    for (i, &is_person) in matched.labels.iter().enumerate() {
        mask[i * 2 + usize::from(is_person)] = 1.0;
    }
    let mask = g.constant(Tensor::new(vec![n, 2], mask)?)?;
    let picked = g.mul(lsm, mask)?;
    let summed = g.sum(picked)?;
    let cls = g.scale(summed, -1.0 / n as f64)?;

    let m = gts.len();
    if m == 0 {
        return Ok(cls);
    }
    let rows: Vec<Option<usize>> = matched.assignment.iter().map(|&q| Some(q)).collect();
    let matched_locs = g.gather_rows(locs, &rows)?;
    let target = g.constant(Tensor::new(
        vec![m, 2],
        gts.iter().flat_map(|&(x, y)| [x, y]).collect(),
    )?)?;
    let hub = g.huber(matched_locs, target)?;
    let loc_sum = g.sum(hub)?;
    let loc = g.scale(loc_sum, lambda_loc / m as f64)?;
    g.add(cls, loc)
}

/// Split-map supervision: `1(dense) * (1 - max(M_s)) + min(M_s)`.
/// The gradient flows through the max/min selections.
pub fn split_loss(g: &mut Graph, split_map: Var, is_dense: bool) -> Result<Var> {
    if g.value(split_map).numel() == 0 {
        return Err(Error::Contract("split loss on an empty map".into()));
    }
    let mn = g.reduce_min(split_map)?;
    if !is_dense {
        return Ok(mn);
    }
    let mx = g.reduce_max(split_map)?;
    let neg = g.scale(mx, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    g.add(one_minus, mn)
}

/// Per-image loss terms ready for dual supervision.
pub struct ImageLossTerms {
    pub point_query: Var,
    pub split: Var,
    pub is_dense: bool,
}

/// Dense/sparse pack weights for a batch: each image's loss is averaged
/// within its pack and the two pack losses are summed.
pub fn pack_weights(dense_flags: &[bool]) -> Vec<f64> {
    let dense = dense_flags.iter().filter(|d| **d).count();
    let sparse = dense_flags.len() - dense;
    dense_flags
        .iter()
        .map(|&d| {
            if d {
                1.0 / dense.max(1) as f64
            } else {
                1.0 / sparse.max(1) as f64
            }
        })
        .collect()
}

/// Total batch loss: images split into sparse and dense packs, each pack
/// averaged separately, and the two pack losses summed.
pub fn total_loss(g: &mut Graph, images: &[ImageLossTerms], lambda_split: f64) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::Contract("total loss of an empty batch".into()));
    }
    let weights = pack_weights(&images.iter().map(|i| i.is_dense).collect::<Vec<_>>());
    let mut acc: Option<Var> = None;
    for (img, &w) in images.iter().zip(&weights) {
        let split_term = g.scale(img.split, lambda_split)?;
        let per_image = g.add(img.point_query, split_term)?;
        let weighted = g.scale(per_image, w)?;
        acc = Some(match acc {
            None => weighted,
            Some(a) => g.add(a, weighted)?,
        });
    }
    Ok(acc.unwrap())
}
