//! Counting metrics (MAE / MSE) and point-localization metrics
//! (F1 / precision / recall under one-to-one matching within a distance
//! threshold).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{assign, CostMatrix};

/// Sentinel cost for pairs beyond the distance threshold. Larger than any
/// achievable sum of real distances, so minimizing total cost maximizes the
/// number of real matches first.
const FORBIDDEN: f64 = 1e12;

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdMetrics {
    pub sigma: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mae: f64,
    /// Root of the mean squared count error (field convention).
    pub mse: f64,
    pub thresholds: Vec<ThresholdMetrics>,
    pub n_images: usize,
}

/// MAE and MSE over per-image counts.
pub fn count_metrics(pred_counts: &[f64], gt_counts: &[f64]) -> Result<(f64, f64)> {
    if pred_counts.len() != gt_counts.len() || pred_counts.is_empty() {
        return Err(Error::Contract(format!(
            "count lists must be equal-length and nonempty ({} vs {})",
            pred_counts.len(),
            gt_counts.len()
        )));
    }
    let n = pred_counts.len() as f64;
    let mae = pred_counts
        .iter()
        .zip(gt_counts)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n;
    let mse = (pred_counts
        .iter()
        .zip(gt_counts)
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok((mae, mse))
}

/// Optimal one-to-one matching restricted to pairs within `sigma` pixels.
/// Returns (tp, fp, false_negatives).
pub fn match_within(preds: &[(f64, f64)], gts: &[(f64, f64)], sigma: f64) -> (usize, usize, usize) {
    assert!(sigma > 0.0, "sigma must be positive");
    if preds.is_empty() || gts.is_empty() {
        return (0, preds.len(), gts.len());
    }
    // rows must be the larger side for the solver
    let swap = preds.len() < gts.len();
    let (rows_pts, cols_pts) = if swap { (gts, preds) } else { (preds, gts) };
    let mut data = Vec::with_capacity(rows_pts.len() * cols_pts.len());
    for &(rx, ry) in rows_pts {
        for &(cx, cy) in cols_pts {
            let d = ((rx - cx).powi(2) + (ry - cy).powi(2)).sqrt();
            data.push(if d <= sigma { d } else { FORBIDDEN });
        }
    }
    let cost = CostMatrix::new(rows_pts.len(), cols_pts.len(), data).expect("finite costs");
    let assignment = assign(&cost).expect("rows >= cols by construction");
    let tp = assignment
        .iter()
        .enumerate()
        .filter(|&(col, &row)| cost.at(row, col) < FORBIDDEN)
        .count();
    (tp, preds.len() - tp, gts.len() - tp)
}

/// Precision/recall/F1 from accumulated pair counts; 0/0 ratios become 0.
pub fn prf(tp: usize, fp: usize, false_negatives: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + false_negatives == 0 {
        0.0
    } else {
        tp as f64 / (tp + false_negatives) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (f1, precision, recall)
}

/// Full evaluation over (predicted points, ground-truth points) pairs,
/// micro-averaging localization counts across images.
pub fn evaluate(
    pairs: &[(Vec<(f64, f64)>, Vec<(f64, f64)>)],
    sigmas: &[f64],
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("evaluate needs at least one image".into()));
    }
    let pred_counts: Vec<f64> = pairs.iter().map(|(p, _)| p.len() as f64).collect();
    let gt_counts: Vec<f64> = pairs.iter().map(|(_, g)| g.len() as f64).collect();
    let (mae, mse) = count_metrics(&pred_counts, &gt_counts)?;

    let mut thresholds = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        if sigma <= 0.0 {
            return Err(Error::Contract(format!("sigma {sigma} must be positive")));
        }
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (preds, gts) in pairs {
            let (t, f, n) = match_within(preds, gts, sigma);
            tp += t;
            fp += f;
            fneg += n;
        }
        let (f1, precision, recall) = prf(tp, fp, fneg);
        thresholds.push(ThresholdMetrics {
            sigma,
            f1,
            precision,
            recall,
            tp,
            fp,
            false_negatives: fneg,
        });
    }
    Ok(EvalReport {
        mae,
        mse,
        thresholds,
        n_images: pairs.len(),
    })
}

impl EvalReport {
    /// Plain-text table alongside the JSON document.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "images: {}\nMAE: {:.4}\nMSE: {:.4}\n",
            self.n_images, self.mae, self.mse
        ));
        out.push_str("sigma    F1      Prec    Rec     TP     FP     FN\n");
        for t in &self.thresholds {
            out.push_str(&format!(
                "{:<8.1} {:<7.4} {:<7.4} {:<7.4} {:<6} {:<6} {:<6}\n",
                t.sigma, t.f1, t.precision, t.recall, t.tp, t.fp, t.false_negatives
            ));
        }
        out
    }
}
