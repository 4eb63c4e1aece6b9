//! Per-query supervision: IoU scores against every proposal, the best
//! proposal, semantic similarity to it, the thresholded scores, and the
//! derived target distribution and refinement weights.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{iou, CornerBox};

/// Default `eps` in the refinement-weight normalization.
pub const DEFAULT_WEIGHT_EPS: f64 = 1e-8;

/// Detector class-probability vector for one proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    /// Validates nonnegativity and that the entries sum to 1 within 1e-6.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("class distribution is empty"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("class distribution has negative or non-finite entries"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("class distribution sums to {sum}, expected 1")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Supervision derived for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBundle {
    pub u_row: Vec<f64>,
    pub j_star: usize,
    pub c_row: Vec<f64>,
    pub u_star_row: Vec<f64>,
    pub p_target_row: Vec<f64>,
    /// Proposals with strictly positive masked score, ascending.
    pub support: Vec<usize>,
    pub u_hat_row: Vec<f64>,
    /// No proposal reached the threshold; the target fell back to one-hot at `j_star`.
    pub fallback_used: bool,
}

/// `U[j][z] = iou(gt_j, proposal_z)`.
pub fn iou_matrix(gt_boxes: &[CornerBox], proposals: &[CornerBox]) -> Result<Vec<Vec<f64>>> {
    if gt_boxes.is_empty() || proposals.is_empty() {
        return Err(invalid(format!(
            "iou matrix needs at least one gt box and one proposal (got {} and {})",
            gt_boxes.len(),
            proposals.len()
        )));
    }
    Ok(gt_boxes
        .iter()
        .map(|g| proposals.iter().map(|p| iou(g, p)).collect())
        .collect())
}

/// Argmax of the row; ties go to the lowest index.
pub fn best_proposal(u_row: &[f64]) -> usize {
    let mut best = 0;
    for (z, &u) in u_row.iter().enumerate().skip(1) {
        if u > u_row[best] {
            best = z;
        }
    }
    best
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "cosine similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("cosine similarity of a zero-norm vector"));
    }
    Ok(dot / (na * nb))
}

/// Semantic target for one query from its IoU row and the proposals' class
/// distributions.
pub fn build_target(
    u_row: &[f64],
    class_probs: &[ClassDistribution],
    eta: f64,
    eps: f64,
) -> Result<TargetBundle> {
    if class_probs.len() != u_row.len() {
        return Err(invalid(format!(
            "{} class distributions for {} proposals",
            class_probs.len(),
            u_row.len()
        )));
    }
    if u_row.is_empty() {
        return Err(invalid("empty IoU row"));
    }
    let j_star = best_proposal(u_row);
    let anchor = class_probs[j_star].probs();
    let c_row = class_probs
        .iter()
        .enumerate()
        .map(|(z, p)| {
            if z == j_star {
                Ok(1.0)
            } else {
                cosine_similarity(anchor, p.probs()).map(|c| c.clamp(0.0, 1.0))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    build_target_from_similarity(u_row, &c_row, eta, eps)
}

/// Plain IoU target: the semantic target with every similarity equal to 1.
pub fn build_plain_target(u_row: &[f64], eta: f64, eps: f64) -> Result<TargetBundle> {
    build_target_from_similarity(u_row, &vec![1.0; u_row.len()], eta, eps)
}

/// Target construction given an explicit similarity row.
pub fn build_target_from_similarity(u_row: &[f64], c_row: &[f64], eta: f64, eps: f64) -> Result<TargetBundle> {
    if u_row.is_empty() || u_row.len() != c_row.len() {
        return Err(invalid(format!(
            "IoU row of length {} with similarity row of length {}",
            u_row.len(),
            c_row.len()
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(invalid(format!("eta must lie in [0, 1], got {eta}")));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(invalid(format!("eps must be positive, got {eps}")));
    }
    let j_star = best_proposal(u_row);
    let u_star_row: Vec<f64> = u_row
        .iter()
        .zip(c_row)
        .map(|(&u, &c)| if u >= eta { u * c } else { 0.0 })
        .collect();
    let total: f64 = u_star_row.iter().sum();
    let fallback_used = total.is_nan() || total <= 0.0;
    let p_target_row = if fallback_used {
        let mut one_hot = vec![0.0; u_row.len()];
        one_hot[j_star] = 1.0;
        one_hot
    } else {
        u_star_row.iter().map(|u| u / total).collect()
    };
    let max = u_star_row.iter().cloned().fold(0.0, f64::max);
    let u_hat_row = u_star_row.iter().map(|u| u / (max + eps)).collect();
    let support = u_star_row
        .iter()
        .enumerate()
        .filter(|(_, &u)| u > 0.0)
        .map(|(z, _)| z)
        .collect();
    Ok(TargetBundle {
        u_row: u_row.to_vec(),
        j_star,
        c_row: c_row.to_vec(),
        u_star_row,
        p_target_row,
        support,
        u_hat_row,
        fallback_used,
    })
}
