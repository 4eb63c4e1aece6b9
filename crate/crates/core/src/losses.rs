//! Grounding losses (semantic KL, plain KL, cross-entropy), refinement
//! losses (semantic-weighted CIoU, Smooth-L1 on the best proposal) and the
//! combined objective, each with gradients with respect to the model outputs.
//!
//! Grounding losses take per-query logit rows and differentiate through the
//! softmax. Refinement losses take the refined boxes of every (query,
//! proposal) pair in normalized center-size form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{ciou_loss_and_grad, smooth_l1, CenterBox, CiouOptions};
use crate::targets::{build_plain_target, TargetBundle, DEFAULT_WEIGHT_EPS};

pub const DEFAULT_KL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundingKind {
    /// Cross-entropy against the best proposal.
    Ce,
    /// KL divergence to the thresholded IoU distribution.
    Kl,
    /// KL divergence to the IoU distribution weighted by class similarity.
    KlSem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinementKind {
    /// Smooth-L1 on the best proposal only.
    SmoothL1,
    /// CIoU over the support set, weighted by the normalized masked scores.
    CiouSem,
}

impl GroundingKind {
    pub const ALL: [GroundingKind; 3] = [GroundingKind::Ce, GroundingKind::Kl, GroundingKind::KlSem];

    pub fn as_str(&self) -> &'static str {
        match self {
            GroundingKind::Ce => "ce",
            GroundingKind::Kl => "kl",
            GroundingKind::KlSem => "klsem",
        }
    }
}

impl RefinementKind {
    pub const ALL: [RefinementKind; 2] = [RefinementKind::SmoothL1, RefinementKind::CiouSem];

    pub fn as_str(&self) -> &'static str {
        match self {
            RefinementKind::SmoothL1 => "smoothl1",
            RefinementKind::CiouSem => "ciousem",
        }
    }
}

impl fmt::Display for GroundingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for RefinementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroundingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(GroundingKind::Ce),
            "kl" => Ok(GroundingKind::Kl),
            "klsem" | "kl-sem" => Ok(GroundingKind::KlSem),
            other => Err(format!("unknown grounding loss '{other}' (expected ce, kl or klsem)")),
        }
    }
}

impl FromStr for RefinementKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "smoothl1" | "smooth-l1" => Ok(RefinementKind::SmoothL1),
            "ciousem" | "ciou-sem" => Ok(RefinementKind::CiouSem),
            other => Err(format!("unknown refinement loss '{other}' (expected smoothl1 or ciousem)")),
        }
    }
}

/// Loss variant and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub grounding: GroundingKind,
    pub refinement: RefinementKind,
    /// IoU threshold for the masked scores.
    pub eta: f64,
    /// Weight of the refinement term.
    pub lambda: f64,
    /// Added to the row maximum when normalizing refinement weights.
    pub eps: f64,
    /// Floor on target probabilities inside the KL logarithm.
    pub eps_kl: f64,
    pub ciou: CiouOptions,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::flickr30k()
    }
}

impl LossConfig {
    /// KL-Sem + CIoU-Sem with eta = 0.3, lambda = 1.
    pub fn flickr30k() -> Self {
        Self {
            grounding: GroundingKind::KlSem,
            refinement: RefinementKind::CiouSem,
            eta: 0.3,
            lambda: 1.0,
            eps: DEFAULT_WEIGHT_EPS,
            eps_kl: DEFAULT_KL_EPS,
            ciou: CiouOptions::default(),
        }
    }

    /// KL-Sem + CIoU-Sem with eta = 0.5, lambda = 1.4.
    pub fn referit() -> Self {
        Self {
            eta: 0.5,
            lambda: 1.4,
            ..Self::flickr30k()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.eps > 0.0 && self.eps_kl > 0.0) {
            return Err(invalid("eps and eps_kl must be positive"));
        }
        Ok(())
    }
}

/// Value and logit gradient of a grounding loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingPart {
    pub value: f64,
    pub grad_logits: Vec<Vec<f64>>,
}

/// Value and per-(query, proposal) box gradient of a refinement loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementPart {
    pub value: f64,
    pub grad_boxes: Vec<Vec<[f64; 4]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub grounding_value: f64,
    pub refinement_value: f64,
    pub total: f64,
    pub grad_logits: Vec<Vec<f64>>,
    /// Already scaled by lambda.
    pub grad_boxes: Vec<Vec<[f64; 4]>>,
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn check_rows(a: &[Vec<f64>], b_len: usize, b_rows: usize) -> Result<()> {
    if a.is_empty() {
        return Err(invalid("no query rows"));
    }
    if a.len() != b_rows {
        return Err(invalid(format!("{} logit rows for {} targets", a.len(), b_rows)));
    }
    if a.iter().any(|r| r.len() != b_len || r.is_empty()) {
        return Err(invalid(format!("logit rows must all have length {b_len}")));
    }
    Ok(())
}

/// `(1/m) sum_j KL(P_j || T_j)` with `P_j = softmax(logits_j)`.
///
/// Target entries are floored at `eps_kl` inside the logarithm, so the value
/// can dip below zero by at most about `k * eps_kl`.
pub fn kl_grounding_loss(logits: &[Vec<f64>], targets: &[Vec<f64>], eps_kl: f64) -> Result<GroundingPart> {
    let k = targets.first().map_or(0, Vec::len);
    check_rows(logits, k, targets.len())?;
    if targets.iter().any(|t| t.len() != k) {
        return Err(invalid("target rows have inconsistent lengths"));
    }
    let m = logits.len() as f64;
    let mut value = 0.0;
    let mut grad_logits = Vec::with_capacity(logits.len());
    for (row, target) in logits.iter().zip(targets) {
        let logp = log_softmax(row);
        let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let r: Vec<f64> = logp
            .iter()
            .zip(target)
            .map(|(lp, t)| lp - t.max(eps_kl).ln())
            .collect();
        let kl: f64 = p.iter().zip(&r).map(|(pi, ri)| pi * ri).sum();
        value += kl;
        grad_logits.push(p.iter().zip(&r).map(|(pi, ri)| pi * (ri - kl) / m).collect());
    }
    Ok(GroundingPart {
        value: value / m,
        grad_logits,
    })
}

/// `-(1/m) sum_j log softmax(logits_j)[j*_j]`.
pub fn ce_grounding_loss(logits: &[Vec<f64>], j_stars: &[usize]) -> Result<GroundingPart> {
    let k = logits.first().map_or(0, Vec::len);
    check_rows(logits, k, j_stars.len())?;
    if let Some(&bad) = j_stars.iter().find(|&&j| j >= k) {
        return Err(invalid(format!("best-proposal index {bad} out of range for {k} proposals")));
    }
    let m = logits.len() as f64;
    let mut value = 0.0;
    let mut grad_logits = Vec::with_capacity(logits.len());
    for (row, &j) in logits.iter().zip(j_stars) {
        let logp = log_softmax(row);
        value -= logp[j];
        let mut g: Vec<f64> = logp.iter().map(|l| l.exp() / m).collect();
        g[j] -= 1.0 / m;
        grad_logits.push(g);
    }
    Ok(GroundingPart {
        value: value / m,
        grad_logits,
    })
}

fn check_boxes(refined: &[Vec<CenterBox>], gt: &[CenterBox], n: usize) -> Result<usize> {
    if refined.is_empty() || refined.len() != gt.len() || gt.len() != n {
        return Err(invalid(format!(
            "{} refined rows, {} gt boxes, {} query targets",
            refined.len(),
            gt.len(),
            n
        )));
    }
    let k = refined[0].len();
    if k == 0 || refined.iter().any(|r| r.len() != k) {
        return Err(invalid("refined box rows must be nonempty and of equal length"));
    }
    Ok(k)
}

/// `(1/m) sum_j sum_{z in S_j} u_hat[j][z] * CIoU(refined[j][z], gt_j)`.
///
/// Pairs outside the support get an exactly zero gradient.
pub fn ciou_sem_refinement_loss(
    refined: &[Vec<CenterBox>],
    gt: &[CenterBox],
    bundles: &[TargetBundle],
    opts: CiouOptions,
) -> Result<RefinementPart> {
    let k = check_boxes(refined, gt, bundles.len())?;
    let m = refined.len() as f64;
    let mut value = 0.0;
    let mut grad_boxes = vec![vec![[0.0; 4]; k]; refined.len()];
    for (j, bundle) in bundles.iter().enumerate() {
        if bundle.u_hat_row.len() != k {
            return Err(invalid(format!("target bundle {j} covers {} proposals, expected {k}", bundle.u_hat_row.len())));
        }
        for &z in &bundle.support {
            let weight = bundle.u_hat_row[z];
            let (b, g) = ciou_loss_and_grad(&refined[j][z], &gt[j], opts)?;
            value += weight * b.total;
            grad_boxes[j][z] = g.map(|gi| weight * gi / m);
        }
    }
    Ok(RefinementPart {
        value: value / m,
        grad_boxes,
    })
}

/// `(1/m) sum_j smoothL1(refined[j][j*_j], gt_j)`.
pub fn smooth_l1_refinement_loss(
    refined: &[Vec<CenterBox>],
    gt: &[CenterBox],
    j_stars: &[usize],
) -> Result<RefinementPart> {
    let k = check_boxes(refined, gt, j_stars.len())?;
    if let Some(&bad) = j_stars.iter().find(|&&j| j >= k) {
        return Err(invalid(format!("best-proposal index {bad} out of range for {k} proposals")));
    }
    let m = refined.len() as f64;
    let mut value = 0.0;
    let mut grad_boxes = vec![vec![[0.0; 4]; k]; refined.len()];
    for (j, &z) in j_stars.iter().enumerate() {
        let (v, g) = smooth_l1(&refined[j][z], &gt[j]);
        value += v;
        grad_boxes[j][z] = g.map(|gi| gi / m);
    }
    Ok(RefinementPart {
        value: value / m,
        grad_boxes,
    })
}

/// `L = L_g + lambda * L_c`, with box gradients scaled by lambda.
pub fn total_loss(config: &LossConfig, grounding: GroundingPart, refinement: RefinementPart) -> LossOutput {
    let lambda = config.lambda;
    let grad_boxes = refinement
        .grad_boxes
        .into_iter()
        .map(|row| row.into_iter().map(|g| g.map(|gi| lambda * gi)).collect())
        .collect();
    LossOutput {
        grounding_value: grounding.value,
        refinement_value: refinement.value,
        total: grounding.value + lambda * refinement.value,
        grad_logits: grounding.grad_logits,
        grad_boxes,
    }
}

/// Grounding term selected by `config`. `bundles` are the semantic targets.
pub fn grounding_loss(config: &LossConfig, logits: &[Vec<f64>], bundles: &[TargetBundle]) -> Result<GroundingPart> {
    match config.grounding {
        GroundingKind::Ce => {
            let j_stars: Vec<usize> = bundles.iter().map(|b| b.j_star).collect();
            ce_grounding_loss(logits, &j_stars)
        }
        GroundingKind::KlSem => {
            let targets: Vec<Vec<f64>> = bundles.iter().map(|b| b.p_target_row.clone()).collect();
            kl_grounding_loss(logits, &targets, config.eps_kl)
        }
        GroundingKind::Kl => {
            let targets = bundles
                .iter()
                .map(|b| build_plain_target(&b.u_row, config.eta, config.eps).map(|t| t.p_target_row))
                .collect::<Result<Vec<_>>>()?;
            kl_grounding_loss(logits, &targets, config.eps_kl)
        }
    }
}

/// Refinement term selected by `config`.
pub fn refinement_loss(
    config: &LossConfig,
    refined: &[Vec<CenterBox>],
    gt: &[CenterBox],
    bundles: &[TargetBundle],
) -> Result<RefinementPart> {
    match config.refinement {
        RefinementKind::CiouSem => ciou_sem_refinement_loss(refined, gt, bundles, config.ciou),
        RefinementKind::SmoothL1 => {
            let j_stars: Vec<usize> = bundles.iter().map(|b| b.j_star).collect();
            smooth_l1_refinement_loss(refined, gt, &j_stars)
        }
    }
}

/// Full objective for one example.
pub fn compute_loss(
    config: &LossConfig,
    logits: &[Vec<f64>],
    refined: &[Vec<CenterBox>],
    gt: &[CenterBox],
    bundles: &[TargetBundle],
) -> Result<LossOutput> {
    let g = grounding_loss(config, logits, bundles)?;
    let r = refinement_loss(config, refined, gt, bundles)?;
    Ok(total_loss(config, g, r))
}
