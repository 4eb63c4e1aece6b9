//! Finite-difference checks of every analytic gradient in the crate.
//!
//! Each suite draws seeded random instances, evaluates the analytic gradient
//! and compares it with central differences of the corresponding loss value.
//! Instances sitting within a small margin of a kink (coincident box edges,
//! the Smooth-L1 transition, a leaky-relu pre-activation at zero) are redrawn,
//! since central differences straddling a kink do not estimate either
//! one-sided derivative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::evalio::GroundingExample;
use crate::geometry::{ciou_grad, ciou_loss, ciou_total_with_alpha, smooth_l1, CenterBox, CiouOptions};
use crate::losses::{ce_grounding_loss, kl_grounding_loss, softmax, GroundingKind, LossConfig, RefinementKind};
use crate::model::{forward, HeadParameters, ModelDims, Proposal, Query, DEFAULT_LEAKY_SLOPE};
use crate::targets::{build_target, ClassDistribution};
use crate::trainer::{example_gradient, example_loss, example_targets};
use crate::geometry::CornerBox;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor in the relative error. Components that are exactly zero
/// analytically (the logit bias under softmax shift invariance) come back
/// from central differences as rounding noise of order `1e-16 * L / FD_STEP`,
/// so they are compared absolutely against this floor.
pub const REL_FLOOR: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;

/// Central differences of `f` at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, REL_FLOOR)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl SuiteResult {
    fn new(name: &str, trials: usize, max_rel_error: f64) -> Self {
        Self {
            name: name.to_string(),
            trials,
            max_rel_error,
            passed: max_rel_error <= REL_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    /// 0 when every suite passes, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }
}

pub type CiouGradFn = dyn Fn(&CenterBox, &CenterBox, CiouOptions) -> Result<[f64; 4]>;

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() < KINK_MARGIN
}

/// A pair of boxes whose edges are pairwise separated by at least the kink margin.
pub fn random_box_pair<R: Rng>(rng: &mut R) -> (CenterBox, CenterBox) {
    loop {
        let mut draw = || {
            CenterBox::new(
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.05..0.5),
                rng.random_range(0.05..0.5),
            )
        };
        let (p, g) = (draw(), draw());
        let (pc, gc) = (p.to_corners(), g.to_corners());
        let xs = [pc.x1, pc.x2];
        let gxs = [gc.x1, gc.x2];
        let ys = [pc.y1, pc.y2];
        let gys = [gc.y1, gc.y2];
        let clash = xs.iter().any(|a| gxs.iter().any(|b| near(*a, *b)))
            || ys.iter().any(|a| gys.iter().any(|b| near(*a, *b)));
        if !clash {
            return (p, g);
        }
    }
}

/// CIoU gradient against central differences of the total, or of the
/// frozen-alpha total when `opts.alpha_constant` is set.
pub fn ciou_suite(seed: u64, trials: usize, opts: CiouOptions, grad_fn: &CiouGradFn) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (pred, gt) = random_box_pair(&mut rng);
        let analytic = grad_fn(&pred, &gt, opts)?;
        let alpha = ciou_loss(&pred, &gt, opts)?.alpha;
        let numeric = central_difference(
            |x| {
                let p = CenterBox::from_array([x[0], x[1], x[2], x[3]]);
                if opts.alpha_constant {
                    ciou_total_with_alpha(&p, &gt, opts, alpha).unwrap_or(f64::NAN)
                } else {
                    ciou_loss(&p, &gt, opts).map_or(f64::NAN, |b| b.total)
                }
            },
            &pred.to_array(),
            FD_STEP,
        );
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    let name = match (opts.alpha_constant, opts.v_unsquared) {
        (true, false) => "ciou (frozen alpha)",
        (false, false) => "ciou (full)",
        (true, true) => "ciou unsquared (frozen alpha)",
        (false, true) => "ciou unsquared (full)",
    };
    Ok(SuiteResult::new(name, trials, worst))
}

pub fn smooth_l1_suite(seed: u64, trials: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < trials {
        let gt = CenterBox::from_array([(); 4].map(|_| rng.random_range(0.0..1.0)));
        let pred = CenterBox::from_array([(); 4].map(|_| rng.random_range(-1.5..2.5)));
        if pred.to_array().iter().zip(gt.to_array()).any(|(p, g)| near((p - g).abs(), 1.0)) {
            continue;
        }
        let (_, analytic) = smooth_l1(&pred, &gt);
        let numeric = central_difference(
            |x| smooth_l1(&CenterBox::from_array([x[0], x[1], x[2], x[3]]), &gt).0,
            &pred.to_array(),
            FD_STEP,
        );
        worst = worst.max(max_rel_error(&analytic, &numeric));
        done += 1;
    }
    SuiteResult::new("smooth-l1", trials, worst)
}

fn random_logits<R: Rng>(rng: &mut R, m: usize, k: usize) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

fn flat_grounding_check(
    logits: &[Vec<f64>],
    analytic: &[Vec<f64>],
    value: impl Fn(&[Vec<f64>]) -> f64,
) -> f64 {
    let k = logits[0].len();
    let flat: Vec<f64> = logits.concat();
    let numeric = central_difference(
        |x| value(&x.chunks(k).map(<[f64]>::to_vec).collect::<Vec<_>>()),
        &flat,
        FD_STEP,
    );
    max_rel_error(&analytic.concat(), &numeric)
}

fn random_distribution<R: Rng>(rng: &mut R, k: usize, allow_zeros: bool) -> Vec<f64> {
    let raw: Vec<f64> = (0..k)
        .map(|_| {
            if allow_zeros && rng.random_bool(0.3) {
                0.0
            } else {
                rng.random_range(0.05..1.0)
            }
        })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        let mut one_hot = vec![0.0; k];
        one_hot[0] = 1.0;
        return one_hot;
    }
    raw.iter().map(|r| r / s).collect()
}

/// KL against random targets, some entries exactly zero.
pub fn kl_suite(seed: u64, trials: usize, eps_kl: f64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (m, k) = (rng.random_range(1..4), rng.random_range(2..7));
        let logits = random_logits(&mut rng, m, k);
        let targets: Vec<Vec<f64>> = (0..m).map(|_| random_distribution(&mut rng, k, true)).collect();
        let part = kl_grounding_loss(&logits, &targets, eps_kl)?;
        let err = flat_grounding_check(&logits, &part.grad_logits, |l| {
            kl_grounding_loss(l, &targets, eps_kl).map_or(f64::NAN, |p| p.value)
        });
        worst = worst.max(err);
    }
    Ok(SuiteResult::new("kl", trials, worst))
}

/// KL against semantic targets built from random IoU rows and class distributions.
pub fn klsem_suite(seed: u64, trials: usize, eta: f64, eps: f64, eps_kl: f64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (m, k, classes) = (rng.random_range(1..4), rng.random_range(2..7), rng.random_range(2..6));
        let logits = random_logits(&mut rng, m, k);
        let mut targets = Vec::with_capacity(m);
        for _ in 0..m {
            let u: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            let probs = (0..k)
                .map(|_| ClassDistribution::new(random_distribution(&mut rng, classes, false)))
                .collect::<Result<Vec<_>>>()?;
            targets.push(build_target(&u, &probs, eta, eps)?.p_target_row);
        }
        let part = kl_grounding_loss(&logits, &targets, eps_kl)?;
        let err = flat_grounding_check(&logits, &part.grad_logits, |l| {
            kl_grounding_loss(l, &targets, eps_kl).map_or(f64::NAN, |p| p.value)
        });
        worst = worst.max(err);
    }
    Ok(SuiteResult::new("kl-sem", trials, worst))
}

pub fn ce_suite(seed: u64, trials: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (m, k) = (rng.random_range(1..4), rng.random_range(2..7));
        let logits = random_logits(&mut rng, m, k);
        let j_stars: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let part = ce_grounding_loss(&logits, &j_stars)?;
        let err = flat_grounding_check(&logits, &part.grad_logits, |l| {
            ce_grounding_loss(l, &j_stars).map_or(f64::NAN, |p| p.value)
        });
        worst = worst.max(err);
    }
    Ok(SuiteResult::new("ce", trials, worst))
}

/// Dimensions of the small head used by the backward check.
pub const TINY_DIMS: ModelDims = ModelDims {
    text_dim: 4,
    visual_dim: 6,
    hidden: 8,
};
pub const TINY_K: usize = 3;

/// A random example for [`TINY_DIMS`] with `m` queries whose ground truth
/// overlaps at least one proposal.
pub fn tiny_example<R: Rng>(rng: &mut R, m: usize) -> GroundingExample {
    let size = 100.0;
    let rand_box = |rng: &mut R, around: Option<&CornerBox>| {
        let (cx, cy, w, h) = match around {
            Some(b) => {
                let (cx, cy) = b.center();
                (
                    cx + rng.random_range(-4.0..4.0),
                    cy + rng.random_range(-4.0..4.0),
                    b.width() * rng.random_range(0.8..1.2),
                    b.height() * rng.random_range(0.8..1.2),
                )
            }
            None => (
                rng.random_range(30.0..70.0),
                rng.random_range(30.0..70.0),
                rng.random_range(15.0..50.0),
                rng.random_range(15.0..50.0),
            ),
        };
        CornerBox {
            x1: (cx - w / 2.0).max(0.0),
            y1: (cy - h / 2.0).max(0.0),
            x2: (cx + w / 2.0).min(size),
            y2: (cy + h / 2.0).min(size),
        }
    };
    let classes = 3;
    let proposals: Vec<Proposal> = (0..TINY_K)
        .map(|_| Proposal {
            bbox: rand_box(rng, None),
            class_probs: ClassDistribution::new(random_distribution(rng, classes, false)).expect("distribution"),
            visual_feat: (0..TINY_DIMS.visual_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let queries = (0..m)
        .map(|_| {
            let anchor = proposals[rng.random_range(0..TINY_K)].bbox;
            Query {
                text_feat: (0..TINY_DIMS.text_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                gt_boxes: vec![rand_box(rng, Some(&anchor))],
            }
        })
        .collect();
    GroundingExample {
        image_id: "tiny".into(),
        image_w: size,
        image_h: size,
        proposals,
        queries,
    }
}

/// Xavier weights plus small random biases so every unit is exercised.
pub fn tiny_params<R: Rng>(rng: &mut R) -> HeadParameters {
    let mut p = HeadParameters::init(TINY_DIMS, DEFAULT_LEAKY_SLOPE, rng.random());
    for t in [&mut p.b_fuse, &mut p.b_g, &mut p.b_box] {
        t.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    }
    p
}

fn refined_edges_clear(ex: &GroundingExample, params: &HeadParameters) -> bool {
    let Ok(pass) = forward(&ex.head_input(), params) else {
        return false;
    };
    pass.outputs.iter().zip(&ex.queries).all(|(o, q)| {
        let g = q.gt_boxes[0];
        let gt = crate::geometry::corners_to_center(&g, ex.image_w, ex.image_h)
            .expect("positive size")
            .to_corners();
        o.refined.iter().all(|r| {
            let rc = r.to_corners();
            r.w > 2.0 * crate::geometry::WH_EPS
                && r.h > 2.0 * crate::geometry::WH_EPS
                && [rc.x1, rc.x2].iter().all(|a| !near(*a, gt.x1) && !near(*a, gt.x2))
                && [rc.y1, rc.y2].iter().all(|a| !near(*a, gt.y1) && !near(*a, gt.y2))
        })
    }) && pass.min_abs_preactivation() > 1e-4
}

/// Full head backward against central differences over every parameter.
pub fn head_suite(seed: u64, trials: usize, loss: LossConfig) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < trials {
        let m = rng.random_range(1..3);
        let ex = tiny_example(&mut rng, m);
        let params = tiny_params(&mut rng);
        if !refined_edges_clear(&ex, &params) {
            continue;
        }
        let targets = example_targets(&ex, &loss)?;
        let (_, grads) = example_gradient(&ex, &targets, &params, &loss)?;
        let mut probe = params.clone();
        let numeric = central_difference(
            |x| {
                probe.set_flat(x).expect("same layout");
                example_loss(&ex, &targets, &probe, &loss).map_or(f64::NAN, |(_, o)| o.total)
            },
            &params.flatten(),
            FD_STEP,
        );
        worst = worst.max(max_rel_error(&grads.flatten(), &numeric));
        done += 1;
    }
    let name = format!("head backward ({}+{})", loss.grounding, loss.refinement);
    Ok(SuiteResult::new(&name, trials, worst))
}

/// The loss configurations the head suite is run under.
pub fn head_configs() -> [LossConfig; 2] {
    let exact = CiouOptions {
        alpha_constant: false,
        ..CiouOptions::default()
    };
    [
        LossConfig {
            grounding: GroundingKind::KlSem,
            refinement: RefinementKind::CiouSem,
            ciou: exact,
            ..LossConfig::default()
        },
        LossConfig {
            grounding: GroundingKind::Ce,
            refinement: RefinementKind::SmoothL1,
            ..LossConfig::default()
        },
    ]
}

/// Every suite with the shipped gradient implementations.
pub fn run_all(seed: u64, trials: usize) -> Result<GradcheckReport> {
    if trials == 0 {
        return Ok(GradcheckReport { suites: Vec::new() });
    }
    let mut suites = Vec::new();
    for (i, opts) in [
        CiouOptions::default(),
        CiouOptions {
            alpha_constant: false,
            v_unsquared: false,
        },
        CiouOptions {
            alpha_constant: false,
            v_unsquared: true,
        },
    ]
    .into_iter()
    .enumerate()
    {
        suites.push(ciou_suite(seed.wrapping_add(i as u64), trials, opts, &ciou_grad)?);
    }
    let cfg = LossConfig::default();
    suites.push(smooth_l1_suite(seed.wrapping_add(10), trials));
    suites.push(kl_suite(seed.wrapping_add(11), trials, cfg.eps_kl)?);
    suites.push(klsem_suite(seed.wrapping_add(12), trials, cfg.eta, cfg.eps, cfg.eps_kl)?);
    suites.push(ce_suite(seed.wrapping_add(13), trials)?);
    for (i, loss) in head_configs().into_iter().enumerate() {
        suites.push(head_suite(seed.wrapping_add(20 + i as u64), trials, loss)?);
    }
    Ok(GradcheckReport { suites })
}

/// Softmax probabilities of a logit row, re-exported for callers building fixtures.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}
