//! Synthetic grounding data and the end-to-end training harness.
//!
//! Each synthetic image holds a few objects with distinct classes. Proposals
//! are jittered copies of the objects plus distractor boxes whose classes do
//! not occur among the image's objects. A query names one object through a
//! noisy class embedding, so grounding requires matching the text class with
//! the proposal's visual class. Visual features of copies also carry a noisy
//! hint of the offset back to the object box, standing in for the box
//! evidence a real detector's features contain.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::evalio::{feature_dims, is_accurate, is_point_hit, merge_gt_boxes, GroundingExample, PredictionRecord};
use crate::geometry::{corners_to_center, CenterBox, CornerBox};
use crate::losses::{compute_loss, GroundingKind, LossConfig, LossOutput, RefinementKind};
use crate::model::{
    adam_step, backward, exponential_lr, forward, AdamConfig, AdamState, ForwardPass, HeadParameters, Proposal,
    Query, DEFAULT_LEAKY_SLOPE,
};
use crate::targets::{build_target, iou_matrix, ClassDistribution, TargetBundle};

/// Environment variable capping the evaluation thread pool.
pub const THREADS_ENV: &str = "GROUNDING_LOSS_THREADS";

/// Scale applied to the offset hint carried in copy visual features.
const HINT_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_examples: usize,
    /// Proposals per image.
    pub k: usize,
    pub n_classes: usize,
    pub text_dim: usize,
    /// Includes the four offset-hint dimensions.
    pub visual_dim: usize,
    pub objects_per_image: usize,
    pub queries_per_image: usize,
    /// Number of proposal slots filled with distractors when `k` allows.
    pub distractors: usize,
    /// Jitter of copies, relative to object size.
    pub box_noise: f64,
    /// Softmax temperature turning class one-hots into distributions.
    pub class_temperature: f64,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_examples: 2000,
            k: 16,
            n_classes: 8,
            text_dim: 16,
            visual_dim: 32,
            objects_per_image: 4,
            queries_per_image: 2,
            distractors: 8,
            box_noise: 0.2,
            class_temperature: 0.3,
            feature_noise: 1.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_classes < 2 || self.text_dim == 0 || self.visual_dim < 5 {
            return Err(invalid(
                "synthetic config needs k >= 1, at least 2 classes, text_dim >= 1 and visual_dim >= 5",
            ));
        }
        if self.objects_per_image == 0 || self.queries_per_image == 0 {
            return Err(invalid("objects_per_image and queries_per_image must be positive"));
        }
        if !(self.box_noise >= 0.0 && self.feature_noise >= 0.0 && self.class_temperature > 0.0) {
            return Err(invalid("noise scales must be nonnegative and the temperature positive"));
        }
        Ok(())
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn clip_box(b: CornerBox, w: f64, h: f64) -> CornerBox {
    let x1 = b.x1.clamp(0.0, w);
    let y1 = b.y1.clamp(0.0, h);
    CornerBox {
        x1,
        y1,
        x2: b.x2.clamp(x1, w),
        y2: b.y2.clamp(y1, h),
    }
}

fn l1_unit(v: Vec<f64>) -> Vec<f64> {
    let n: f64 = v.iter().map(|x| x.abs()).sum();
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

fn class_distribution<R: Rng>(class: usize, cfg: &SynthConfig, rng: &mut R) -> ClassDistribution {
    let logits: Vec<f64> = (0..cfg.n_classes)
        .map(|c| (if c == class { 1.0 } else { 0.0 } + 0.1 * normal(rng)) / cfg.class_temperature)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    // renormalize after rounding so the row sums to 1 as tightly as floating point allows
    let s: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= s);
    ClassDistribution::new(probs).expect("softmax output is a distribution")
}

fn random_object_box<R: Rng>(w: f64, h: f64, rng: &mut R) -> CornerBox {
    let bw = rng.random_range(0.15..0.45) * w;
    let bh = rng.random_range(0.15..0.45) * h;
    let x1 = rng.random_range(0.0..(w - bw));
    let y1 = rng.random_range(0.0..(h - bh));
    CornerBox {
        x1,
        y1,
        x2: x1 + bw,
        y2: y1 + bh,
    }
}

/// Generates a deterministic synthetic dataset.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Vec<GroundingExample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hint_dims = 4;
    let class_dim = cfg.visual_dim - hint_dims;
    let text_emb: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| (0..cfg.text_dim).map(|_| normal(&mut rng)).collect())
        .collect();
    let vis_emb: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| (0..class_dim).map(|_| normal(&mut rng)).collect())
        .collect();

    let mut dataset = Vec::with_capacity(cfg.n_examples);
    for idx in 0..cfg.n_examples {
        let image_w = rng.random_range(320..=640) as f64;
        let image_h = rng.random_range(320..=640) as f64;

        let copy_slots = cfg.k.saturating_sub(cfg.distractors).max(1);
        let n_objects = cfg.objects_per_image.min(copy_slots).min(cfg.n_classes);
        let mut classes: Vec<usize> = (0..cfg.n_classes).collect();
        classes.shuffle(&mut rng);
        let object_classes = classes[..n_objects].to_vec();
        let absent = &classes[n_objects..];
        let objects: Vec<CornerBox> = (0..n_objects).map(|_| random_object_box(image_w, image_h, &mut rng)).collect();

        let visual = |class: usize, hint: [f64; 4], rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut v: Vec<f64> = vis_emb[class].iter().map(|e| e + cfg.feature_noise * normal(rng)).collect();
            v.extend(hint.iter().map(|hv| HINT_SCALE * hv + 0.1 * cfg.feature_noise * normal(rng)));
            v
        };

        let mut proposals = Vec::with_capacity(cfg.k);
        for slot in 0..copy_slots {
            let o = slot % n_objects;
            let obj = objects[o];
            let (ow, oh) = (obj.width(), obj.height());
            let (ocx, ocy) = obj.center();
            let cx = ocx + cfg.box_noise * ow * normal(&mut rng);
            let cy = ocy + cfg.box_noise * oh * normal(&mut rng);
            let pw = ow * (cfg.box_noise * normal(&mut rng)).exp();
            let ph = oh * (cfg.box_noise * normal(&mut rng)).exp();
            let bbox = clip_box(
                CornerBox {
                    x1: cx - pw / 2.0,
                    y1: cy - ph / 2.0,
                    x2: cx + pw / 2.0,
                    y2: cy + ph / 2.0,
                },
                image_w,
                image_h,
            );
            let hint = offset_to(&bbox, &obj, image_w, image_h);
            proposals.push(Proposal {
                bbox,
                class_probs: class_distribution(object_classes[o], cfg, &mut rng),
                visual_feat: visual(object_classes[o], hint, &mut rng),
            });
        }
        while proposals.len() < cfg.k {
            let class = match absent.choose(&mut rng) {
                Some(&c) => c,
                None => rng.random_range(0..cfg.n_classes),
            };
            let bbox = random_object_box(image_w, image_h, &mut rng);
            let hint = [0.0; 4].map(|_: f64| 0.02 * normal(&mut rng));
            proposals.push(Proposal {
                bbox,
                class_probs: class_distribution(class, cfg, &mut rng),
                visual_feat: visual(class, hint, &mut rng),
            });
        }
        proposals.shuffle(&mut rng);

        let mut picks: Vec<usize> = (0..n_objects).collect();
        picks.shuffle(&mut rng);
        let queries = picks
            .iter()
            .take(cfg.queries_per_image)
            .map(|&o| Query {
                text_feat: l1_unit(
                    text_emb[object_classes[o]]
                        .iter()
                        .map(|e| e + cfg.feature_noise * normal(&mut rng))
                        .collect(),
                ),
                gt_boxes: vec![objects[o]],
            })
            .collect();

        dataset.push(GroundingExample {
            image_id: format!("synth-{idx:06}"),
            image_w,
            image_h,
            proposals,
            queries,
        });
    }
    Ok(dataset)
}

/// Normalized center-size offset taking `from` onto `to`.
fn offset_to(from: &CornerBox, to: &CornerBox, w: f64, h: f64) -> [f64; 4] {
    let a = corners_to_center(from, w, h).expect("positive image size");
    let b = corners_to_center(to, w, h).expect("positive image size");
    [b.cx - a.cx, b.cy - a.cy, b.w - a.w, b.h - a.h]
}

/// Which partition an example belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic split by a hash of the example index.
pub fn split_of(index: usize, val_fraction: f64, test_fraction: f64) -> Split {
    let u = (splitmix64(index as u64) >> 11) as f64 / (1u64 << 53) as f64;
    if u < val_fraction {
        Split::Val
    } else if u < val_fraction + test_fraction {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub lr0: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub hidden: usize,
    pub leaky_slope: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            epochs: 9,
            lr0: 0.001,
            decay: 0.9,
            batch_size: 1,
            seed: 7,
            val_fraction: 0.1,
            test_fraction: 0.1,
            hidden: 64,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(invalid(format!("learning rate must be nonnegative, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(invalid(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(invalid("batch size and hidden size must be positive"));
        }
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && self.val_fraction + self.test_fraction < 1.0) {
            return Err(invalid("val and test fractions must be nonnegative and sum below 1"));
        }
        Ok(())
    }
}

/// Precomputed supervision for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleTargets {
    /// Merged ground truth per query, pixels.
    pub gt_corners: Vec<CornerBox>,
    /// Merged ground truth per query, normalized center-size.
    pub gt_centers: Vec<CenterBox>,
    pub bundles: Vec<TargetBundle>,
}

pub fn example_targets(ex: &GroundingExample, loss: &LossConfig) -> Result<ExampleTargets> {
    let gt_corners = ex
        .queries
        .iter()
        .map(|q| merge_gt_boxes(&q.gt_boxes))
        .collect::<Result<Vec<_>>>()?;
    let gt_centers = gt_corners
        .iter()
        .map(|b| corners_to_center(b, ex.image_w, ex.image_h))
        .collect::<Result<Vec<_>>>()?;
    let boxes: Vec<CornerBox> = ex.proposals.iter().map(|p| p.bbox).collect();
    let classes: Vec<ClassDistribution> = ex.proposals.iter().map(|p| p.class_probs.clone()).collect();
    let bundles = if gt_corners.is_empty() {
        Vec::new()
    } else {
        iou_matrix(&gt_corners, &boxes)?
            .iter()
            .map(|u| build_target(u, &classes, loss.eta, loss.eps))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(ExampleTargets {
        gt_corners,
        gt_centers,
        bundles,
    })
}

/// Forward pass plus loss for one example.
pub fn example_loss(
    ex: &GroundingExample,
    targets: &ExampleTargets,
    params: &HeadParameters,
    loss: &LossConfig,
) -> Result<(ForwardPass, LossOutput)> {
    let pass = forward(&ex.head_input(), params)?;
    let out = compute_loss(loss, &pass.logits(), &pass.refined(), &targets.gt_centers, &targets.bundles)?;
    Ok((pass, out))
}

/// Loss and parameter gradient for one example.
pub fn example_gradient(
    ex: &GroundingExample,
    targets: &ExampleTargets,
    params: &HeadParameters,
    loss: &LossConfig,
) -> Result<(LossOutput, HeadParameters)> {
    let (pass, out) = example_loss(ex, targets, params, loss)?;
    let grads = backward(params, &pass, &out.grad_logits, &out.grad_boxes)?;
    Ok((out, grads))
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
            builder = builder.num_threads(n.max(1));
        }
        builder.build().expect("thread pool")
    })
}

/// Predicted pixel box for a query: the refined box of the top-scoring proposal.
pub fn predicted_corner(pred: &CenterBox, image_w: f64, image_h: f64) -> CornerBox {
    let w = pred.w.max(0.0) * image_w;
    let h = pred.h.max(0.0) * image_h;
    let (cx, cy) = (pred.cx * image_w, pred.cy * image_h);
    CornerBox {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    }
}

/// Predictions for every query of `examples`, in dataset order.
pub fn predict(examples: &[GroundingExample], params: &HeadParameters) -> Result<Vec<PredictionRecord>> {
    let per_example: Vec<Result<Vec<PredictionRecord>>> = pool().install(|| {
        examples
            .par_iter()
            .map(|ex| {
                let pass = forward(&ex.head_input(), params)?;
                Ok(pass
                    .outputs
                    .iter()
                    .enumerate()
                    .map(|(j, o)| PredictionRecord {
                        image_id: ex.image_id.clone(),
                        query_index: j,
                        bbox: predicted_corner(&o.predicted(), ex.image_w, ex.image_h),
                    })
                    .collect())
            })
            .collect()
    });
    let mut out = Vec::new();
    for r in per_example {
        out.extend(r?);
    }
    Ok(out)
}

/// Accuracy and point-game accuracy of `params` on a set of examples.
pub fn evaluate_params(examples: &[&GroundingExample], params: &HeadParameters) -> Result<(f64, f64, usize)> {
    let counts: Vec<Result<(usize, usize, usize)>> = pool().install(|| {
        examples
            .par_iter()
            .map(|ex| {
                let pass = forward(&ex.head_input(), params)?;
                let mut acc = 0;
                let mut point = 0;
                for (o, q) in pass.outputs.iter().zip(&ex.queries) {
                    let gt = merge_gt_boxes(&q.gt_boxes)?;
                    let pred = predicted_corner(&o.predicted(), ex.image_w, ex.image_h);
                    acc += is_accurate(&pred, &gt) as usize;
                    point += is_point_hit(&pred, &gt) as usize;
                }
                Ok((acc, point, ex.queries.len()))
            })
            .collect()
    });
    let (mut acc, mut point, mut n) = (0, 0, 0);
    for c in counts {
        let (a, p, q) = c?;
        acc += a;
        point += p;
        n += q;
    }
    if n == 0 {
        return Ok((0.0, 0.0, 0));
    }
    Ok((acc as f64 / n as f64, point as f64 / n as f64, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_pointgame: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_params: HeadParameters,
    pub params: HeadParameters,
    pub epochs: Vec<EpochMetrics>,
    pub val_accuracy: f64,
    pub val_pointgame: f64,
    pub test_accuracy: f64,
    pub test_pointgame: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl TrainReport {
    /// `epoch,train_loss,val_accuracy,val_pointgame` rows.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_accuracy,val_pointgame\n");
        for e in &self.epochs {
            writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, e.val_accuracy, e.val_pointgame).unwrap();
        }
        s
    }
}

fn check_finite(value: f64, example: usize, term: &'static str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            example,
            term,
            detail: format!("loss term evaluated to {value}"),
        })
    }
}

/// Trains a fresh head on the train split and evaluates it after every epoch.
pub fn train(dataset: &[GroundingExample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    let dims = feature_dims(dataset)?
        .ok_or_else(|| invalid("dataset has no queries"))?
        .model_dims(cfg.hidden);
    let targets = dataset
        .iter()
        .map(|ex| example_targets(ex, &cfg.loss))
        .collect::<Result<Vec<_>>>()?;

    let mut train_idx = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (i, ex) in dataset.iter().enumerate() {
        match split_of(i, cfg.val_fraction, cfg.test_fraction) {
            Split::Train if !ex.queries.is_empty() => train_idx.push(i),
            Split::Train => {}
            Split::Val => val.push(ex),
            Split::Test => test.push(ex),
        }
    }

    let initial_params = HeadParameters::init(dims, cfg.leaky_slope, cfg.seed);
    let mut params = initial_params.clone();
    let mut adam = AdamState::new(params.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_0DE5);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    let mut losses = vec![0.0; dataset.len()];

    for epoch in 0..cfg.epochs {
        let lr = exponential_lr(cfg.lr0, cfg.decay, epoch);
        order.shuffle(&mut rng);
        let mut acc = params.zeros_like();
        let mut in_batch = 0;
        for &i in &order {
            let (out, grads) = example_gradient(&dataset[i], &targets[i], &params, &cfg.loss)?;
            check_finite(out.grounding_value, i, "grounding")?;
            check_finite(out.refinement_value, i, "refinement")?;
            check_finite(out.total, i, "total")?;
            losses[i] = out.total;
            acc.add_scaled(&grads, 1.0);
            in_batch += 1;
            if in_batch == cfg.batch_size {
                acc.tensors_mut()
                    .into_iter()
                    .for_each(|t| t.iter_mut().for_each(|v| *v /= in_batch as f64));
                adam_step(&mut params, &acc, &mut adam, lr, &cfg.adam);
                acc = params.zeros_like();
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            acc.tensors_mut()
                .into_iter()
                .for_each(|t| t.iter_mut().for_each(|v| *v /= in_batch as f64));
            adam_step(&mut params, &acc, &mut adam, lr, &cfg.adam);
        }
        if !params.is_finite() {
            return Err(Error::Numerical {
                example: *order.last().unwrap_or(&0),
                term: "parameters",
                detail: format!("non-finite parameters after epoch {epoch}"),
            });
        }
        // index order, so the mean does not depend on the shuffle
        let train_loss = train_idx.iter().map(|&i| losses[i]).sum::<f64>() / train_idx.len().max(1) as f64;
        let (val_accuracy, val_pointgame, _) = evaluate_params(&val, &params)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss,
            val_accuracy,
            val_pointgame,
        });
    }

    let (val_accuracy, val_pointgame, _) = evaluate_params(&val, &params)?;
    let (test_accuracy, test_pointgame, _) = evaluate_params(&test, &params)?;
    Ok(TrainReport {
        initial_params,
        params,
        epochs,
        val_accuracy,
        val_pointgame,
        test_accuracy,
        test_pointgame,
        n_train: train_idx.len(),
        n_val: val.len(),
        n_test: test.len(),
    })
}

/// Grid over loss variants and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub grounding: Vec<GroundingKind>,
    pub refinement: Vec<RefinementKind>,
    pub eta: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            grounding: GroundingKind::ALL.to_vec(),
            refinement: RefinementKind::ALL.to_vec(),
            eta: vec![0.3, 0.4, 0.5],
            lambda: vec![0.8, 1.0, 1.4],
        }
    }
}

impl AblationGrid {
    pub fn single(loss: &LossConfig) -> Self {
        Self {
            grounding: vec![loss.grounding],
            refinement: vec![loss.refinement],
            eta: vec![loss.eta],
            lambda: vec![loss.lambda],
        }
    }

    pub fn cells(&self) -> Vec<(GroundingKind, RefinementKind, f64, f64)> {
        let mut out = Vec::new();
        for &g in &self.grounding {
            for &r in &self.refinement {
                for &eta in &self.eta {
                    for &lambda in &self.lambda {
                        out.push((g, r, eta, lambda));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub grounding: GroundingKind,
    pub refinement: RefinementKind,
    pub eta: f64,
    pub lambda: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// One training run per grid cell, all sharing `base`'s seeds.
pub fn ablate(dataset: &[GroundingExample], base: &TrainConfig, grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    let cells = grid.cells();
    let results: Vec<Result<AblationRow>> = pool().install(|| {
        cells
            .par_iter()
            .map(|&(grounding, refinement, eta, lambda)| {
                let cfg = TrainConfig {
                    loss: LossConfig {
                        grounding,
                        refinement,
                        eta,
                        lambda,
                        ..base.loss
                    },
                    ..base.clone()
                };
                let report = train(dataset, &cfg)?;
                Ok(AblationRow {
                    grounding,
                    refinement,
                    eta,
                    lambda,
                    val_acc: report.val_accuracy,
                    test_acc: report.test_accuracy,
                })
            })
            .collect()
    });
    results.into_iter().collect()
}

/// `grounding,refinement,eta,lambda,val_acc,test_acc` rows.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("grounding,refinement,eta,lambda,val_acc,test_acc\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.grounding, r.refinement, r.eta, r.lambda, r.val_acc, r.test_acc
        )
        .unwrap();
    }
    s
}

pub fn write_text(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    std::fs::write(path, contents)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    fn small() -> SynthConfig {
        SynthConfig {
            n_examples: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generator_is_deterministic() {
        assert_eq!(gen_synthetic(&small()).unwrap(), gen_synthetic(&small()).unwrap());
        let other = SynthConfig { seed: 8, ..small() };
        assert_ne!(gen_synthetic(&small()).unwrap(), gen_synthetic(&other).unwrap());
    }

    #[test]
    fn zero_noise_has_exact_copies() {
        let cfg = SynthConfig {
            box_noise: 0.0,
            ..small()
        };
        for ex in gen_synthetic(&cfg).unwrap() {
            ex.validate().unwrap();
            for q in &ex.queries {
                let best = ex.proposals.iter().map(|p| iou(&p.bbox, &q.gt_boxes[0])).fold(0.0, f64::max);
                assert!((best - 1.0).abs() < 1e-12, "{best}");
            }
        }
    }

    #[test]
    fn single_proposal_config() {
        let cfg = SynthConfig {
            k: 1,
            n_examples: 5,
            ..SynthConfig::default()
        };
        for ex in gen_synthetic(&cfg).unwrap() {
            ex.validate().unwrap();
            assert_eq!(ex.proposals.len(), 1);
            assert_eq!(ex.queries.len(), 1);
        }
    }

    #[test]
    fn split_is_stable_and_roughly_proportional() {
        let n = 10_000;
        let val = (0..n).filter(|&i| split_of(i, 0.1, 0.1) == Split::Val).count();
        let test = (0..n).filter(|&i| split_of(i, 0.1, 0.1) == Split::Test).count();
        assert!((800..1200).contains(&val) && (800..1200).contains(&test));
        assert_eq!(split_of(17, 0.1, 0.1), split_of(17, 0.1, 0.1));
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let data = gen_synthetic(&small()).unwrap();
        let cfg = TrainConfig {
            lr0: 0.0,
            epochs: 3,
            hidden: 8,
            ..TrainConfig::default()
        };
        let r = train(&data, &cfg).unwrap();
        assert_eq!(r.params, r.initial_params);
        assert!(r.epochs.windows(2).all(|w| w[0].train_loss == w[1].train_loss
            && w[0].val_accuracy == w[1].val_accuracy
            && w[0].val_pointgame == w[1].val_pointgame));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = gen_synthetic(&small()).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            hidden: 8,
            ..TrainConfig::default()
        };
        let r = train(&data, &cfg).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(r.params, HeadParameters::init(r.params.dims, cfg.leaky_slope, cfg.seed));
    }

    #[test]
    fn single_cell_grid_matches_train() {
        let data = gen_synthetic(&small()).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            hidden: 8,
            ..TrainConfig::default()
        };
        let rows = ablate(&data, &cfg, &AblationGrid::single(&cfg.loss)).unwrap();
        let r = train(&data, &cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].val_acc, r.val_accuracy);
        assert_eq!(rows[0].test_acc, r.test_accuracy);
    }

    #[test]
    fn rejects_bad_configs() {
        let data = gen_synthetic(&small()).unwrap();
        assert!(train(&[], &TrainConfig::default()).is_err());
        let bad = TrainConfig {
            decay: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&data, &bad).is_err());
        assert!(gen_synthetic(&SynthConfig { n_classes: 1, ..small() }).is_err());
    }
}
