//! Dataset and prediction files, ground-truth merging, evaluation metrics,
//! and parameter checkpoints.
//!
//! Datasets are line-delimited JSON, one [`GroundingExample`] per line:
//!
//! ```text
//! {"image_id":"img-0","width":640,"height":480,
//!  "proposals":[{"box":[x1,y1,x2,y2],"class_probs":[...],"visual_feat":[...]}],
//!  "queries":[{"text_feat":[...],"gt_boxes":[[x1,y1,x2,y2]]}]}
//! ```
//!
//! Prediction files hold one `{"image_id","query_index","box"}` object per line.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{iou, point_in_box, CornerBox};
use crate::model::{HeadParameters, ModelDims, Proposal, Query, PARAM_NAMES};
use crate::targets::ClassDistribution;

/// Slack allowed when checking that boxes lie inside the image.
const BOUNDS_TOL: f64 = 1e-9;

/// IoU at or above which a prediction counts as correct.
pub const ACCURACY_IOU: f64 = 0.5;

/// One image with its proposals and grounded queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingExample {
    pub image_id: String,
    #[serde(rename = "width")]
    pub image_w: f64,
    #[serde(rename = "height")]
    pub image_h: f64,
    pub proposals: Vec<Proposal>,
    pub queries: Vec<Query>,
}

impl GroundingExample {
    pub fn head_input(&self) -> crate::model::HeadInput<'_> {
        crate::model::HeadInput {
            image_w: self.image_w,
            image_h: self.image_h,
            proposals: &self.proposals,
            queries: &self.queries,
        }
    }

    /// Per-example structural checks; feature-length uniformity is checked across a file.
    pub fn validate(&self) -> Result<()> {
        if !(self.image_w > 0.0 && self.image_h > 0.0) {
            return Err(Error::Schema(format!("{}: non-positive image size", self.image_id)));
        }
        if self.proposals.is_empty() {
            return Err(Error::Schema(format!("{}: no proposals", self.image_id)));
        }
        let in_bounds = |b: &CornerBox| {
            b.is_valid()
                && b.x1 >= -BOUNDS_TOL
                && b.y1 >= -BOUNDS_TOL
                && b.x2 <= self.image_w + BOUNDS_TOL
                && b.y2 <= self.image_h + BOUNDS_TOL
        };
        for (z, p) in self.proposals.iter().enumerate() {
            if !in_bounds(&p.bbox) {
                return Err(Error::Schema(format!("{}: proposal {z} box {:?} outside image", self.image_id, p.bbox)));
            }
            ClassDistribution::new(p.class_probs.probs().to_vec())
                .map_err(|e| Error::Schema(format!("{}: proposal {z}: {e}", self.image_id)))?;
            if p.visual_feat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("{}: proposal {z} has non-finite features", self.image_id)));
            }
        }
        for (j, q) in self.queries.iter().enumerate() {
            if q.gt_boxes.is_empty() {
                return Err(Error::Schema(format!("{}: query {j} has no ground truth", self.image_id)));
            }
            if let Some(b) = q.gt_boxes.iter().find(|b| !in_bounds(b)) {
                return Err(Error::Schema(format!("{}: query {j} gt box {b:?} outside image", self.image_id)));
            }
            if q.text_feat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("{}: query {j} has non-finite features", self.image_id)));
            }
        }
        Ok(())
    }
}

/// Feature lengths shared by every example of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub text_dim: usize,
    pub visual_dim: usize,
    pub num_classes: usize,
}

impl FeatureDims {
    pub fn model_dims(&self, hidden: usize) -> ModelDims {
        ModelDims {
            text_dim: self.text_dim,
            visual_dim: self.visual_dim,
            hidden,
        }
    }
}

/// Checks that all feature lengths agree and returns them. `None` for an
/// empty dataset or one without queries.
pub fn feature_dims(dataset: &[GroundingExample]) -> Result<Option<FeatureDims>> {
    let mut dims: Option<FeatureDims> = None;
    let mut text: Option<usize> = None;
    for ex in dataset {
        for p in &ex.proposals {
            let d = dims.get_or_insert(FeatureDims {
                text_dim: 0,
                visual_dim: p.visual_feat.len(),
                num_classes: p.class_probs.len(),
            });
            if d.visual_dim != p.visual_feat.len() || d.num_classes != p.class_probs.len() {
                return Err(Error::Schema(format!(
                    "{}: feature lengths (visual {}, classes {}) differ from earlier examples (visual {}, classes {})",
                    ex.image_id,
                    p.visual_feat.len(),
                    p.class_probs.len(),
                    d.visual_dim,
                    d.num_classes
                )));
            }
        }
        for q in &ex.queries {
            let t = *text.get_or_insert(q.text_feat.len());
            if t != q.text_feat.len() {
                return Err(Error::Schema(format!(
                    "{}: text feature length {} differs from earlier examples ({t})",
                    ex.image_id,
                    q.text_feat.len()
                )));
            }
        }
    }
    Ok(match (dims, text) {
        (Some(mut d), Some(t)) => {
            d.text_dim = t;
            Some(d)
        }
        _ => None,
    })
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

fn write_lines<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a JSONL dataset.
pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<GroundingExample>> {
    let dataset: Vec<GroundingExample> = read_lines(path.as_ref())?;
    for ex in &dataset {
        ex.validate()?;
    }
    feature_dims(&dataset)?;
    Ok(dataset)
}

pub fn write_examples(dataset: &[GroundingExample], path: impl AsRef<Path>) -> Result<()> {
    write_lines(dataset, path.as_ref())
}

/// One predicted box for one query, in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub query_index: usize,
    #[serde(rename = "box")]
    pub bbox: CornerBox,
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let preds: Vec<PredictionRecord> = read_lines(path.as_ref())?;
    for p in &preds {
        if !p.bbox.is_valid() {
            return Err(Error::Schema(format!(
                "prediction for {} query {} has invalid box {:?}",
                p.image_id, p.query_index, p.bbox
            )));
        }
    }
    Ok(preds)
}

pub fn write_predictions(preds: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    write_lines(preds, path.as_ref())
}

/// Smallest box enclosing every input box.
pub fn merge_gt_boxes(boxes: &[CornerBox]) -> Result<CornerBox> {
    let (first, rest) = boxes
        .split_first()
        .ok_or_else(|| invalid("cannot merge an empty set of ground-truth boxes"))?;
    Ok(rest.iter().fold(*first, |acc, b| acc.enclose(b)))
}

fn check_aligned(preds: &[CornerBox], gts: &[CornerBox]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(invalid(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    Ok(())
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Share of predictions with IoU of at least 0.5 against the aligned ground truth.
pub fn accuracy(preds: &[CornerBox], gts: &[CornerBox]) -> Result<f64> {
    check_aligned(preds, gts)?;
    let hits = preds.iter().zip(gts).filter(|(p, g)| is_accurate(p, g)).count();
    Ok(fraction(hits, preds.len()))
}

/// Share of predictions whose center lies in the aligned ground truth.
pub fn point_game_accuracy(preds: &[CornerBox], gts: &[CornerBox]) -> Result<f64> {
    check_aligned(preds, gts)?;
    let hits = preds.iter().zip(gts).filter(|(p, g)| is_point_hit(p, g)).count();
    Ok(fraction(hits, preds.len()))
}

pub fn is_accurate(pred: &CornerBox, gt: &CornerBox) -> bool {
    iou(pred, gt) >= ACCURACY_IOU
}

pub fn is_point_hit(pred: &CornerBox, gt: &CornerBox) -> bool {
    let (cx, cy) = pred.center();
    point_in_box(cx, cy, gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub point_game_accuracy: f64,
    pub n_queries: usize,
}

/// Aligns predictions to every query of `dataset` by `(image_id, query_index)`
/// and scores them against the merged ground truth.
pub fn evaluate(dataset: &[GroundingExample], preds: &[PredictionRecord]) -> Result<EvalReport> {
    let mut by_key: HashMap<(&str, usize), &CornerBox> = HashMap::new();
    for p in preds {
        if by_key.insert((p.image_id.as_str(), p.query_index), &p.bbox).is_some() {
            return Err(invalid(format!(
                "duplicate prediction for image {} query {}",
                p.image_id, p.query_index
            )));
        }
    }
    let mut pred_boxes = Vec::new();
    let mut gt_boxes = Vec::new();
    for ex in dataset {
        for (j, q) in ex.queries.iter().enumerate() {
            let pred = by_key.remove(&(ex.image_id.as_str(), j)).ok_or_else(|| {
                invalid(format!("missing prediction for image {} query {j}", ex.image_id))
            })?;
            pred_boxes.push(*pred);
            gt_boxes.push(merge_gt_boxes(&q.gt_boxes)?);
        }
    }
    if let Some(((image, j), _)) = by_key.into_iter().min_by(|a, b| a.0.cmp(&b.0)) {
        return Err(invalid(format!("prediction for image {image} query {j} matches no query")));
    }
    Ok(EvalReport {
        accuracy: accuracy(&pred_boxes, &gt_boxes)?,
        point_game_accuracy: point_game_accuracy(&pred_boxes, &gt_boxes)?,
        n_queries: pred_boxes.len(),
    })
}

pub const CHECKPOINT_FORMAT: &str = "grounding-loss-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// JSON checkpoint: format tag, version, dimensions, and a map from parameter
/// name to shape and row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: ModelDims,
    pub leaky_slope: f64,
    pub params: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn from_params(params: &HeadParameters) -> Self {
        let params_map = PARAM_NAMES
            .iter()
            .zip(params.shapes())
            .zip(params.tensors())
            .map(|((name, shape), values)| {
                (
                    name.to_string(),
                    TensorRecord {
                        shape,
                        values: values.to_vec(),
                    },
                )
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dims: params.dims,
            leaky_slope: params.leaky_slope,
            params: params_map,
        }
    }

    pub fn into_params(self) -> Result<HeadParameters> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut params = HeadParameters::zeros(self.dims, self.leaky_slope);
        let shapes = params.shapes();
        for ((name, shape), slot) in PARAM_NAMES.iter().zip(shapes).zip(params.tensors_mut()) {
            let rec = self
                .params
                .get(*name)
                .ok_or_else(|| Error::Schema(format!("checkpoint is missing {name}")))?;
            if rec.shape != shape || rec.values.len() != slot.len() {
                return Err(Error::Schema(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {shape:?}",
                    rec.shape
                )));
            }
            slot.copy_from_slice(&rec.values);
        }
        Ok(params)
    }
}

pub fn save_checkpoint(params: &HeadParameters, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &Checkpoint::from_params(params))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<HeadParameters> {
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    ckpt.into_params()
}
