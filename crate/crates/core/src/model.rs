//! Two-stage grounding head: spatial features, concat fusion, grounding
//! softmax and offset regression, with reverse-mode gradients, Xavier
//! initialization and Adam.
//!
//! The fusion input for query `j` and proposal `z` is the concatenation
//! `text_j || spatial_z || l1(visual_z)`. Because the affine map is linear in
//! that concatenation, the forward pass evaluates the text block once per
//! query and the spatial/visual block once per proposal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{corners_to_center, CenterBox, CornerBox};
use crate::losses::softmax;
use crate::targets::ClassDistribution;

pub const SPATIAL_DIM: usize = 5;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
const L1_GUARD: f64 = 1e-12;

/// A detector proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    /// Corner box in pixels.
    #[serde(rename = "box")]
    pub bbox: CornerBox,
    pub class_probs: ClassDistribution,
    pub visual_feat: Vec<f64>,
}

/// A noun phrase with its injected text embedding and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text_feat: Vec<f64>,
    /// Pixel corner boxes; merged into their enclosing box for training and evaluation.
    pub gt_boxes: Vec<CornerBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub text_dim: usize,
    pub visual_dim: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn input_dim(&self) -> usize {
        self.text_dim + SPATIAL_DIM + self.visual_dim
    }
}

/// Learnable head parameters, also used as the gradient container.
///
/// Matrices are row-major: `w_fuse` is `hidden x input_dim`, `w_box` is `4 x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParameters {
    pub dims: ModelDims,
    pub leaky_slope: f64,
    pub w_fuse: Vec<f64>,
    pub b_fuse: Vec<f64>,
    pub w_g: Vec<f64>,
    /// Single-element grounding bias.
    pub b_g: Vec<f64>,
    pub w_box: Vec<f64>,
    pub b_box: Vec<f64>,
}

/// Names and shapes used for checkpoints, in a fixed order.
pub const PARAM_NAMES: [&str; 6] = ["W_fuse", "b_fuse", "W_g", "b_g", "W_B", "b_B"];

impl HeadParameters {
    pub fn zeros(dims: ModelDims, leaky_slope: f64) -> Self {
        let c = dims.hidden;
        Self {
            dims,
            leaky_slope,
            w_fuse: vec![0.0; c * dims.input_dim()],
            b_fuse: vec![0.0; c],
            w_g: vec![0.0; c],
            b_g: vec![0.0],
            w_box: vec![0.0; 4 * c],
            b_box: vec![0.0; 4],
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(dims: ModelDims, leaky_slope: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = dims.hidden;
        let mut p = Self::zeros(dims, leaky_slope);
        p.w_fuse = xavier_uniform(c, dims.input_dim(), &mut rng);
        p.w_g = xavier_uniform(1, c, &mut rng);
        p.w_box = xavier_uniform(4, c, &mut rng);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims, self.leaky_slope)
    }

    pub fn shapes(&self) -> [Vec<usize>; 6] {
        let c = self.dims.hidden;
        [vec![c, self.dims.input_dim()], vec![c], vec![1, c], vec![1], vec![4, c], vec![4]]
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [&self.w_fuse, &self.b_fuse, &self.w_g, &self.b_g, &self.w_box, &self.b_box]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w_fuse,
            &mut self.b_fuse,
            &mut self.w_g,
            &mut self.b_g,
            &mut self.w_box,
            &mut self.b_box,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flat view in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(invalid(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &HeadParameters, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`, row-major `rows x cols`.
pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect()
}

/// `[x1/W, y1/H, x2/W, y2/H, area / (W*H)]`.
pub fn spatial_features(b: &CornerBox, image_w: f64, image_h: f64) -> Result<[f64; SPATIAL_DIM]> {
    if !(image_w > 0.0 && image_h > 0.0) {
        return Err(invalid(format!("image dimensions must be positive, got {image_w}x{image_h}")));
    }
    Ok([
        b.x1 / image_w,
        b.y1 / image_h,
        b.x2 / image_w,
        b.y2 / image_h,
        (b.x2 - b.x1) * (b.y2 - b.y1) / (image_w * image_h),
    ])
}

/// Divides by the L1 norm (plus a small guard).
pub fn l1_normalize(v: &[f64]) -> Vec<f64> {
    let norm: f64 = v.iter().map(|x| x.abs()).sum::<f64>() + L1_GUARD;
    v.iter().map(|x| x / norm).collect()
}

fn leaky(a: f64, slope: f64) -> f64 {
    if a > 0.0 {
        a
    } else {
        slope * a
    }
}

fn leaky_grad(a: f64, slope: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else {
        slope
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fused representation of one (query, proposal) pair.
pub fn fuse(text_feat: &[f64], spatial_feat: &[f64], visual_feat: &[f64], params: &HeadParameters) -> Result<Vec<f64>> {
    let d = params.dims;
    if text_feat.len() != d.text_dim || spatial_feat.len() != SPATIAL_DIM || visual_feat.len() != d.visual_dim {
        return Err(invalid(format!(
            "fusion input lengths ({}, {}, {}) do not match ({}, {}, {})",
            text_feat.len(),
            spatial_feat.len(),
            visual_feat.len(),
            d.text_dim,
            SPATIAL_DIM,
            d.visual_dim
        )));
    }
    let mut x = Vec::with_capacity(d.input_dim());
    x.extend_from_slice(text_feat);
    x.extend_from_slice(spatial_feat);
    x.extend(l1_normalize(visual_feat));
    let n = d.input_dim();
    Ok((0..d.hidden)
        .map(|r| leaky(dot(&params.w_fuse[r * n..(r + 1) * n], &x) + params.b_fuse[r], params.leaky_slope))
        .collect())
}

fn logit(h: &[f64], params: &HeadParameters) -> f64 {
    dot(&params.w_g, h) + params.b_g[0]
}

fn offset(h: &[f64], params: &HeadParameters) -> [f64; 4] {
    let c = params.dims.hidden;
    let mut o = [0.0; 4];
    for (i, oi) in o.iter_mut().enumerate() {
        *oi = dot(&params.w_box[i * c..(i + 1) * c], h) + params.b_box[i];
    }
    o
}

/// Softmax over the proposals of one query's grounding logits.
pub fn grounding_probs(fused: &[Vec<f64>], params: &HeadParameters) -> Vec<f64> {
    let logits: Vec<f64> = fused.iter().map(|h| logit(h, params)).collect();
    softmax(&logits)
}

/// Linear box-offset regression, `(dcx, dcy, dw, dh)` per proposal.
pub fn offsets(fused: &[Vec<f64>], params: &HeadParameters) -> Vec<[f64; 4]> {
    fused.iter().map(|h| offset(h, params)).collect()
}

/// The view of an example the head needs.
#[derive(Debug, Clone, Copy)]
pub struct HeadInput<'a> {
    pub image_w: f64,
    pub image_h: f64,
    pub proposals: &'a [Proposal],
    pub queries: &'a [Query],
}

/// Outputs of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Proposal + offset, normalized center-size form.
    pub refined: Vec<CenterBox>,
    /// Argmax of `probs`, lowest index on ties.
    pub best: usize,
}

impl QueryOutput {
    pub fn predicted(&self) -> CenterBox {
        self.refined[self.best]
    }
}

/// Forward results plus the activations needed by [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub outputs: Vec<QueryOutput>,
    dims: ModelDims,
    texts: Vec<Vec<f64>>,
    /// `spatial || l1(visual)` per proposal.
    prop_inputs: Vec<Vec<f64>>,
    /// pre-activations `[j][z][c]`
    pre: Vec<Vec<Vec<f64>>>,
    hidden: Vec<Vec<Vec<f64>>>,
}

impl ForwardPass {
    pub fn num_queries(&self) -> usize {
        self.outputs.len()
    }

    pub fn num_proposals(&self) -> usize {
        self.prop_inputs.len()
    }

    /// Logit rows, one per query.
    pub fn logits(&self) -> Vec<Vec<f64>> {
        self.outputs.iter().map(|o| o.logits.clone()).collect()
    }

    pub fn refined(&self) -> Vec<Vec<CenterBox>> {
        self.outputs.iter().map(|o| o.refined.clone()).collect()
    }

    /// Smallest absolute pre-activation, for keeping finite-difference probes off the kink.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.pre
            .iter()
            .flatten()
            .flatten()
            .fold(f64::INFINITY, |m, a| m.min(a.abs()))
    }
}

pub fn forward(input: &HeadInput<'_>, params: &HeadParameters) -> Result<ForwardPass> {
    let d = params.dims;
    let (c, n) = (d.hidden, d.input_dim());
    if input.proposals.is_empty() {
        return Err(invalid("example has no proposals"));
    }

    let mut prop_inputs = Vec::with_capacity(input.proposals.len());
    let mut centers = Vec::with_capacity(input.proposals.len());
    for (z, p) in input.proposals.iter().enumerate() {
        if p.visual_feat.len() != d.visual_dim {
            return Err(invalid(format!(
                "proposal {z}: visual feature length {} != {}",
                p.visual_feat.len(),
                d.visual_dim
            )));
        }
        let mut x = spatial_features(&p.bbox, input.image_w, input.image_h)?.to_vec();
        x.extend(l1_normalize(&p.visual_feat));
        prop_inputs.push(x);
        centers.push(corners_to_center(&p.bbox, input.image_w, input.image_h)?);
    }
    // b_fuse + W_sv * x_z
    let prop_part: Vec<Vec<f64>> = prop_inputs
        .iter()
        .map(|x| {
            (0..c)
                .map(|r| dot(&params.w_fuse[r * n + d.text_dim..(r + 1) * n], x) + params.b_fuse[r])
                .collect()
        })
        .collect();

    let mut texts = Vec::with_capacity(input.queries.len());
    let mut pre = Vec::with_capacity(input.queries.len());
    let mut hidden = Vec::with_capacity(input.queries.len());
    let mut outputs = Vec::with_capacity(input.queries.len());
    for (j, q) in input.queries.iter().enumerate() {
        if q.text_feat.len() != d.text_dim {
            return Err(invalid(format!(
                "query {j}: text feature length {} != {}",
                q.text_feat.len(),
                d.text_dim
            )));
        }
        let text_part: Vec<f64> = (0..c)
            .map(|r| dot(&params.w_fuse[r * n..r * n + d.text_dim], &q.text_feat))
            .collect();
        let mut pre_j = Vec::with_capacity(prop_part.len());
        let mut hid_j = Vec::with_capacity(prop_part.len());
        for pp in &prop_part {
            let a: Vec<f64> = text_part.iter().zip(pp).map(|(t, p)| t + p).collect();
            let h: Vec<f64> = a.iter().map(|&v| leaky(v, params.leaky_slope)).collect();
            pre_j.push(a);
            hid_j.push(h);
        }
        let logits: Vec<f64> = hid_j.iter().map(|h| logit(h, params)).collect();
        let probs = softmax(&logits);
        let refined = hid_j
            .iter()
            .zip(&centers)
            .map(|(h, ctr)| ctr.offset(offset(h, params)))
            .collect();
        let best = crate::targets::best_proposal(&probs);
        outputs.push(QueryOutput {
            logits,
            probs,
            refined,
            best,
        });
        texts.push(q.text_feat.clone());
        pre.push(pre_j);
        hidden.push(hid_j);
    }
    Ok(ForwardPass {
        outputs,
        dims: d,
        texts,
        prop_inputs,
        pre,
        hidden,
    })
}

/// Parameter gradients given the loss gradient with respect to the logits
/// (`[j][z]`) and the refined boxes (`[j][z][4]`).
pub fn backward(
    params: &HeadParameters,
    pass: &ForwardPass,
    grad_logits: &[Vec<f64>],
    grad_boxes: &[Vec<[f64; 4]>],
) -> Result<HeadParameters> {
    let d = params.dims;
    if pass.dims != d {
        return Err(Error::Usage(format!(
            "forward pass was computed with dims {:?}, parameters have {:?}",
            pass.dims, d
        )));
    }
    let (m, k) = (pass.num_queries(), pass.num_proposals());
    let logits_ok = grad_logits.len() == m && grad_logits.iter().all(|r| r.len() == k);
    let boxes_ok = grad_boxes.len() == m && grad_boxes.iter().all(|r| r.len() == k);
    if !logits_ok || !boxes_ok {
        return Err(Error::Usage(format!(
            "loss gradients do not match the cached forward pass ({m} queries x {k} proposals)"
        )));
    }
    let (c, n, t) = (d.hidden, d.input_dim(), d.text_dim);
    let mut g = params.zeros_like();
    let mut da_by_prop = vec![vec![0.0; c]; k];
    for j in 0..m {
        let mut da_by_query = vec![0.0; c];
        for z in 0..k {
            let dl = grad_logits[j][z];
            let db = grad_boxes[j][z];
            let h = &pass.hidden[j][z];
            let a = &pass.pre[j][z];
            g.b_g[0] += dl;
            for i in 0..4 {
                g.b_box[i] += db[i];
            }
            for r in 0..c {
                g.w_g[r] += dl * h[r];
                let mut dh = dl * params.w_g[r];
                for i in 0..4 {
                    g.w_box[i * c + r] += db[i] * h[r];
                    dh += db[i] * params.w_box[i * c + r];
                }
                let da = dh * leaky_grad(a[r], params.leaky_slope);
                da_by_query[r] += da;
                da_by_prop[z][r] += da;
            }
        }
        let text = &pass.texts[j];
        for r in 0..c {
            let row = &mut g.w_fuse[r * n..r * n + t];
            for (w, x) in row.iter_mut().zip(text) {
                *w += da_by_query[r] * x;
            }
        }
    }
    for (z, da) in da_by_prop.iter().enumerate() {
        let x = &pass.prop_inputs[z];
        for r in 0..c {
            g.b_fuse[r] += da[r];
            let row = &mut g.w_fuse[r * n + t..(r + 1) * n];
            for (w, xi) in row.iter_mut().zip(x) {
                *w += da[r] * xi;
            }
        }
    }
    Ok(g)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over flat slices.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam step applied to every head tensor.
pub fn adam_step(params: &mut HeadParameters, grads: &HeadParameters, state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    let mut flat = params.flatten();
    adam_update(&mut flat, &grads.flatten(), state, lr, cfg);
    params.set_flat(&flat).expect("gradient layout mirrors parameters");
}

/// `lr0 * decay^epoch`.
pub fn exponential_lr(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}
