//! Box representations, the IoU family and the CIoU loss with analytic gradients.
//!
//! Two box forms are used throughout: [`CornerBox`] (`x1, y1, x2, y2`), in
//! pixels or normalized units, and [`CenterBox`] (`cx, cy, w, h`) in
//! normalized image units. Regression losses operate on center boxes; the
//! evaluation metrics and spatial features operate on corner boxes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Lower clamp applied to predicted width/height before CIoU evaluation.
pub const WH_EPS: f64 = 1e-4;
/// Added to the squared enclosing diagonal so coincident point boxes stay finite.
pub const GEO_EPS: f64 = 1e-10;

const ASPECT_SCALE: f64 = 4.0 / (PI * PI);

/// Axis-aligned box in corner form. Serializes as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl CornerBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(invalid(format!("corner box {b:?} is not ordered/finite")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            x1: a[0],
            y1: a[1],
            x2: a[2],
            y2: a[3],
        }
    }

    /// Minimal box enclosing `self` and `other`.
    pub fn enclose(&self, other: &CornerBox) -> CornerBox {
        CornerBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> CornerBox {
        CornerBox {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }
}

impl From<[f64; 4]> for CornerBox {
    fn from(a: [f64; 4]) -> Self {
        Self::from_array(a)
    }
}

impl From<CornerBox> for [f64; 4] {
    fn from(b: CornerBox) -> Self {
        b.to_array()
    }
}

/// Axis-aligned box in normalized center-size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CenterBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Adds a `(dcx, dcy, dw, dh)` offset.
    pub fn offset(&self, o: [f64; 4]) -> CenterBox {
        CenterBox::new(self.cx + o[0], self.cy + o[1], self.w + o[2], self.h + o[3])
    }

    pub fn to_corners(&self) -> CornerBox {
        center_to_corners(self)
    }
}

/// Converts a pixel corner box into normalized center-size form.
pub fn corners_to_center(b: &CornerBox, image_w: f64, image_h: f64) -> Result<CenterBox> {
    if !(image_w > 0.0 && image_h > 0.0) {
        return Err(invalid(format!(
            "image dimensions must be positive, got {image_w}x{image_h}"
        )));
    }
    Ok(CenterBox {
        cx: (b.x1 + b.x2) / (2.0 * image_w),
        cy: (b.y1 + b.y2) / (2.0 * image_h),
        w: (b.x2 - b.x1) / image_w,
        h: (b.y2 - b.y1) / image_h,
    })
}

pub fn center_to_corners(b: &CenterBox) -> CornerBox {
    CornerBox {
        x1: b.cx - b.w / 2.0,
        y1: b.cy - b.h / 2.0,
        x2: b.cx + b.w / 2.0,
        y2: b.cy + b.h / 2.0,
    }
}

/// Intersection over union. Returns 0 when the union is empty.
pub fn iou(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Squared diagonal of the smallest axis-aligned box enclosing both boxes.
pub fn enclosing_diagonal_sq(a: &CenterBox, b: &CenterBox) -> f64 {
    let e = a.to_corners().enclose(&b.to_corners());
    e.width().powi(2) + e.height().powi(2)
}

/// Boundary-inclusive containment test.
pub fn point_in_box(cx: f64, cy: f64, b: &CornerBox) -> bool {
    b.x1 <= cx && cx <= b.x2 && b.y1 <= cy && cy <= b.y2
}

/// Switches for the CIoU aspect term and its differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiouOptions {
    /// Use the signed arctan difference instead of its square in the aspect
    /// term. The loss is then no longer guaranteed nonnegative.
    pub v_unsquared: bool,
    /// Hold the trade-off weight alpha fixed when differentiating.
    pub alpha_constant: bool,
}

impl Default for CiouOptions {
    fn default() -> Self {
        Self {
            v_unsquared: false,
            alpha_constant: true,
        }
    }
}

/// The individual CIoU terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiouBreakdown {
    /// `1 - iou`
    pub s: f64,
    /// normalized squared center distance
    pub d: f64,
    /// weighted aspect-consistency term
    pub v: f64,
    pub iou: f64,
    pub alpha: f64,
    pub total: f64,
}

fn check_target(gt: &CenterBox) -> Result<()> {
    let finite = gt.to_array().iter().all(|v| v.is_finite());
    if !finite || gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::InvalidTarget(format!(
            "ground-truth box {gt:?} must have positive width and height"
        )));
    }
    Ok(())
}

/// Per-axis interval quantities shared by the value and the gradient.
struct Axis {
    /// raw overlap length, may be negative
    overlap: f64,
    /// d(clamped overlap)/d(pred lo), d(...)/d(pred hi)
    d_overlap: (f64, f64),
    enclose: f64,
    d_enclose: (f64, f64),
}

fn axis(p_lo: f64, p_hi: f64, g_lo: f64, g_hi: f64) -> Axis {
    let overlap = p_hi.min(g_hi) - p_lo.max(g_lo);
    // One-sided rule: on ties the predicted edge is the active one; zero overlap is flat.
    let d_overlap = if overlap > 0.0 {
        (
            if p_lo >= g_lo { -1.0 } else { 0.0 },
            if p_hi <= g_hi { 1.0 } else { 0.0 },
        )
    } else {
        (0.0, 0.0)
    };
    let enclose = p_hi.max(g_hi) - p_lo.min(g_lo);
    let d_enclose = (
        if p_lo <= g_lo { -1.0 } else { 0.0 },
        if p_hi >= g_hi { 1.0 } else { 0.0 },
    );
    Axis {
        overlap,
        d_overlap,
        enclose,
        d_enclose,
    }
}

/// Maps d/d(lo), d/d(hi) of an interval to d/d(center), d/d(size).
fn to_center_size(d: (f64, f64)) -> (f64, f64) {
    (d.0 + d.1, (d.1 - d.0) / 2.0)
}

fn ciou_eval(pred: &CenterBox, gt: &CenterBox, opts: CiouOptions) -> Result<(CiouBreakdown, [f64; 4])> {
    check_target(gt)?;
    if !pred.to_array().iter().all(|v| v.is_finite()) {
        return Err(invalid(format!("predicted box {pred:?} is not finite")));
    }
    let w = pred.w.max(WH_EPS);
    let h = pred.h.max(WH_EPS);
    let w_live = if pred.w > WH_EPS { 1.0 } else { 0.0 };
    let h_live = if pred.h > WH_EPS { 1.0 } else { 0.0 };

    let ax = axis(pred.cx - w / 2.0, pred.cx + w / 2.0, gt.cx - gt.w / 2.0, gt.cx + gt.w / 2.0);
    let ay = axis(pred.cy - h / 2.0, pred.cy + h / 2.0, gt.cy - gt.h / 2.0, gt.cy + gt.h / 2.0);

    // S = 1 - IoU
    let iw = ax.overlap.max(0.0);
    let ih = ay.overlap.max(0.0);
    let inter = iw * ih;
    let union = w * h + gt.w * gt.h - inter;
    let iou = inter / union;
    let s = 1.0 - iou;

    let (diw_dcx, diw_dw) = to_center_size(ax.d_overlap);
    let (dih_dcy, dih_dh) = to_center_size(ay.d_overlap);
    let d_inter = [diw_dcx * ih, dih_dcy * iw, diw_dw * ih, dih_dh * iw];
    let d_area = [0.0, 0.0, h, w];
    let mut d_s = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        d_s[i] = -(d_inter[i] * union - inter * d_union) / (union * union);
    }

    // D = rho^2 / c^2
    let dx = pred.cx - gt.cx;
    let dy = pred.cy - gt.cy;
    let rho2 = dx * dx + dy * dy;
    let c2 = ax.enclose * ax.enclose + ay.enclose * ay.enclose + GEO_EPS;
    let d = rho2 / c2;
    let (dex_dcx, dex_dw) = to_center_size(ax.d_enclose);
    let (dey_dcy, dey_dh) = to_center_size(ay.d_enclose);
    let d_c2 = [
        2.0 * ax.enclose * dex_dcx,
        2.0 * ay.enclose * dey_dcy,
        2.0 * ax.enclose * dex_dw,
        2.0 * ay.enclose * dey_dh,
    ];
    let d_rho2 = [2.0 * dx, 2.0 * dy, 0.0, 0.0];
    let mut d_d = [0.0; 4];
    for i in 0..4 {
        d_d[i] = (d_rho2[i] * c2 - rho2 * d_c2[i]) / (c2 * c2);
    }

    // V = alpha * aspect
    let delta = (gt.w / gt.h).atan() - (w / h).atan();
    let r2 = w * w + h * h;
    let d_delta = [0.0, 0.0, -h / r2, w / r2];
    let v_sq = ASPECT_SCALE * delta * delta;
    let denom = s + v_sq;
    let alpha = if denom > 0.0 { v_sq / denom } else { 0.0 };
    let (aspect, d_aspect) = if opts.v_unsquared {
        (ASPECT_SCALE * delta, d_delta.map(|g| ASPECT_SCALE * g))
    } else {
        (v_sq, d_delta.map(|g| 2.0 * ASPECT_SCALE * delta * g))
    };
    let v = alpha * aspect;
    let d_vsq = d_delta.map(|g| 2.0 * ASPECT_SCALE * delta * g);
    let mut d_v = [0.0; 4];
    for i in 0..4 {
        d_v[i] = alpha * d_aspect[i];
        if !opts.alpha_constant && denom > 0.0 {
            let d_alpha = (d_vsq[i] * s - v_sq * d_s[i]) / (denom * denom);
            d_v[i] += aspect * d_alpha;
        }
    }

    let mut grad = [0.0; 4];
    for i in 0..4 {
        grad[i] = d_s[i] + d_d[i] + d_v[i];
    }
    grad[2] *= w_live;
    grad[3] *= h_live;

    let breakdown = CiouBreakdown {
        s,
        d,
        v,
        iou,
        alpha,
        total: s + d + v,
    };
    Ok((breakdown, grad))
}

/// CIoU loss of `pred` against `gt`, both in normalized center-size form.
///
/// Predicted width and height are clamped below by [`WH_EPS`]. Fails with
/// [`Error::InvalidTarget`] when `gt` has zero width or height.
pub fn ciou_loss(pred: &CenterBox, gt: &CenterBox, opts: CiouOptions) -> Result<CiouBreakdown> {
    ciou_eval(pred, gt, opts).map(|(b, _)| b)
}

/// Gradient of the CIoU total with respect to `(cx, cy, w, h)` of `pred`.
///
/// With `alpha_constant` set (the default) this is the gradient of
/// `s + d + alpha0 * aspect` with alpha frozen at its current value.
/// Edges that coincide are differentiated as if the predicted edge were the
/// active one; zero overlap contributes zero IoU gradient.
pub fn ciou_grad(pred: &CenterBox, gt: &CenterBox, opts: CiouOptions) -> Result<[f64; 4]> {
    ciou_eval(pred, gt, opts).map(|(_, g)| g)
}

/// Loss value and gradient in one pass.
pub fn ciou_loss_and_grad(
    pred: &CenterBox,
    gt: &CenterBox,
    opts: CiouOptions,
) -> Result<(CiouBreakdown, [f64; 4])> {
    ciou_eval(pred, gt, opts)
}

/// CIoU total evaluated with alpha pinned to `alpha`.
///
/// This is the function whose exact gradient [`ciou_grad`] returns when
/// `alpha_constant` is set, provided `alpha` is the value at `pred`.
pub fn ciou_total_with_alpha(pred: &CenterBox, gt: &CenterBox, opts: CiouOptions, alpha: f64) -> Result<f64> {
    let b = ciou_loss(pred, gt, opts)?;
    let w = pred.w.max(WH_EPS);
    let h = pred.h.max(WH_EPS);
    let delta = (gt.w / gt.h).atan() - (w / h).atan();
    let aspect = if opts.v_unsquared {
        ASPECT_SCALE * delta
    } else {
        ASPECT_SCALE * delta * delta
    };
    Ok(b.s + b.d + alpha * aspect)
}

/// DIoU loss: the CIoU breakdown without the aspect term.
pub fn diou_loss(pred: &CenterBox, gt: &CenterBox) -> Result<f64> {
    let b = ciou_loss(pred, gt, CiouOptions::default())?;
    Ok(b.s + b.d)
}

/// Smooth-L1 (Huber, unit threshold) summed over the four coordinates,
/// with its gradient with respect to `pred`.
pub fn smooth_l1(pred: &CenterBox, gt: &CenterBox) -> (f64, [f64; 4]) {
    let p = pred.to_array();
    let g = gt.to_array();
    let mut value = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let x = p[i] - g[i];
        if x.abs() < 1.0 {
            value += 0.5 * x * x;
            grad[i] = x;
        } else {
            value += x.abs() - 0.5;
            grad[i] = x.signum();
        }
    }
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(x1: f64, y1: f64, x2: f64, y2: f64) -> CornerBox {
        CornerBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn corners_to_center_examples() {
        let c = corners_to_center(&cb(10.0, 20.0, 50.0, 60.0), 100.0, 100.0).unwrap();
        for (a, b) in c.to_array().iter().zip([0.30, 0.40, 0.40, 0.40]) {
            assert!((a - b).abs() < 1e-12);
        }
        let full = corners_to_center(&cb(0.0, 0.0, 100.0, 100.0), 100.0, 100.0).unwrap();
        assert_eq!(full.to_array(), [0.5, 0.5, 1.0, 1.0]);
        assert!(corners_to_center(&cb(0.0, 0.0, 1.0, 1.0), 0.0, 10.0).is_err());
        assert!(corners_to_center(&cb(0.0, 0.0, 1.0, 1.0), 10.0, -1.0).is_err());
    }

    #[test]
    fn center_to_corners_examples() {
        let c = center_to_corners(&CenterBox::new(0.5, 0.5, 1.0, 1.0));
        assert_eq!(c.to_array(), [0.0, 0.0, 1.0, 1.0]);
        let c = center_to_corners(&CenterBox::new(0.3, 0.4, 0.4, 0.4));
        for (a, b) in c.to_array().iter().zip([0.1, 0.2, 0.5, 0.6]) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = center_to_corners(&CenterBox::new(0.5, 0.5, 0.0, 0.0));
        assert_eq!(p.to_array(), [0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn iou_examples() {
        let a = cb(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &cb(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&cb(0.0, 0.0, 1.0, 1.0), &cb(2.0, 2.0, 3.0, 3.0)), 0.0);
        let p = cb(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn invalid_corner_box_rejected() {
        assert!(CornerBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(CornerBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn enclosing_diagonal_examples() {
        let a = CenterBox::new(0.5, 0.5, 0.3, 0.4);
        assert!((enclosing_diagonal_sq(&a, &a) - (0.09 + 0.16)).abs() < 1e-12);
        let p = CornerBox::new(0.2, 0.2, 0.3, 0.3).unwrap();
        let q = CornerBox::new(0.7, 0.7, 0.8, 0.8).unwrap();
        let pc = corners_to_center(&p, 1.0, 1.0).unwrap();
        let qc = corners_to_center(&q, 1.0, 1.0).unwrap();
        assert!((enclosing_diagonal_sq(&pc, &qc) - 0.72).abs() < 1e-12);
        assert_eq!(enclosing_diagonal_sq(&pc, &qc), enclosing_diagonal_sq(&qc, &pc));
    }

    #[test]
    fn ciou_identity_is_zero() {
        let b = CenterBox::new(0.4, 0.6, 0.2, 0.3);
        let r = ciou_loss(&b, &b, CiouOptions::default()).unwrap();
        assert_eq!((r.s, r.d, r.v, r.total), (0.0, 0.0, 0.0, 0.0));
        // the distance term is stationary at coincidence
        let d_only = |p: [f64; 4]| ciou_loss(&CenterBox::from_array(p), &b, CiouOptions::default()).unwrap().d;
        let h = 1e-6;
        for i in 0..2 {
            let mut a = b.to_array();
            let mut c = b.to_array();
            a[i] += h;
            c[i] -= h;
            assert!(((d_only(a) - d_only(c)) / (2.0 * h)).abs() < 1e-9);
        }
    }

    #[test]
    fn ciou_disjoint_example() {
        let pred = CenterBox::new(0.25, 0.25, 0.1, 0.1);
        let gt = CenterBox::new(0.75, 0.75, 0.1, 0.1);
        let r = ciou_loss(&pred, &gt, CiouOptions::default()).unwrap();
        assert_eq!(r.s, 1.0);
        assert!((r.d - 0.5 / 0.72).abs() < 1e-6);
        assert_eq!(r.v, 0.0);
        assert!((r.total - 1.694444).abs() < 1e-6);
        assert!((diou_loss(&pred, &gt).unwrap() - 1.694444).abs() < 1e-6);
    }

    #[test]
    fn ciou_aspect_mismatch_same_center() {
        let gt = CenterBox::new(0.5, 0.5, 0.2, 0.2);
        let pred = CenterBox::new(0.5, 0.5, 0.4, 0.2);
        let r = ciou_loss(&pred, &gt, CiouOptions::default()).unwrap();
        assert_eq!(r.d, 0.0);
        assert!(r.v > 0.0);
        assert!(diou_loss(&pred, &gt).unwrap() <= r.total);
    }

    #[test]
    fn ciou_unsquared_variant_is_signed() {
        let gt = CenterBox::new(0.5, 0.5, 0.2, 0.2);
        let wide = CenterBox::new(0.5, 0.5, 0.4, 0.2);
        let tall = CenterBox::new(0.5, 0.5, 0.2, 0.4);
        let opts = CiouOptions {
            v_unsquared: true,
            ..Default::default()
        };
        let a = ciou_loss(&wide, &gt, opts).unwrap();
        let b = ciou_loss(&tall, &gt, opts).unwrap();
        assert!(a.v < 0.0 && b.v > 0.0);
    }

    #[test]
    fn degenerate_target_rejected() {
        let pred = CenterBox::new(0.5, 0.5, 0.2, 0.2);
        let gt = CenterBox::new(0.5, 0.5, 0.0, 0.2);
        assert!(matches!(
            ciou_loss(&pred, &gt, CiouOptions::default()),
            Err(Error::InvalidTarget(_))
        ));
        assert!(ciou_grad(&pred, &gt, CiouOptions::default()).is_err());
    }

    #[test]
    fn predicted_size_is_clamped() {
        let gt = CenterBox::new(0.5, 0.5, 0.2, 0.2);
        let pred = CenterBox::new(0.5, 0.5, -0.3, 0.2);
        let r = ciou_loss(&pred, &gt, CiouOptions::default()).unwrap();
        assert!(r.total.is_finite());
        let g = ciou_grad(&pred, &gt, CiouOptions::default()).unwrap();
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn smooth_l1_examples() {
        let gt = CenterBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(smooth_l1(&gt, &gt).0, 0.0);
        let (v, g) = smooth_l1(&CenterBox::new(1.0, 0.5, 0.2, 0.2), &gt);
        assert!((v - 0.125).abs() < 1e-12);
        assert!((g[0] - 0.5).abs() < 1e-12);
        let (v, g) = smooth_l1(&CenterBox::new(2.5, 0.5, 0.2, 0.2), &gt);
        assert!((v - 1.5).abs() < 1e-12);
        assert_eq!(g[0], 1.0);
    }

    #[test]
    fn point_in_box_examples() {
        let b = cb(0.0, 0.0, 10.0, 10.0);
        assert!(point_in_box(5.0, 5.0, &b));
        assert!(point_in_box(10.0, 5.0, &b));
        assert!(!point_in_box(11.0, 5.0, &b));
    }
}
