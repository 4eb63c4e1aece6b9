#![allow(dead_code)]

use std::path::{Path, PathBuf};

use grounding_loss::evalio::{accuracy, is_accurate, is_point_hit};
use grounding_loss::geometry::{
    ciou_loss, corners_to_center, enclosing_diagonal_sq, iou, smooth_l1, CenterBox, CiouOptions, CornerBox,
};
use grounding_loss::losses::{ce_grounding_loss, kl_grounding_loss, total_loss, GroundingPart, LossConfig, RefinementPart};
use grounding_loss::targets::build_target_from_similarity;
use rand::Rng;
use serde::Deserialize;

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[derive(Deserialize)]
struct PairCase {
    a: [f64; 4],
    b: [f64; 4],
    expected: f64,
}

#[derive(Deserialize)]
struct ConvCase {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    width: f64,
    height: f64,
    expected: [f64; 4],
}

#[derive(Deserialize)]
struct CiouCase {
    pred: [f64; 4],
    gt: [f64; 4],
    s: f64,
    d: f64,
    v: f64,
    total: f64,
}

#[derive(Deserialize)]
struct SmoothCase {
    diff: f64,
    expected: f64,
}

#[derive(Deserialize)]
struct TargetCase {
    u_row: Vec<f64>,
    c_row: Vec<f64>,
    eta: f64,
    eps: f64,
    u_star: Vec<f64>,
    p_target: Vec<f64>,
    u_hat: Vec<f64>,
    support: Vec<usize>,
}

#[derive(Deserialize)]
struct KlCase {
    probs: Vec<f64>,
    target: Vec<f64>,
    expected: f64,
}

#[derive(Deserialize)]
struct CeCase {
    k: usize,
    j_star: usize,
    expected: f64,
    grad: Vec<f64>,
}

#[derive(Deserialize)]
struct TotalCase {
    grounding: f64,
    refinement: f64,
    lambda: f64,
    expected: f64,
}

#[derive(Deserialize)]
struct AccuracyCase {
    gts: Vec<[f64; 4]>,
    preds: Vec<[f64; 4]>,
    ious: Vec<f64>,
    expected: f64,
}

#[derive(Deserialize)]
struct PointCase {
    gt: [f64; 4],
    pred: [f64; 4],
    iou: f64,
    accurate: bool,
    point_hit: bool,
}

#[derive(Deserialize)]
struct Fixtures {
    iou: Vec<PairCase>,
    corners_to_center: Vec<ConvCase>,
    enclosing_diagonal_sq: Vec<PairCase>,
    ciou: Vec<CiouCase>,
    smooth_l1: Vec<SmoothCase>,
    target: TargetCase,
    kl: KlCase,
    ce: CeCase,
    total: TotalCase,
    accuracy: AccuracyCase,
    point_game: PointCase,
}

/// One fixture comparison: label and absolute deviation from the recorded value.
pub type Check = (String, f64);

fn push_all(out: &mut Vec<Check>, label: &str, got: &[f64], want: &[f64]) {
    if got.len() != want.len() {
        out.push((format!("{label} (length)"), f64::INFINITY));
        return;
    }
    let dev = got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    out.push((label.to_string(), dev));
}

fn flag(ok: bool) -> f64 {
    if ok {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Evaluates every case in `hand_oracles.json`.
pub fn fixture_checks() -> Vec<Check> {
    let text = std::fs::read_to_string(fixture_path("hand_oracles.json")).expect("fixture file");
    let f: Fixtures = serde_json::from_str(&text).expect("fixture schema");
    let mut out = Vec::new();

    for (i, c) in f.iou.iter().enumerate() {
        let got = iou(&CornerBox::from_array(c.a), &CornerBox::from_array(c.b));
        push_all(&mut out, &format!("iou[{i}]"), &[got], &[c.expected]);
    }
    for (i, c) in f.corners_to_center.iter().enumerate() {
        let got = corners_to_center(&CornerBox::from_array(c.bbox), c.width, c.height).unwrap();
        push_all(&mut out, &format!("corners_to_center[{i}]"), &got.to_array(), &c.expected);
    }
    for (i, c) in f.enclosing_diagonal_sq.iter().enumerate() {
        let to_center = |b: [f64; 4]| corners_to_center(&CornerBox::from_array(b), 1.0, 1.0).unwrap();
        let got = enclosing_diagonal_sq(&to_center(c.a), &to_center(c.b));
        push_all(&mut out, &format!("enclosing_diagonal_sq[{i}]"), &[got], &[c.expected]);
    }
    for (i, c) in f.ciou.iter().enumerate() {
        let b = ciou_loss(
            &CenterBox::from_array(c.pred),
            &CenterBox::from_array(c.gt),
            CiouOptions::default(),
        )
        .unwrap();
        push_all(&mut out, &format!("ciou[{i}]"), &[b.s, b.d, b.v, b.total], &[c.s, c.d, c.v, c.total]);
    }
    for (i, c) in f.smooth_l1.iter().enumerate() {
        let gt = CenterBox::from_array([0.5; 4]);
        let pred = CenterBox::from_array([0.5 + c.diff, 0.5, 0.5, 0.5]);
        push_all(&mut out, &format!("smooth_l1[{i}]"), &[smooth_l1(&pred, &gt).0], &[c.expected]);
    }

    let t = &f.target;
    let bundle = build_target_from_similarity(&t.u_row, &t.c_row, t.eta, t.eps).unwrap();
    push_all(&mut out, "target u_star", &bundle.u_star_row, &t.u_star);
    push_all(&mut out, "target p_target", &bundle.p_target_row, &t.p_target);
    push_all(&mut out, "target u_hat", &bundle.u_hat_row, &t.u_hat);
    out.push(("target support".into(), flag(bundle.support == t.support)));

    let logits: Vec<f64> = f.kl.probs.iter().map(|p| p.ln()).collect();
    let kl = kl_grounding_loss(&[logits], std::slice::from_ref(&f.kl.target), LossConfig::default().eps_kl).unwrap();
    push_all(&mut out, "kl", &[kl.value], &[f.kl.expected]);

    let uniform = vec![0.0; f.ce.k];
    let ce = ce_grounding_loss(&[uniform], &[f.ce.j_star]).unwrap();
    push_all(&mut out, "ce value", &[ce.value], &[f.ce.expected]);
    push_all(&mut out, "ce grad", &ce.grad_logits[0], &f.ce.grad);

    let cfg = LossConfig {
        lambda: f.total.lambda,
        ..LossConfig::referit()
    };
    let total = total_loss(
        &cfg,
        GroundingPart {
            value: f.total.grounding,
            grad_logits: Vec::new(),
        },
        RefinementPart {
            value: f.total.refinement,
            grad_boxes: Vec::new(),
        },
    );
    push_all(&mut out, "total", &[total.total], &[f.total.expected]);

    let a = &f.accuracy;
    let preds: Vec<CornerBox> = a.preds.iter().map(|b| CornerBox::from_array(*b)).collect();
    let gts: Vec<CornerBox> = a.gts.iter().map(|b| CornerBox::from_array(*b)).collect();
    let ious: Vec<f64> = preds.iter().zip(&gts).map(|(p, g)| iou(p, g)).collect();
    push_all(&mut out, "accuracy ious", &ious, &a.ious);
    push_all(&mut out, "accuracy", &[accuracy(&preds, &gts).unwrap()], &[a.expected]);

    let p = &f.point_game;
    let (pred, gt) = (CornerBox::from_array(p.pred), CornerBox::from_array(p.gt));
    push_all(&mut out, "point_game iou", &[iou(&pred, &gt)], &[p.iou]);
    out.push((
        "point_game flags".into(),
        flag(is_accurate(&pred, &gt) == p.accurate && is_point_hit(&pred, &gt) == p.point_hit),
    ));
    out
}

/// Side of the rasterization grid.
pub const GRID: usize = 1000;

/// IoU by counting the cells of a `GRID x GRID` raster over `[0, GRID]^2`
/// whose centers fall inside each box.
pub fn raster_iou(a: &CornerBox, b: &CornerBox) -> f64 {
    let inside = |bx: &CornerBox, x: f64, y: f64| x >= bx.x1 && x <= bx.x2 && y >= bx.y1 && y <= bx.y2;
    let lo = |v: f64| (v.floor().max(0.0)) as usize;
    let hi = |v: f64| (v.ceil() as usize).min(GRID);
    let (x0, x1) = (lo(a.x1.min(b.x1)), hi(a.x2.max(b.x2)));
    let (y0, y1) = (lo(a.y1.min(b.y1)), hi(a.y2.max(b.y2)));
    let (mut inter, mut union) = (0u64, 0u64);
    for iy in y0..y1 {
        let y = iy as f64 + 0.5;
        for ix in x0..x1 {
            let x = ix as f64 + 0.5;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// A box inside `[0, GRID]^2` with sides of at least `min_side` grid cells.
pub fn random_grid_box<R: Rng>(rng: &mut R, min_side: f64) -> CornerBox {
    let g = GRID as f64;
    let w = rng.random_range(min_side..g * 0.8);
    let h = rng.random_range(min_side..g * 0.8);
    let x1 = rng.random_range(0.0..g - w);
    let y1 = rng.random_range(0.0..g - h);
    CornerBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

/// A random box overlapping `anchor` often enough to exercise partial overlap.
pub fn random_nearby_box<R: Rng>(rng: &mut R, anchor: &CornerBox, min_side: f64) -> CornerBox {
    let g = GRID as f64;
    let w = (anchor.width() * rng.random_range(0.5..1.5)).clamp(min_side, g * 0.9);
    let h = (anchor.height() * rng.random_range(0.5..1.5)).clamp(min_side, g * 0.9);
    let (cx, cy) = anchor.center();
    let x1 = (cx - w / 2.0 + rng.random_range(-0.5..0.5) * w).clamp(0.0, g - w);
    let y1 = (cy - h / 2.0 + rng.random_range(-0.5..0.5) * h).clamp(0.0, g - h);
    CornerBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

/// Number of grid cell centers `i + 0.5` inside `[lo, hi]`.
pub fn raster_axis_count(lo: f64, hi: f64) -> usize {
    (0..GRID).filter(|i| {
        let c = *i as f64 + 0.5;
        c >= lo && c <= hi
    })
    .count()
}

/// Range of continuous IoUs consistent with the raster cell counts of `a`,
/// `b` and their overlap. A span holding `n` cell centers has length in
/// `[n - 1, n + 1]`.
pub fn raster_iou_interval(a: &CornerBox, b: &CornerBox) -> (f64, f64) {
    let span = |lo: f64, hi: f64| {
        let n = if hi >= lo { raster_axis_count(lo, hi) as f64 } else { 0.0 };
        ((n - 1.0).max(0.0), n + 1.0)
    };
    let area = |bx: &CornerBox| {
        let (w, h) = (span(bx.x1, bx.x2), span(bx.y1, bx.y2));
        (w.0 * h.0, w.1 * h.1)
    };
    let (a_min, a_max) = area(a);
    let (b_min, b_max) = area(b);
    let iw = span(a.x1.max(b.x1), a.x2.min(b.x2));
    let ih = span(a.y1.max(b.y1), a.y2.min(b.y2));
    let (i_min, i_max) = (iw.0 * ih.0, iw.1 * ih.1);
    let lo = i_min / (a_max + b_max - i_min);
    let denom = a_min + b_min - i_max;
    let hi = if denom > 0.0 { (i_max / denom).min(1.0) } else { 1.0 };
    (lo, hi)
}

/// A box with integer corners inside `[0, GRID]^2`, sides from 1 to `max_side` cells.
pub fn random_pixel_box<R: Rng>(rng: &mut R, max_side: usize) -> CornerBox {
    let w = rng.random_range(1..=max_side);
    let h = rng.random_range(1..=max_side);
    let x1 = rng.random_range(0..=GRID - w);
    let y1 = rng.random_range(0..=GRID - h);
    CornerBox::from_array([x1 as f64, y1 as f64, (x1 + w) as f64, (y1 + h) as f64])
}

/// `anchor` with every integer corner moved by up to `max_shift` cells.
pub fn jitter_pixel_box<R: Rng>(rng: &mut R, anchor: &CornerBox, max_shift: i64) -> CornerBox {
    let g = GRID as i64;
    let mut j = |v: f64| (v as i64 + rng.random_range(-max_shift..=max_shift)).clamp(0, g);
    let (mut x1, mut x2) = (j(anchor.x1), j(anchor.x2));
    let (mut y1, mut y2) = (j(anchor.y1), j(anchor.y2));
    if x1 > x2 {
        std::mem::swap(&mut x1, &mut x2);
    }
    if y1 > y2 {
        std::mem::swap(&mut y1, &mut y2);
    }
    CornerBox::from_array([x1 as f64, y1 as f64, (x2.max(x1 + 1)) as f64, (y2.max(y1 + 1)) as f64])
}
