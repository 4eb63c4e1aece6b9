//! C ABI over the grounding-loss library.
//!
//! Every function returns a [`GlStatus`]. On failure a message is kept per
//! thread and can be copied out with [`gl_last_error_message`]. Datasets and
//! trained parameters cross the boundary as opaque handles that must be
//! released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use grounding_loss::evalio::{self, GroundingExample};
use grounding_loss::geometry::{self, CenterBox, CiouOptions, CornerBox};
use grounding_loss::losses::{GroundingKind, LossConfig, RefinementKind};
use grounding_loss::model::HeadParameters;
use grounding_loss::targets::{build_target, ClassDistribution};
use grounding_loss::trainer::{self, SynthConfig, TrainConfig};
use grounding_loss::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    InvalidTarget = 3,
    Parse = 4,
    Schema = 5,
    Io = 6,
    Numerical = 7,
    Usage = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlGrounding {
    Ce = 0,
    Kl = 1,
    KlSem = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlRefinement {
    SmoothL1 = 0,
    CiouSem = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlCiouBreakdown {
    pub s: f64,
    pub d: f64,
    pub v: f64,
    pub iou: f64,
    pub alpha: f64,
    pub total: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlTrainOptions {
    pub grounding: GlGrounding,
    pub refinement: GlRefinement,
    pub eta: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlEvalReport {
    pub accuracy: f64,
    pub point_game_accuracy: f64,
    pub n_queries: usize,
}

/// Opaque dataset handle.
pub struct GlDataset {
    examples: Vec<GroundingExample>,
}

/// Opaque handle to trained head parameters.
pub struct GlParams {
    params: HeadParameters,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> GlStatus {
    match err {
        Error::InvalidInput(_) => GlStatus::InvalidInput,
        Error::InvalidTarget(_) => GlStatus::InvalidTarget,
        Error::Parse { .. } | Error::Json(_) => GlStatus::Parse,
        Error::Schema(_) => GlStatus::Schema,
        Error::Usage(_) => GlStatus::Usage,
        Error::Numerical { .. } => GlStatus::Numerical,
        Error::Io(_) => GlStatus::Io,
    }
}

struct Fail(GlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GlStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            GlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GlStatus::Panic
        }
    }
}

unsafe fn read4(p: *const f64, what: &str) -> Result<[f64; 4], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = std::slice::from_raw_parts(p, 4);
    Ok([s[0], s[1], s[2], s[3]])
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(GlStatus::InvalidInput, "path is not valid UTF-8".into()))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// IoU of two pixel boxes given as `[x1, y1, x2, y2]`.
///
/// # Safety
/// `a` and `b` must point to 4 doubles, `out` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn gl_iou(a: *const f64, b: *const f64, out: *mut f64) -> GlStatus {
    guard(|| {
        let a = CornerBox::from_array(read4(a, "a")?);
        let b = CornerBox::from_array(read4(b, "b")?);
        for bx in [&a, &b] {
            CornerBox::new(bx.x1, bx.y1, bx.x2, bx.y2)?;
        }
        write_out(out, geometry::iou(&a, &b))
    })
}

/// CIoU loss of a predicted box against a target, both `[cx, cy, w, h]`.
/// `grad` receives the gradient with respect to the prediction and may be null.
///
/// # Safety
/// `pred` and `gt` must point to 4 doubles, `out` to a writable breakdown,
/// `grad` to 4 writable doubles or be null.
#[no_mangle]
pub unsafe extern "C" fn gl_ciou(
    pred: *const f64,
    gt: *const f64,
    v_unsquared: bool,
    alpha_constant: bool,
    out: *mut GlCiouBreakdown,
    grad: *mut f64,
) -> GlStatus {
    guard(|| {
        let pred = CenterBox::from_array(read4(pred, "pred")?);
        let gt = CenterBox::from_array(read4(gt, "gt")?);
        let opts = CiouOptions {
            v_unsquared,
            alpha_constant,
        };
        let (b, g) = geometry::ciou_loss_and_grad(&pred, &gt, opts)?;
        write_out(
            out,
            GlCiouBreakdown {
                s: b.s,
                d: b.d,
                v: b.v,
                iou: b.iou,
                alpha: b.alpha,
                total: b.total,
            },
        )?;
        if !grad.is_null() {
            std::slice::from_raw_parts_mut(grad, 4).copy_from_slice(&g);
        }
        Ok(())
    })
}

/// Semantic grounding target for one query.
///
/// `u_row` holds `k` IoUs, `class_probs` is `k x n_classes` row-major.
/// `p_target` and `u_hat` receive `k` values each.
///
/// # Safety
/// All array pointers must cover the sizes above; scalar outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_build_target(
    u_row: *const f64,
    k: usize,
    class_probs: *const f64,
    n_classes: usize,
    eta: f64,
    eps: f64,
    p_target: *mut f64,
    u_hat: *mut f64,
    j_star: *mut usize,
    fallback_used: *mut bool,
) -> GlStatus {
    guard(|| {
        if u_row.is_null() || class_probs.is_null() || p_target.is_null() || u_hat.is_null() {
            return Err(null("array argument"));
        }
        let u = std::slice::from_raw_parts(u_row, k);
        let probs = std::slice::from_raw_parts(class_probs, k * n_classes)
            .chunks(n_classes.max(1))
            .map(|c| ClassDistribution::new(c.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let t = build_target(u, &probs, eta, eps)?;
        std::slice::from_raw_parts_mut(p_target, k).copy_from_slice(&t.p_target_row);
        std::slice::from_raw_parts_mut(u_hat, k).copy_from_slice(&t.u_hat_row);
        write_out(j_star, t.j_star)?;
        write_out(fallback_used, t.fallback_used)
    })
}

fn into_handle<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Synthetic dataset with the default generator settings apart from the arguments.
///
/// # Safety
/// `out` must be writable; the handle is released with [`gl_dataset_free`].
#[no_mangle]
pub unsafe extern "C" fn gl_dataset_generate(
    seed: u64,
    k: usize,
    classes: usize,
    examples: usize,
    out: *mut *mut GlDataset,
) -> GlStatus {
    guard(|| {
        let cfg = SynthConfig {
            seed,
            k,
            n_classes: classes,
            n_examples: examples,
            ..SynthConfig::default()
        };
        let examples = trainer::gen_synthetic(&cfg)?;
        write_out(out, into_handle(GlDataset { examples }))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gl_dataset_read(path: *const c_char, out: *mut *mut GlDataset) -> GlStatus {
    guard(|| {
        let examples = evalio::read_examples(path_arg(path)?)?;
        write_out(out, into_handle(GlDataset { examples }))
    })
}

/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gl_dataset_write(ds: *const GlDataset, path: *const c_char) -> GlStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        evalio::write_examples(&ds.examples, path_arg(path)?)?;
        Ok(())
    })
}

/// Number of examples, 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_dataset_len(ds: *const GlDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.examples.len())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gl_dataset_free(ds: *mut GlDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Default training options (KL-Sem + CIoU-Sem, eta 0.3, lambda 1, 9 epochs, lr 0.001).
#[no_mangle]
pub extern "C" fn gl_train_options_default() -> GlTrainOptions {
    let d = TrainConfig::default();
    GlTrainOptions {
        grounding: GlGrounding::KlSem,
        refinement: GlRefinement::CiouSem,
        eta: d.loss.eta,
        lambda: d.loss.lambda,
        epochs: d.epochs,
        lr: d.lr0,
        seed: d.seed,
    }
}

fn train_config(o: &GlTrainOptions) -> TrainConfig {
    TrainConfig {
        loss: LossConfig {
            grounding: match o.grounding {
                GlGrounding::Ce => GroundingKind::Ce,
                GlGrounding::Kl => GroundingKind::Kl,
                GlGrounding::KlSem => GroundingKind::KlSem,
            },
            refinement: match o.refinement {
                GlRefinement::SmoothL1 => RefinementKind::SmoothL1,
                GlRefinement::CiouSem => RefinementKind::CiouSem,
            },
            eta: o.eta,
            lambda: o.lambda,
            ..LossConfig::default()
        },
        epochs: o.epochs,
        lr0: o.lr,
        seed: o.seed,
        ..TrainConfig::default()
    }
}

/// Trains a head on `ds`. `val_accuracy` may be null.
///
/// # Safety
/// `ds` must be a live handle, `opts` readable, `out` writable; the
/// parameters are released with [`gl_params_free`].
#[no_mangle]
pub unsafe extern "C" fn gl_train(
    ds: *const GlDataset,
    opts: *const GlTrainOptions,
    out: *mut *mut GlParams,
    val_accuracy: *mut f64,
) -> GlStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let opts = handle(opts, "options")?;
        let report = trainer::train(&ds.examples, &train_config(opts))?;
        if !val_accuracy.is_null() {
            val_accuracy.write(report.val_accuracy);
        }
        write_out(out, into_handle(GlParams { params: report.params }))
    })
}

/// Accuracy and pointing-game accuracy of `params` over every query of `ds`.
///
/// # Safety
/// Both handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gl_evaluate(ds: *const GlDataset, params: *const GlParams, out: *mut GlEvalReport) -> GlStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let params = handle(params, "params")?;
        let preds = trainer::predict(&ds.examples, &params.params)?;
        let r = evalio::evaluate(&ds.examples, &preds)?;
        write_out(
            out,
            GlEvalReport {
                accuracy: r.accuracy,
                point_game_accuracy: r.point_game_accuracy,
                n_queries: r.n_queries,
            },
        )
    })
}

/// # Safety
/// `params` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gl_params_save(params: *const GlParams, path: *const c_char) -> GlStatus {
    guard(|| {
        let p = handle(params, "params")?;
        evalio::save_checkpoint(&p.params, path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gl_params_load(path: *const c_char, out: *mut *mut GlParams) -> GlStatus {
    guard(|| {
        let params = evalio::load_checkpoint(path_arg(path)?)?;
        write_out(out, into_handle(GlParams { params }))
    })
}

/// Number of scalar parameters, 0 for a null handle.
///
/// # Safety
/// `params` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_params_num_params(params: *const GlParams) -> usize {
    params.as_ref().map_or(0, |p| p.params.num_params())
}

/// # Safety
/// `params` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gl_params_free(params: *mut GlParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_and_error_message() {
        let (a, b) = ([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]);
        let mut v = 0.0;
        assert_eq!(unsafe { gl_iou(a.as_ptr(), b.as_ptr(), &mut v) }, GlStatus::Ok);
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(
            unsafe { gl_iou(a.as_ptr(), std::ptr::null(), &mut v) },
            GlStatus::NullPointer
        );
        let mut buf = [0 as c_char; 64];
        let n = unsafe { gl_last_error_message(buf.as_mut_ptr(), buf.len()) };
        let msg = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
        assert_eq!(n, msg.len());
        assert!(msg.contains("null"));
    }

    #[test]
    fn degenerate_target_is_reported() {
        let (p, g) = ([0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.0, 0.2]);
        let mut out = GlCiouBreakdown {
            s: 0.0,
            d: 0.0,
            v: 0.0,
            iou: 0.0,
            alpha: 0.0,
            total: 0.0,
        };
        let st = unsafe { gl_ciou(p.as_ptr(), g.as_ptr(), false, true, &mut out, std::ptr::null_mut()) };
        assert_eq!(st, GlStatus::InvalidTarget);
    }
}
