//! C ABI for the dfcon detector.
//!
//! Every function returns a [`DfconStatus`]; on failure a message is kept
//! in thread-local storage and can be read with [`dfcon_last_error`].
//! Detectors are opaque handles created by [`dfcon_detector_load`] and
//! released with [`dfcon_detector_free`]. Panics never cross the boundary.
//!
//! Score orientation: higher means more likely real. Labels passed to the
//! metric functions are `1` for real and `0` for fake.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dfcon::consistency::{cross_loss, intra_loss, CrossBatch, CrossLossMode, IntraBatch};
use dfcon::metrics::{average_precision, roc_auc, Label, LabeledScores};
use dfcon::model::ConsistencyModel;
use dfcon::scorer::{score_stream, ScoreReport, ScoringConfig};
use dfcon::streams::{FrameFeatureSequence, Modality, StreamTriple};
use dfcon::Error;

/// Result codes. `1`-`3` match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfconStatus {
    Ok = 0,
    CheckFailed = 1,
    InvalidInput = 2,
    DataPrecondition = 3,
    NullPointer = 4,
    Panic = 5,
}

/// Loaded intra and cross models plus scoring settings.
pub struct DfconDetector {
    intra: ConsistencyModel,
    cross: ConsistencyModel,
    scoring: ScoringConfig,
}

/// Borrowed row-major `num_frames x dim` feature matrix.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DfconStream {
    pub frames: *const f32,
    pub num_frames: usize,
    pub dim: usize,
    pub frame_rate_hz: f64,
}

/// Scores plus the least consistent windows. Spans are half-open frame
/// ranges; intra spans index identity frames, the cross span visual frames.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DfconScoreReport {
    pub score_intra: f64,
    pub score_cross: f64,
    pub score_combined: f64,
    pub intra_span_a_start: u64,
    pub intra_span_a_end: u64,
    pub intra_span_b_start: u64,
    pub intra_span_b_end: u64,
    pub intra_min_sim: f64,
    pub cross_span_start: u64,
    pub cross_span_end: u64,
    pub cross_min_sim: f64,
}

/// Cross loss variants.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfconCrossMode {
    Symmetric = 0,
    /// Both terms use the video-to-audio row denominator.
    SharedDenominator = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> DfconStatus {
    match err.exit_code() {
        1 => DfconStatus::CheckFailed,
        2 => DfconStatus::InvalidInput,
        _ => DfconStatus::DataPrecondition,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), DfconStatus>) -> DfconStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DfconStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic".into());
            DfconStatus::Panic
        }
    }
}

fn fail(err: Error) -> DfconStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

fn null(what: &str) -> DfconStatus {
    set_error(format!("{what} is null"));
    DfconStatus::NullPointer
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, DfconStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        DfconStatus::InvalidInput
    })?;
    Ok(Path::new(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], DfconStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn report_to_c(r: &ScoreReport) -> DfconScoreReport {
    DfconScoreReport {
        score_intra: r.score_intra,
        score_cross: r.score_cross,
        score_combined: r.score_combined,
        intra_span_a_start: r.intra_argmin.span_a.0 as u64,
        intra_span_a_end: r.intra_argmin.span_a.1 as u64,
        intra_span_b_start: r.intra_argmin.span_b.0 as u64,
        intra_span_b_end: r.intra_argmin.span_b.1 as u64,
        intra_min_sim: r.intra_argmin.sim,
        cross_span_start: r.cross_argmin.span.0 as u64,
        cross_span_end: r.cross_argmin.span.1 as u64,
        cross_min_sim: r.cross_argmin.sim,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dfcon_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread (empty after a success).
/// Valid until the next dfcon call on the same thread.
#[no_mangle]
pub extern "C" fn dfcon_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads `intra.ckpt` and `cross.ckpt` from `checkpoint_dir` with default
/// scoring settings.
///
/// # Safety
/// `checkpoint_dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfcon_detector_load(checkpoint_dir: *const c_char, out: *mut *mut DfconDetector) -> DfconStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = path_arg(checkpoint_dir, "checkpoint_dir")?;
        let intra = ConsistencyModel::load(dir.join("intra.ckpt")).map_err(fail)?;
        let cross = ConsistencyModel::load(dir.join("cross.ckpt")).map_err(fail)?;
        let det = Box::new(DfconDetector {
            intra,
            cross,
            scoring: ScoringConfig::default(),
        });
        *out = Box::into_raw(det);
        Ok(())
    })
}

/// Overrides the intra percentile (in `(0, 100]`).
///
/// # Safety
/// `det` must come from [`dfcon_detector_load`].
#[no_mangle]
pub unsafe extern "C" fn dfcon_detector_set_percentile(det: *mut DfconDetector, percentile_n: f64) -> DfconStatus {
    guard(|| {
        let det = det.as_mut().ok_or_else(|| null("detector"))?;
        let cfg = ScoringConfig {
            percentile_n,
            ..det.scoring.clone()
        };
        cfg.validate().map_err(fail)?;
        det.scoring = cfg;
        Ok(())
    })
}

/// # Safety
/// `det` must come from [`dfcon_detector_load`] and not be used afterwards.
/// Null is accepted.
#[no_mangle]
pub unsafe extern "C" fn dfcon_detector_free(det: *mut DfconDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Scores the stream triple stored in `stream_dir`.
///
/// # Safety
/// `det` must be a live detector, `stream_dir` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dfcon_detector_score_dir(
    det: *const DfconDetector,
    stream_dir: *const c_char,
    out: *mut DfconScoreReport,
) -> DfconStatus {
    guard(|| {
        let det = det.as_ref().ok_or_else(|| null("detector"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let dir = path_arg(stream_dir, "stream_dir")?;
        let triple = StreamTriple::load(dir).map_err(fail)?;
        let report = score_stream(&triple, &det.intra, &det.cross, &det.scoring).map_err(fail)?;
        *out = report_to_c(&report);
        Ok(())
    })
}

unsafe fn stream_arg(s: *const DfconStream, modality: Modality) -> Result<FrameFeatureSequence, DfconStatus> {
    let s = s.as_ref().ok_or_else(|| null(modality.as_str()))?;
    let frames = slice_arg(s.frames, s.num_frames.saturating_mul(s.dim), modality.as_str())?;
    FrameFeatureSequence::new(modality, s.dim, s.frame_rate_hz, frames.to_vec(), String::new(), String::new()).map_err(fail)
}

/// Scores in-memory feature matrices.
///
/// # Safety
/// Each stream's `frames` must point to `num_frames * dim` floats; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfcon_detector_score_buffers(
    det: *const DfconDetector,
    identity: *const DfconStream,
    visual: *const DfconStream,
    audio: *const DfconStream,
    out: *mut DfconScoreReport,
) -> DfconStatus {
    guard(|| {
        let det = det.as_ref().ok_or_else(|| null("detector"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let triple = StreamTriple {
            identity: stream_arg(identity, Modality::Identity)?,
            visual: stream_arg(visual, Modality::Visual)?,
            audio: stream_arg(audio, Modality::Audio)?,
        };
        let report = score_stream(&triple, &det.intra, &det.cross, &det.scoring).map_err(fail)?;
        *out = report_to_c(&report);
        Ok(())
    })
}

unsafe fn labeled(scores: *const f64, labels: *const u8, n: usize) -> Result<LabeledScores, DfconStatus> {
    let s = slice_arg(scores, n, "scores")?;
    let l = slice_arg(labels, n, "labels")?;
    let labels = l.iter().map(|&f| Label::from_flag(f)).collect::<Result<Vec<_>, _>>().map_err(fail)?;
    LabeledScores::new(s.to_vec(), labels).map_err(fail)
}

/// ROC AUC (real = 1 outranking fake = 0, ties one half).
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfcon_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> DfconStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = roc_auc(&labeled(scores, labels, n)?).map_err(fail)?;
        Ok(())
    })
}

/// Step-wise average precision with fake as the positive class.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfcon_average_precision(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> DfconStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = average_precision(&labeled(scores, labels, n)?).map_err(fail)?;
        Ok(())
    })
}

/// Intra-modal loss of unit-norm embeddings `mu` (`identities x samples x
/// dim`, identity-major).
///
/// # Safety
/// `mu` must hold `identities * samples * dim` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dfcon_intra_loss(
    mu: *const f64,
    identities: usize,
    samples: usize,
    dim: usize,
    tau: f64,
    out: *mut f64,
) -> DfconStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let mu = slice_arg(mu, identities * samples * dim, "mu")?;
        let batch = IntraBatch::new(identities, samples, dim, mu.to_vec()).map_err(fail)?;
        *out = intra_loss(&batch, tau).map_err(fail)?;
        Ok(())
    })
}

/// Cross-modal loss of unit-norm visual `gamma` and audio `alpha`
/// embeddings (`identities x windows x dim` each).
///
/// # Safety
/// `gamma` and `alpha` must each hold `identities * windows * dim` doubles;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfcon_cross_loss(
    gamma: *const f64,
    alpha: *const f64,
    identities: usize,
    windows: usize,
    dim: usize,
    tau: f64,
    mode: DfconCrossMode,
    out: *mut f64,
) -> DfconStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let n = identities * windows * dim;
        let gamma = slice_arg(gamma, n, "gamma")?;
        let alpha = slice_arg(alpha, n, "alpha")?;
        let batch = CrossBatch::new(identities, windows, dim, gamma.to_vec(), alpha.to_vec()).map_err(fail)?;
        let mode = match mode {
            DfconCrossMode::Symmetric => CrossLossMode::Symmetric,
            DfconCrossMode::SharedDenominator => CrossLossMode::SharedDenominator,
        };
        *out = cross_loss(&batch, tau, mode).map_err(fail)?;
        Ok(())
    })
}
