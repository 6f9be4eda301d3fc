//! C ABI for ptp-core.
//!
//! Objects are opaque handles created by `*_new`/`*_from_*` functions and
//! released with the matching `*_free`. Every fallible call returns a
//! [`PtpStatus`]; on failure a description is available from
//! [`ptp_last_error_message`] on the same thread. Strings returned by the
//! library must be released with [`ptp_string_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ptp_core::cohort::{CohortManifest, Label, SlicePrediction};
use ptp_core::ingest::{self, IngestError, ScanMode};
use ptp_core::ptp::{self as metrics, PsttSample};
use ptp_core::report::{emit, MetricsReport, ReportFormat};
use ptp_core::slice_metrics::{self, ClassMetrics, MetricsError, Score, SliceEvalConfig, SliceMetricsSection};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PtpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Input parsed but violates a domain rule.
    Validation = 3,
    /// Input could not be parsed.
    Parse = 4,
    Io = 5,
    /// A metric could not be computed (e.g. no Tumor samples).
    Metrics = 6,
    Panic = 7,
}

/// A loaded cohort manifest.
pub struct PtpCohort(CohortManifest);

/// Per-slice predictions keyed by slice id.
pub struct PtpPredictions(BTreeMap<String, SlicePrediction>);

/// A metric value; `applicable` is false when its denominator was zero,
/// in which case `value` is 0.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PtpScore {
    pub value: f64,
    pub applicable: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PtpSliceConfig {
    pub conf_threshold: f64,
    pub min_boxes: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PtpConfusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PtpSliceMetrics {
    pub precision: PtpScore,
    pub recall: PtpScore,
    pub f1: PtpScore,
    pub confusion: PtpConfusion,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PtpPatientMetrics {
    pub accuracy: PtpScore,
    pub precision: PtpScore,
    pub recall: PtpScore,
    pub f1: PtpScore,
    pub confusion: PtpConfusion,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PtpGtt {
    pub gtt: f64,
    pub q1: f64,
    pub median: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PtpStatus, String);

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        let status = match &e {
            _ if e.is_io() => PtpStatus::Io,
            IngestError::InvariantViolation(_) | IngestError::OutOfRangeCoordinate { .. } => PtpStatus::Validation,
            IngestError::UnknownSliceFile(_) => PtpStatus::Validation,
            _ => PtpStatus::Parse,
        };
        Failure(status, e.to_string())
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        let status = match e {
            MetricsError::InvalidConfig(_) => PtpStatus::Validation,
            _ => PtpStatus::Metrics,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PtpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PtpStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PtpStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(PtpStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(PtpStatus::InvalidUtf8, format!("`{what}`: {e}")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn score(s: Score) -> PtpScore {
    match s {
        Score::Value(value) => PtpScore {
            value,
            applicable: true,
        },
        Score::NotApplicable => PtpScore {
            value: 0.0,
            applicable: false,
        },
    }
}

fn unscore(s: PtpScore) -> Score {
    if s.applicable {
        Score::Value(s.value)
    } else {
        Score::NotApplicable
    }
}

fn config(c: PtpSliceConfig) -> Result<SliceEvalConfig, Failure> {
    SliceEvalConfig::new(c.conf_threshold, c.min_boxes).map_err(|e| Failure(PtpStatus::Validation, e.to_string()))
}

fn confusion_of(c: &ptp_core::ConfusionCounts) -> PtpConfusion {
    PtpConfusion {
        tp: c.tp,
        fp: c.fp,
        tn: c.tn,
        fn_: c.fn_,
    }
}

/// Predictions for every cohort slice; slices without an entry count as
/// empty, like a missing prediction file.
fn completed(cohort: &CohortManifest, preds: &BTreeMap<String, SlicePrediction>) -> BTreeMap<String, SlicePrediction> {
    cohort
        .slices()
        .map(|s| {
            let p = preds
                .get(s.slice_id())
                .cloned()
                .unwrap_or_else(|| SlicePrediction::empty(s.slice_id()));
            (s.slice_id().to_string(), p)
        })
        .collect()
}

/// Message for the most recent failed call on this thread, or null. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn ptp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ptp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn ptp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a cohort manifest from JSON text.
#[no_mangle]
pub unsafe extern "C" fn ptp_cohort_from_json(json: *const c_char, out_cohort: *mut *mut PtpCohort) -> PtpStatus {
    guard(|| {
        let slot = out(out_cohort, "out_cohort")?;
        let cohort = ingest::parse_manifest(text(json, "json")?)?;
        *slot = Box::into_raw(Box::new(PtpCohort(cohort)));
        Ok(())
    })
}

/// Reads a cohort manifest from a file.
#[no_mangle]
pub unsafe extern "C" fn ptp_cohort_read(path: *const c_char, out_cohort: *mut *mut PtpCohort) -> PtpStatus {
    guard(|| {
        let slot = out(out_cohort, "out_cohort")?;
        let cohort = ingest::read_manifest(Path::new(text(path, "path")?))?;
        *slot = Box::into_raw(Box::new(PtpCohort(cohort)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ptp_cohort_free(cohort: *mut PtpCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ptp_cohort_patient_count(cohort: *const PtpCohort, out_count: *mut usize) -> PtpStatus {
    guard(|| {
        *out(out_count, "out_count")? = borrow(cohort, "cohort")?.0.patients().len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ptp_cohort_slice_count(cohort: *const PtpCohort, out_count: *mut usize) -> PtpStatus {
    guard(|| {
        *out(out_count, "out_count")? = borrow(cohort, "cohort")?.0.slice_count();
        Ok(())
    })
}

/// An empty prediction set.
#[no_mangle]
pub unsafe extern "C" fn ptp_predictions_new(out_preds: *mut *mut PtpPredictions) -> PtpStatus {
    guard(|| {
        *out(out_preds, "out_preds")? = Box::into_raw(Box::new(PtpPredictions(BTreeMap::new())));
        Ok(())
    })
}

/// Parses one prediction file's text and stores it for `slice_id`,
/// replacing any earlier entry.
#[no_mangle]
pub unsafe extern "C" fn ptp_predictions_add(
    preds: *mut PtpPredictions,
    slice_id: *const c_char,
    file_text: *const c_char,
) -> PtpStatus {
    guard(|| {
        let preds = out(preds, "preds")?;
        let id = text(slice_id, "slice_id")?;
        let pred = ingest::parse_prediction_file(id, text(file_text, "file_text")?)?;
        preds.0.insert(id.to_string(), pred);
        Ok(())
    })
}

/// Reads a prediction directory laid out like the cohort's relative paths.
/// In strict mode stray `.txt` files are an error.
#[no_mangle]
pub unsafe extern "C" fn ptp_predictions_scan(
    root: *const c_char,
    cohort: *const PtpCohort,
    strict: bool,
    out_preds: *mut *mut PtpPredictions,
) -> PtpStatus {
    guard(|| {
        let slot = out(out_preds, "out_preds")?;
        let mode = if strict { ScanMode::Strict } else { ScanMode::Lenient };
        let scan = ingest::scan_prediction_dir(Path::new(text(root, "root")?), &borrow(cohort, "cohort")?.0, mode)?;
        *slot = Box::into_raw(Box::new(PtpPredictions(scan.predictions)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ptp_predictions_len(preds: *const PtpPredictions, out_len: *mut usize) -> PtpStatus {
    guard(|| {
        *out(out_len, "out_len")? = borrow(preds, "preds")?.0.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ptp_predictions_free(preds: *mut PtpPredictions) {
    if !preds.is_null() {
        drop(Box::from_raw(preds));
    }
}

/// Slice-level metrics for the Tumor class.
#[no_mangle]
pub unsafe extern "C" fn ptp_evaluate_slices(
    cohort: *const PtpCohort,
    preds: *const PtpPredictions,
    cfg: PtpSliceConfig,
    out_metrics: *mut PtpSliceMetrics,
) -> PtpStatus {
    guard(|| {
        let slot = out(out_metrics, "out_metrics")?;
        let cohort = &borrow(cohort, "cohort")?.0;
        let preds = completed(cohort, &borrow(preds, "preds")?.0);
        let c = slice_metrics::confusion(&preds, cohort, &config(cfg)?)?;
        let m = slice_metrics::class_metrics(&c);
        *slot = PtpSliceMetrics {
            precision: score(m.precision),
            recall: score(m.recall),
            f1: score(m.f1),
            confusion: confusion_of(&c),
        };
        Ok(())
    })
}

/// Patient-level metrics at threshold `gtt`.
#[no_mangle]
pub unsafe extern "C" fn ptp_evaluate(
    cohort: *const PtpCohort,
    preds: *const PtpPredictions,
    cfg: PtpSliceConfig,
    gtt: f64,
    out_metrics: *mut PtpPatientMetrics,
) -> PtpStatus {
    guard(|| {
        let slot = out(out_metrics, "out_metrics")?;
        let cohort = &borrow(cohort, "cohort")?.0;
        let preds = completed(cohort, &borrow(preds, "preds")?.0);
        let r = metrics::ptp_evaluate(cohort, &preds, gtt, &config(cfg)?)?;
        *slot = PtpPatientMetrics {
            accuracy: score(r.ptp_accuracy),
            precision: score(r.ptp_precision),
            recall: score(r.ptp_recall),
            f1: score(r.ptp_f1),
            confusion: confusion_of(&r.patient_confusion),
        };
        Ok(())
    })
}

/// Calibrates the general tumor threshold from Tumor-patient PSTT values.
#[no_mangle]
pub unsafe extern "C" fn ptp_calibrate_gtt(values: *const f64, len: usize, out_gtt: *mut PtpGtt) -> PtpStatus {
    guard(|| {
        let slot = out(out_gtt, "out_gtt")?;
        let values: &[f64] = if len == 0 {
            &[]
        } else if values.is_null() {
            return Err(null("values"));
        } else {
            std::slice::from_raw_parts(values, len)
        };
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Failure(PtpStatus::Validation, format!("pstt {v} is outside [0, 1]")));
        }
        let samples: Vec<PsttSample> = values
            .iter()
            .enumerate()
            .map(|(i, &pstt)| PsttSample {
                patient_id: format!("{i}"),
                pstt,
                label: Label::Tumor,
            })
            .collect();
        let c = metrics::calibrate_gtt(&samples)?;
        *slot = PtpGtt {
            gtt: c.gtt,
            q1: c.q1,
            median: c.median,
        };
        Ok(())
    })
}

/// Harmonic mean of precision and recall; 0 when both are 0, not
/// applicable when either input is not applicable.
#[no_mangle]
pub extern "C" fn ptp_f1(precision: PtpScore, recall: PtpScore) -> PtpScore {
    score(slice_metrics::f1(unscore(precision), unscore(recall)))
}

/// Support-weighted mean of per-class F1 values.
#[no_mangle]
pub unsafe extern "C" fn ptp_weighted_f1(
    f1: *const f64,
    support: *const u64,
    len: usize,
    out_score: *mut PtpScore,
) -> PtpStatus {
    guard(|| {
        let slot = out(out_score, "out_score")?;
        if len > 0 && (f1.is_null() || support.is_null()) {
            return Err(null(if f1.is_null() { "f1" } else { "support" }));
        }
        let rows: Vec<ClassMetrics> = (0..len)
            .map(|i| {
                let v = Score::Value(*f1.add(i));
                ClassMetrics {
                    precision: v,
                    recall: v,
                    f1: v,
                    support: *support.add(i),
                }
            })
            .collect();
        *slot = score(slice_metrics::weighted_average(&rows)?.f1);
        Ok(())
    })
}

/// Full report (slice section and patient section) as canonical JSON.
/// Release the returned string with `ptp_string_free`.
#[no_mangle]
pub unsafe extern "C" fn ptp_report_json(
    cohort: *const PtpCohort,
    preds: *const PtpPredictions,
    cfg: PtpSliceConfig,
    gtt: f64,
    out_json: *mut *mut c_char,
) -> PtpStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        let cohort = &borrow(cohort, "cohort")?.0;
        let preds = completed(cohort, &borrow(preds, "preds")?.0);
        let cfg = config(cfg)?;
        let echo = serde_json::json!({
            "command": "ffi",
            "slice_eval": &cfg,
            "gtt": { "value": gtt, "source": "argument" },
        });
        let mut report = MetricsReport::new(echo);
        let c = slice_metrics::confusion(&preds, cohort, &cfg)?;
        report.slice_metrics = match SliceMetricsSection::from_confusion(c) {
            Ok(s) => Some(s),
            Err(MetricsError::ZeroTotalSupport) => None,
            Err(e) => return Err(e.into()),
        };
        report.ptp = Some(metrics::ptp_evaluate(cohort, &preds, gtt, &cfg)?);
        let text = emit(&report, ReportFormat::Json);
        *slot = CString::new(text).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}
