//! Patient-level evaluation.
//!
//! Each patient gets a PSTT (the fraction of their slices that are
//! tumor-indicative) and is declared tumor-positive when it strictly exceeds
//! a global threshold (GTT). Accuracy, precision, recall and F1 are then
//! computed over patients instead of slices.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{
    CohortManifest, ConfusionCounts, Label, PatientRecord, PatientVerdict, SlicePrediction, ValidationError,
};
use crate::slice_metrics::{f1, is_tumor_indicative, precision, recall, MetricsError, Score, SliceEvalConfig};

/// Operating threshold used when no calibration is supplied.
pub const DEFAULT_GTT: f64 = 0.04;

/// Description of the quantile convention, echoed in calibration output.
pub const QUANTILE_RULE: &str = "linear interpolation between order statistics at position (n-1)*q";

/// Fraction of the patient's (filter-admitted) slices that are
/// tumor-indicative. A patient with no admitted slices scores 0.
pub fn pstt(
    patient: &PatientRecord,
    preds: &BTreeMap<String, SlicePrediction>,
    cfg: &SliceEvalConfig,
) -> Result<f64, MetricsError> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for slice in patient.slices().iter().filter(|s| cfg.includes(s)) {
        let pred = preds
            .get(slice.slice_id())
            .ok_or_else(|| MetricsError::MissingPrediction(slice.slice_id().to_string()))?;
        total += 1;
        if is_tumor_indicative(pred, cfg) {
            hits += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsttSample {
    pub patient_id: String,
    pub pstt: f64,
    pub label: Label,
}

/// PSTT for every patient, ordered by patient_id.
pub fn pstt_samples(
    cohort: &CohortManifest,
    preds: &BTreeMap<String, SlicePrediction>,
    cfg: &SliceEvalConfig,
) -> Result<Vec<PsttSample>, MetricsError> {
    let mut samples = cohort
        .patients()
        .par_iter()
        .map(|p| {
            Ok(PsttSample {
                patient_id: p.patient_id().to_string(),
                pstt: pstt(p, preds, cfg)?,
                label: p.label(),
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    samples.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(samples)
}

/// Quantile of already-sorted data, interpolating linearly between the
/// order statistics around position `(n - 1) * q`.
///
/// Panics if `sorted` is empty or `q` is outside `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    assert!((0.0..=1.0).contains(&q), "quantile level {q} outside [0, 1]");
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GttCalibration {
    pub gtt: f64,
    pub q1: f64,
    pub median: f64,
    pub quantile_rule: String,
    pub sample_pstt: Vec<PsttSample>,
}

/// GTT = mean of the first quartile and the median of the Tumor-labeled
/// samples' PSTT values. Samples of other labels are carried through for
/// the record but do not affect the threshold.
pub fn calibrate_gtt(samples: &[PsttSample]) -> Result<GttCalibration, MetricsError> {
    let mut tumor: Vec<f64> = samples
        .iter()
        .filter(|s| s.label == Label::Tumor)
        .map(|s| s.pstt)
        .collect();
    if tumor.is_empty() {
        return Err(MetricsError::NoTumorSamples);
    }
    if let Some(s) = samples.iter().find(|s| !(0.0..=1.0).contains(&s.pstt)) {
        return Err(ValidationError::new(
            "pstt",
            format!("sample `{}` has pstt {} outside [0, 1]", s.patient_id, s.pstt),
        )
        .into());
    }
    tumor.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&tumor, 0.25);
    let median = quantile_sorted(&tumor, 0.5);
    Ok(GttCalibration {
        gtt: (q1 + median) / 2.0,
        q1,
        median,
        quantile_rule: QUANTILE_RULE.to_string(),
        sample_pstt: samples.to_vec(),
    })
}

/// Tumor iff `pstt_value > gtt` (strict).
pub fn classify_patient(pstt_value: f64, gtt: f64) -> Label {
    if pstt_value > gtt {
        Label::Tumor
    } else {
        Label::Normal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtpReport {
    pub ptp_accuracy: Score,
    pub ptp_precision: Score,
    pub ptp_recall: Score,
    /// Always a value: reported as 0 when precision or recall is
    /// NotApplicable (those fields then carry the NA marker).
    pub ptp_f1: Score,
    pub patient_confusion: ConfusionCounts,
    pub verdicts: Vec<PatientVerdict>,
}

pub fn check_gtt(gtt: f64) -> Result<(), ValidationError> {
    if gtt.is_finite() && (0.0..=1.0).contains(&gtt) {
        Ok(())
    } else {
        Err(ValidationError::new("gtt", format!("{gtt} is outside [0, 1]")))
    }
}

/// Patient-level verdicts and PTP metrics for a whole cohort.
pub fn ptp_evaluate(
    cohort: &CohortManifest,
    preds: &BTreeMap<String, SlicePrediction>,
    gtt: f64,
    cfg: &SliceEvalConfig,
) -> Result<PtpReport, MetricsError> {
    check_gtt(gtt)?;
    let samples = pstt_samples(cohort, preds, cfg)?;
    let mut confusion = ConfusionCounts::default();
    let mut verdicts = Vec::with_capacity(samples.len());
    for s in &samples {
        let verdict = PatientVerdict::new(&s.patient_id, s.pstt, gtt)?;
        confusion.record(s.label, verdict.decision());
        verdicts.push(verdict);
    }
    let p = precision(&confusion);
    let r = recall(&confusion);
    let ptp_f1 = match f1(p, r) {
        Score::NotApplicable => Score::Value(0.0),
        v => v,
    };
    Ok(PtpReport {
        ptp_accuracy: Score::ratio(confusion.tp + confusion.tn, confusion.total()),
        ptp_precision: p,
        ptp_recall: r,
        ptp_f1,
        patient_confusion: confusion,
        verdicts,
    })
}
