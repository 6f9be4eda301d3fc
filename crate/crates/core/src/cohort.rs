//! Shared domain vocabulary: boxes, slices, patients, cohorts, verdicts.
//!
//! Every type validates its invariants at construction time and is
//! immutable afterwards. Serde deserialization goes through the same
//! validating constructors, so a value parsed from disk is as trustworthy
//! as one built in code.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A constructor rejected its input. `field` names the offending field
/// (dotted path when nested, e.g. `patients[3].slices[0].gt_boxes[1].cx`).
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid `{field}`: {reason}")]
pub struct ValidationError {
    pub field: String,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }

    fn nested(self, prefix: &str) -> Self {
        Self {
            field: format!("{prefix}.{}", self.field),
            reason: self.reason,
        }
    }
}

fn check_unit(field: &str, value: f64) -> Result<(), ValidationError> {
    if !value.is_finite() || !(0.0..=1.0).contains(&value) {
        return Err(ValidationError::new(field, format!("{value} is outside [0, 1]")));
    }
    Ok(())
}

/// Binary ground-truth or predicted status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Tumor,
    Normal,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Tumor => "Tumor",
            Label::Normal => "Normal",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[allow(non_camel_case_types)]
pub enum Modality {
    MRI_T1,
    MRI_T2,
    MRI_DWI,
    PET,
    CT,
    UNKNOWN,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::MRI_T1,
        Modality::MRI_T2,
        Modality::MRI_DWI,
        Modality::PET,
        Modality::CT,
        Modality::UNKNOWN,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::MRI_T1 => "MRI_T1",
            Modality::MRI_T2 => "MRI_T2",
            Modality::MRI_DWI => "MRI_DWI",
            Modality::PET => "PET",
            Modality::CT => "CT",
            Modality::UNKNOWN => "UNKNOWN",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ValidationError::new("modality", format!("unknown modality `{s}`")))
    }
}

/// Normalized center-format box. Ground-truth boxes carry no confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DetectionBoxRepr")]
pub struct DetectionBox {
    class_id: u32,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionBoxRepr {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub confidence: Option<f64>,
}

impl TryFrom<DetectionBoxRepr> for DetectionBox {
    type Error = ValidationError;

    fn try_from(r: DetectionBoxRepr) -> Result<Self, Self::Error> {
        DetectionBox::new(r.class_id, r.cx, r.cy, r.w, r.h, r.confidence)
    }
}

impl DetectionBox {
    pub fn new(
        class_id: u32,
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        confidence: Option<f64>,
    ) -> Result<Self, ValidationError> {
        check_unit("cx", cx)?;
        check_unit("cy", cy)?;
        check_unit("w", w)?;
        check_unit("h", h)?;
        if w <= 0.0 {
            return Err(ValidationError::new("w", "width must be positive"));
        }
        if h <= 0.0 {
            return Err(ValidationError::new("h", "height must be positive"));
        }
        if let Some(c) = confidence {
            check_unit("confidence", c)?;
        }
        Ok(Self {
            class_id,
            cx,
            cy,
            w,
            h,
            confidence,
        })
    }

    /// Ground-truth box (no confidence).
    pub fn ground_truth(class_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, ValidationError> {
        Self::new(class_id, cx, cy, w, h, None)
    }

    /// Detector output box.
    pub fn predicted(
        class_id: u32,
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        confidence: f64,
    ) -> Result<Self, ValidationError> {
        Self::new(class_id, cx, cy, w, h, Some(confidence))
    }

    /// Builds a box from normalized corner coordinates `(x0, y0, x1, y1)`.
    pub fn from_corners(
        class_id: u32,
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        confidence: Option<f64>,
    ) -> Result<Self, ValidationError> {
        let (x0, x1) = if x0 <= x1 { (x0, x1) } else { (x1, x0) };
        let (y0, y1) = if y0 <= y1 { (y0, y1) } else { (y1, y0) };
        Self::new(class_id, (x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0, confidence)
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn confidence(&self) -> Option<f64> {
        self.confidence
    }

    /// `(x0, y0, x1, y1)` in normalized coordinates.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SliceRecordRepr")]
pub struct SliceRecord {
    slice_id: String,
    patient_id: String,
    relative_path: String,
    modality: Modality,
    byte_size: u64,
    gt_boxes: Vec<DetectionBox>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceRecordRepr {
    pub slice_id: String,
    pub patient_id: String,
    pub relative_path: String,
    #[serde(default = "unknown_modality")]
    pub modality: Modality,
    pub byte_size: u64,
    #[serde(default)]
    pub gt_boxes: Vec<DetectionBoxRepr>,
}

fn unknown_modality() -> Modality {
    Modality::UNKNOWN
}

impl TryFrom<SliceRecordRepr> for SliceRecord {
    type Error = ValidationError;

    fn try_from(r: SliceRecordRepr) -> Result<Self, Self::Error> {
        let boxes = r
            .gt_boxes
            .into_iter()
            .enumerate()
            .map(|(i, b)| DetectionBox::try_from(b).map_err(|e| e.nested(&format!("gt_boxes[{i}]"))))
            .collect::<Result<Vec<_>, _>>()?;
        SliceRecord::new(
            r.slice_id,
            r.patient_id,
            r.relative_path,
            r.modality,
            r.byte_size,
            boxes,
        )
    }
}

impl SliceRecord {
    pub fn new(
        slice_id: impl Into<String>,
        patient_id: impl Into<String>,
        relative_path: impl Into<String>,
        modality: Modality,
        byte_size: u64,
        gt_boxes: Vec<DetectionBox>,
    ) -> Result<Self, ValidationError> {
        let slice_id = slice_id.into();
        let patient_id = patient_id.into();
        let relative_path = relative_path.into();
        if slice_id.is_empty() {
            return Err(ValidationError::new("slice_id", "must not be empty"));
        }
        if patient_id.is_empty() {
            return Err(ValidationError::new("patient_id", "must not be empty"));
        }
        if relative_path.is_empty() {
            return Err(ValidationError::new("relative_path", "must not be empty"));
        }
        if let Some(i) = gt_boxes.iter().position(|b| b.confidence.is_some()) {
            return Err(ValidationError::new(
                format!("gt_boxes[{i}].confidence"),
                "ground-truth boxes carry no confidence",
            ));
        }
        Ok(Self {
            slice_id,
            patient_id,
            relative_path,
            modality,
            byte_size,
            gt_boxes,
        })
    }

    pub fn slice_id(&self) -> &str {
        &self.slice_id
    }
    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }
    pub fn relative_path(&self) -> &str {
        &self.relative_path
    }
    pub fn modality(&self) -> Modality {
        self.modality
    }
    pub fn byte_size(&self) -> u64 {
        self.byte_size
    }
    pub fn gt_boxes(&self) -> &[DetectionBox] {
        &self.gt_boxes
    }

    /// Slice-level ground truth: positive iff it carries annotated boxes.
    pub fn is_gt_positive(&self) -> bool {
        !self.gt_boxes.is_empty()
    }

    pub fn with_byte_size(&self, byte_size: u64) -> Self {
        Self {
            byte_size,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PatientRecordRepr")]
pub struct PatientRecord {
    patient_id: String,
    label: Label,
    slices: Vec<SliceRecord>,
    archive_bytes: u64,
}

/// On-disk patient form. `archive_bytes` may be omitted, in which case it is
/// derived from the slices; when present it must agree with them.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecordRepr {
    pub patient_id: String,
    pub label: Label,
    pub slices: Vec<SliceRecordRepr>,
    #[serde(default)]
    pub archive_bytes: Option<u64>,
}

impl TryFrom<PatientRecordRepr> for PatientRecord {
    type Error = ValidationError;

    fn try_from(r: PatientRecordRepr) -> Result<Self, Self::Error> {
        let slices = r
            .slices
            .into_iter()
            .enumerate()
            .map(|(i, s)| SliceRecord::try_from(s).map_err(|e| e.nested(&format!("slices[{i}]"))))
            .collect::<Result<Vec<_>, _>>()?;
        match r.archive_bytes {
            Some(bytes) => PatientRecord::new(r.patient_id, r.label, slices, bytes),
            None => PatientRecord::with_computed_size(r.patient_id, r.label, slices),
        }
    }
}

fn slice_byte_total(slices: &[SliceRecord]) -> u64 {
    slices.iter().map(|s| s.byte_size).sum()
}

impl PatientRecord {
    pub fn new(
        patient_id: impl Into<String>,
        label: Label,
        slices: Vec<SliceRecord>,
        archive_bytes: u64,
    ) -> Result<Self, ValidationError> {
        let patient_id = patient_id.into();
        if patient_id.is_empty() {
            return Err(ValidationError::new("patient_id", "must not be empty"));
        }
        if slices.is_empty() {
            return Err(ValidationError::new(
                "slices",
                format!("patient `{patient_id}` has no slices"),
            ));
        }
        let mut seen = HashSet::new();
        for (i, s) in slices.iter().enumerate() {
            if s.patient_id != patient_id {
                return Err(ValidationError::new(
                    format!("slices[{i}].patient_id"),
                    format!(
                        "slice `{}` names patient `{}` but is listed under `{patient_id}`",
                        s.slice_id, s.patient_id
                    ),
                ));
            }
            if label == Label::Normal && s.is_gt_positive() {
                return Err(ValidationError::new(
                    format!("slices[{i}].gt_boxes"),
                    format!(
                        "slice `{}` has tumor boxes but patient `{patient_id}` is labeled Normal",
                        s.slice_id
                    ),
                ));
            }
            if !seen.insert(s.slice_id.as_str()) {
                return Err(ValidationError::new(
                    format!("slices[{i}].slice_id"),
                    format!("duplicate slice_id `{}`", s.slice_id),
                ));
            }
        }
        let total = slice_byte_total(&slices);
        if archive_bytes != total {
            return Err(ValidationError::new(
                "archive_bytes",
                format!("patient `{patient_id}` declares {archive_bytes} bytes but its slices sum to {total}"),
            ));
        }
        Ok(Self {
            patient_id,
            label,
            slices,
            archive_bytes,
        })
    }

    pub fn with_computed_size(
        patient_id: impl Into<String>,
        label: Label,
        slices: Vec<SliceRecord>,
    ) -> Result<Self, ValidationError> {
        let total = slice_byte_total(&slices);
        Self::new(patient_id, label, slices, total)
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }
    pub fn label(&self) -> Label {
        self.label
    }
    pub fn slices(&self) -> &[SliceRecord] {
        &self.slices
    }
    pub fn archive_bytes(&self) -> u64 {
        self.archive_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CohortManifestRepr")]
pub struct CohortManifest {
    cohort_id: String,
    patients: Vec<PatientRecord>,
    created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifestRepr {
    pub cohort_id: String,
    pub patients: Vec<PatientRecordRepr>,
    pub created_at: DateTime<Utc>,
}

impl TryFrom<CohortManifestRepr> for CohortManifest {
    type Error = ValidationError;

    fn try_from(r: CohortManifestRepr) -> Result<Self, Self::Error> {
        let patients = r
            .patients
            .into_iter()
            .enumerate()
            .map(|(i, p)| PatientRecord::try_from(p).map_err(|e| e.nested(&format!("patients[{i}]"))))
            .collect::<Result<Vec<_>, _>>()?;
        CohortManifest::new(r.cohort_id, patients, r.created_at)
    }
}

impl CohortManifest {
    pub fn new(
        cohort_id: impl Into<String>,
        patients: Vec<PatientRecord>,
        created_at: DateTime<Utc>,
    ) -> Result<Self, ValidationError> {
        let mut patient_ids = HashSet::new();
        let mut slice_ids = HashSet::new();
        for (i, p) in patients.iter().enumerate() {
            if !patient_ids.insert(p.patient_id.as_str()) {
                return Err(ValidationError::new(
                    format!("patients[{i}].patient_id"),
                    format!("duplicate patient_id `{}`", p.patient_id),
                ));
            }
            for (j, s) in p.slices.iter().enumerate() {
                if !slice_ids.insert(s.slice_id.as_str()) {
                    return Err(ValidationError::new(
                        format!("patients[{i}].slices[{j}].slice_id"),
                        format!("duplicate slice_id `{}`", s.slice_id),
                    ));
                }
            }
        }
        Ok(Self {
            cohort_id: cohort_id.into(),
            patients,
            created_at,
        })
    }

    pub fn cohort_id(&self) -> &str {
        &self.cohort_id
    }
    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }
    pub fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }

    pub fn patient(&self, patient_id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == patient_id)
    }

    pub fn slices(&self) -> impl Iterator<Item = &SliceRecord> {
        self.patients.iter().flat_map(|p| p.slices.iter())
    }

    pub fn slice_count(&self) -> usize {
        self.patients.iter().map(|p| p.slices.len()).sum()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.patients.iter().filter(|p| p.label == label).count()
    }

    /// Canonical on-disk form (pretty JSON, trailing newline).
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Predicted boxes for a single image. An empty box list means the detector
/// reported nothing for that image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SlicePredictionRepr")]
pub struct SlicePrediction {
    slice_id: String,
    boxes: Vec<DetectionBox>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicePredictionRepr {
    pub slice_id: String,
    #[serde(default)]
    pub boxes: Vec<DetectionBox>,
}

impl TryFrom<SlicePredictionRepr> for SlicePrediction {
    type Error = ValidationError;

    fn try_from(r: SlicePredictionRepr) -> Result<Self, Self::Error> {
        SlicePrediction::new(r.slice_id, r.boxes)
    }
}

impl SlicePrediction {
    pub fn new(slice_id: impl Into<String>, boxes: Vec<DetectionBox>) -> Result<Self, ValidationError> {
        if let Some(i) = boxes.iter().position(|b| b.confidence.is_none()) {
            return Err(ValidationError::new(
                format!("boxes[{i}].confidence"),
                "predicted boxes require a confidence",
            ));
        }
        Ok(Self {
            slice_id: slice_id.into(),
            boxes,
        })
    }

    pub fn empty(slice_id: impl Into<String>) -> Self {
        Self {
            slice_id: slice_id.into(),
            boxes: Vec::new(),
        }
    }

    pub fn slice_id(&self) -> &str {
        &self.slice_id
    }
    pub fn boxes(&self) -> &[DetectionBox] {
        &self.boxes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PatientVerdictRepr")]
pub struct PatientVerdict {
    patient_id: String,
    pstt: f64,
    gtt_used: f64,
    decision: Label,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientVerdictRepr {
    pub patient_id: String,
    pub pstt: f64,
    pub gtt_used: f64,
    pub decision: Label,
}

impl TryFrom<PatientVerdictRepr> for PatientVerdict {
    type Error = ValidationError;

    fn try_from(r: PatientVerdictRepr) -> Result<Self, Self::Error> {
        let v = PatientVerdict::new(r.patient_id, r.pstt, r.gtt_used)?;
        if v.decision != r.decision {
            return Err(ValidationError::new(
                "decision",
                format!(
                    "decision {} contradicts pstt {} vs gtt {}",
                    r.decision, r.pstt, r.gtt_used
                ),
            ));
        }
        Ok(v)
    }
}

impl PatientVerdict {
    /// The decision is derived, never supplied: Tumor iff `pstt > gtt_used`.
    pub fn new(patient_id: impl Into<String>, pstt: f64, gtt_used: f64) -> Result<Self, ValidationError> {
        check_unit("pstt", pstt)?;
        check_unit("gtt_used", gtt_used)?;
        let decision = if pstt > gtt_used { Label::Tumor } else { Label::Normal };
        Ok(Self {
            patient_id: patient_id.into(),
            pstt,
            gtt_used,
            decision,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }
    pub fn pstt(&self) -> f64 {
        self.pstt
    }
    pub fn gtt_used(&self) -> f64 {
        self.gtt_used
    }
    pub fn decision(&self) -> Label {
        self.decision
    }
}

/// Binary confusion tallies with `Tumor` as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Tumor, Label::Tumor) => self.tp += 1,
            (Label::Normal, Label::Tumor) => self.fp += 1,
            (Label::Normal, Label::Normal) => self.tn += 1,
            (Label::Tumor, Label::Normal) => self.fn_ += 1,
        }
    }

    /// The same tallies seen from the Normal class (Normal as positive).
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}
