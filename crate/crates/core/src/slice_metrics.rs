//! Slice-level classification of detector output and the standard
//! precision / recall / F1 family, per class and support-weighted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cohort::{CohortManifest, ConfusionCounts, Label, Modality, SlicePrediction, SliceRecord, ValidationError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no prediction for slice `{0}`")]
    MissingPrediction(String),
    #[error("cannot average an empty set of rows")]
    EmptyInput,
    #[error("total support is zero")]
    ZeroTotalSupport,
    #[error("calibration needs at least one Tumor-labeled sample")]
    NoTumorSamples,
    #[error(transparent)]
    InvalidConfig(#[from] ValidationError),
}

/// A ratio metric, or an explicit marker that its denominator was zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Score {
    Value(f64),
    NotApplicable,
}

impl Score {
    pub fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Score::NotApplicable
        } else {
            Score::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Score::Value(v) => Some(v),
            Score::NotApplicable => None,
        }
    }

    pub fn is_applicable(self) -> bool {
        matches!(self, Score::Value(_))
    }

    /// Display form: half-up rounding to two decimals, or `NA`.
    pub fn display_2dp(self) -> String {
        match self {
            Score::Value(v) => round_half_up_2dp(v),
            Score::NotApplicable => "NA".to_string(),
        }
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Score::Value(v) => write!(f, "{v}"),
            Score::NotApplicable => f.write_str("NA"),
        }
    }
}

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Score::Value(v) => s.serialize_f64(*v),
            Score::NotApplicable => s.serialize_str("NA"),
        }
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct ScoreVisitor;
        impl Visitor<'_> for ScoreVisitor {
            type Value = Score;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or \"NA\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Score, E> {
                Ok(Score::Value(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Score, E> {
                Ok(Score::Value(v as f64))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Score, E> {
                Ok(Score::Value(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Score, E> {
                if v == "NA" {
                    Ok(Score::NotApplicable)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(ScoreVisitor)
    }
}

/// Rounds half-up to two decimals on the shortest decimal representation of
/// `v`, so that e.g. 0.975 displays as 0.98 despite its binary value lying
/// slightly below.
pub fn round_half_up_2dp(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let neg = v < 0.0;
    let repr = format!("{}", v.abs());
    let (int, frac) = repr.split_once('.').unwrap_or((&repr, ""));
    let mut digits: Vec<u8> = int.bytes().map(|b| b - b'0').collect();
    let frac: Vec<u8> = frac.bytes().map(|b| b - b'0').collect();
    digits.push(frac.first().copied().unwrap_or(0));
    digits.push(frac.get(1).copied().unwrap_or(0));
    if frac.get(2).copied().unwrap_or(0) >= 5 {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - 2;
    let int: String = digits[..split].iter().map(|d| char::from(b'0' + d)).collect();
    let frac: String = digits[split..].iter().map(|d| char::from(b'0' + d)).collect();
    let zero = digits.iter().all(|&d| d == 0);
    format!("{}{int}.{frac}", if neg && !zero { "-" } else { "" })
}

/// Decides which predictions count as tumor-indicative, and which slices
/// enter the evaluated population.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceEvalConfig {
    conf_threshold: f64,
    min_boxes: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    modality_filter: Option<BTreeSet<Modality>>,
}

impl Default for SliceEvalConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.25,
            min_boxes: 1,
            modality_filter: None,
        }
    }
}

impl SliceEvalConfig {
    pub fn new(conf_threshold: f64, min_boxes: u32) -> Result<Self, ValidationError> {
        if !(0.0..=1.0).contains(&conf_threshold) {
            return Err(ValidationError::new(
                "conf_threshold",
                format!("{conf_threshold} is outside [0, 1]"),
            ));
        }
        if min_boxes == 0 {
            return Err(ValidationError::new("min_boxes", "must be at least 1"));
        }
        Ok(Self {
            conf_threshold,
            min_boxes,
            modality_filter: None,
        })
    }

    /// Restricts evaluation to slices of the given modalities. An empty set
    /// is treated as no filter.
    pub fn with_modalities(mut self, modalities: impl IntoIterator<Item = Modality>) -> Self {
        let set: BTreeSet<Modality> = modalities.into_iter().collect();
        self.modality_filter = (!set.is_empty()).then_some(set);
        self
    }

    pub fn conf_threshold(&self) -> f64 {
        self.conf_threshold
    }
    pub fn min_boxes(&self) -> u32 {
        self.min_boxes
    }
    pub fn modality_filter(&self) -> Option<&BTreeSet<Modality>> {
        self.modality_filter.as_ref()
    }

    pub fn includes(&self, slice: &SliceRecord) -> bool {
        self.modality_filter
            .as_ref()
            .is_none_or(|set| set.contains(&slice.modality()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Score,
    pub recall: Score,
    pub f1: Score,
    pub support: u64,
}

pub fn is_tumor_indicative(pred: &SlicePrediction, cfg: &SliceEvalConfig) -> bool {
    let hits = pred
        .boxes()
        .iter()
        .filter(|b| b.confidence().unwrap_or(0.0) >= cfg.conf_threshold)
        .count();
    hits >= cfg.min_boxes as usize
}

/// Slice-level confusion over every slice admitted by `cfg`, with
/// gt-positive (annotated) slices as the positive class.
pub fn confusion(
    preds: &BTreeMap<String, SlicePrediction>,
    cohort: &CohortManifest,
    cfg: &SliceEvalConfig,
) -> Result<ConfusionCounts, MetricsError> {
    let slices: Vec<&SliceRecord> = cohort.slices().filter(|s| cfg.includes(s)).collect();
    if let Some(s) = slices.iter().find(|s| !preds.contains_key(s.slice_id())) {
        return Err(MetricsError::MissingPrediction(s.slice_id().to_string()));
    }
    Ok(slices
        .par_iter()
        .fold(ConfusionCounts::default, |mut acc, s| {
            let truth = if s.is_gt_positive() {
                Label::Tumor
            } else {
                Label::Normal
            };
            let predicted = if is_tumor_indicative(&preds[s.slice_id()], cfg) {
                Label::Tumor
            } else {
                Label::Normal
            };
            acc.record(truth, predicted);
            acc
        })
        .reduce(ConfusionCounts::default, |a, b| a + b))
}

pub fn precision(c: &ConfusionCounts) -> Score {
    Score::ratio(c.tp, c.tp + c.fp)
}

pub fn recall(c: &ConfusionCounts) -> Score {
    Score::ratio(c.tp, c.tp + c.fn_)
}

/// Harmonic mean; 0 when both inputs are 0; NotApplicable propagates.
pub fn f1(p: Score, r: Score) -> Score {
    match (p, r) {
        (Score::Value(p), Score::Value(r)) if p + r == 0.0 => Score::Value(0.0),
        (Score::Value(p), Score::Value(r)) => Score::Value(2.0 * p * r / (p + r)),
        _ => Score::NotApplicable,
    }
}

pub fn class_metrics(c: &ConfusionCounts) -> ClassMetrics {
    let p = precision(c);
    let r = recall(c);
    ClassMetrics {
        precision: p,
        recall: r,
        f1: f1(p, r),
        support: c.tp + c.fn_,
    }
}

/// Per-class rows, Tumor first, as in a two-class detection table.
pub fn per_class(c: &ConfusionCounts) -> [(Label, ClassMetrics); 2] {
    [
        (Label::Tumor, class_metrics(c)),
        (Label::Normal, class_metrics(&c.swapped())),
    ]
}

fn weighted_score(rows: &[ClassMetrics], total: f64, pick: impl Fn(&ClassMetrics) -> Score) -> Score {
    let mut acc = 0.0;
    for row in rows {
        match pick(row) {
            Score::Value(v) => acc += v * (row.support as f64 / total),
            Score::NotApplicable => return Score::NotApplicable,
        }
    }
    Score::Value(acc)
}

/// Support-weighted average of each metric; supports are summed. A metric
/// that is NotApplicable in any row is NotApplicable in the average.
pub fn weighted_average(rows: &[ClassMetrics]) -> Result<ClassMetrics, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let support: u64 = rows.iter().map(|r| r.support).sum();
    if support == 0 {
        return Err(MetricsError::ZeroTotalSupport);
    }
    let total = support as f64;
    Ok(ClassMetrics {
        precision: weighted_score(rows, total, |r| r.precision),
        recall: weighted_score(rows, total, |r| r.recall),
        f1: weighted_score(rows, total, |r| r.f1),
        support,
    })
}

/// Unweighted mean of each metric across rows; supports are summed.
pub fn macro_average(rows: &[ClassMetrics]) -> Result<ClassMetrics, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = rows.len() as f64;
    let mean = |pick: fn(&ClassMetrics) -> Score| {
        rows.iter()
            .map(pick)
            .try_fold(0.0, |acc, s| s.value().map(|v| acc + v))
            .map_or(Score::NotApplicable, |sum| Score::Value(sum / n))
    };
    Ok(ClassMetrics {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        support: rows.iter().map(|r| r.support).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
}

/// Slice-level section of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetricsSection {
    pub confusion: ConfusionCounts,
    pub classes: Vec<ClassRow>,
    pub macro_average: ClassMetrics,
    pub weighted_average: ClassMetrics,
}

impl SliceMetricsSection {
    /// Builds the section from confusion counts. Fails with
    /// `ZeroTotalSupport` when no slices were evaluated.
    pub fn from_confusion(c: ConfusionCounts) -> Result<Self, MetricsError> {
        let rows = per_class(&c);
        let plain: Vec<ClassMetrics> = rows.iter().map(|(_, m)| *m).collect();
        Ok(Self {
            confusion: c,
            classes: rows
                .iter()
                .map(|(l, m)| ClassRow {
                    class: l.as_str().to_string(),
                    metrics: *m,
                })
                .collect(),
            macro_average: macro_average(&plain)?,
            weighted_average: weighted_average(&plain)?,
        })
    }
}
