//! Parsing of cohort manifests, per-slice prediction files and prediction
//! directory trees.
//!
//! Prediction and annotation text grammar (one box per line, blank lines
//! ignored, fields separated by ASCII spaces or tabs):
//!
//! ```text
//! line    := class SEP number SEP number SEP number SEP number [SEP number]
//! class   := DIGIT+
//! number  := ["+" | "-"] (DIGIT+ ["." DIGIT*] | "." DIGIT+)
//! ```
//!
//! Fields are `class cx cy w h conf` with center-format coordinates
//! normalized to `[0, 1]`. Prediction files require the confidence field;
//! ground-truth annotation files may omit it. Values outside `[0, 1]` are
//! rejected, never clamped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;
use walkdir::WalkDir;

use crate::cohort::{
    CohortManifest, CohortManifestRepr, DetectionBox, PatientRecord, SlicePrediction, SliceRecord, ValidationError,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    MalformedJson {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema violation at `{path}`: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("invariant violation: {0}")]
    InvariantViolation(#[from] ValidationError),
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: {field} value {value} is out of range")]
    OutOfRangeCoordinate {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("prediction file {0} matches no slice in the manifest")]
    UnknownSliceFile(PathBuf),
    #[error("prediction root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<IngestError>,
    },
}

impl IngestError {
    pub fn is_io(&self) -> bool {
        match self {
            IngestError::Io { .. } | IngestError::MissingRoot(_) => true,
            IngestError::InFile { source, .. } => source.is_io(),
            _ => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Prediction-file flavour. Only the text grammar above is read from
/// directories; `Json` covers prediction sets exchanged as a single document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionStyle {
    YoloTxt,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionFileFormat {
    pub style: PredictionStyle,
    pub conf_required: bool,
}

impl Default for PredictionFileFormat {
    fn default() -> Self {
        Self {
            style: PredictionStyle::YoloTxt,
            conf_required: true,
        }
    }
}

/// Parses and validates a manifest document.
pub fn parse_manifest(document: &str) -> Result<CohortManifest, IngestError> {
    let mut de = serde_json::Deserializer::from_str(document);
    let repr: CohortManifestRepr = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        classify_json_error(e.into_inner(), path)
    })?;
    de.end().map_err(|e| classify_json_error(e, String::new()))?;
    Ok(CohortManifest::try_from(repr)?)
}

fn classify_json_error(e: serde_json::Error, path: String) -> IngestError {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => IngestError::SchemaViolation {
            path,
            message: e.to_string(),
        },
        _ => IngestError::MalformedJson {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        },
    }
}

pub fn read_manifest(path: &Path) -> Result<CohortManifest, IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_manifest(&text).map_err(|e| IngestError::InFile {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

fn is_number_token(tok: &str) -> bool {
    let body = tok.strip_prefix(['+', '-']).unwrap_or(tok);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = |s: &str| s.bytes().all(|b| b.is_ascii_digit());
    match frac {
        None => !int.is_empty() && digits(int),
        Some(f) => digits(int) && digits(f) && !(int.is_empty() && f.is_empty()),
    }
}

const FIELD_NAMES: [&str; 5] = ["cx", "cy", "w", "h", "confidence"];

fn parse_box_line(line_no: usize, line: &str, conf_required: bool) -> Result<DetectionBox, IngestError> {
    let toks: Vec<&str> = line.split([' ', '\t']).filter(|t| !t.is_empty()).collect();
    let expected = if conf_required { "6" } else { "5 or 6" };
    if toks.len() != 6 && (conf_required || toks.len() != 5) {
        return Err(IngestError::MalformedLine {
            line: line_no,
            reason: format!("expected {expected} fields, found {}", toks.len()),
        });
    }
    if toks[0].is_empty() || !toks[0].bytes().all(|b| b.is_ascii_digit()) {
        return Err(IngestError::MalformedLine {
            line: line_no,
            reason: format!("class `{}` is not a non-negative integer", toks[0]),
        });
    }
    let class_id: u32 = toks[0].parse().map_err(|_| IngestError::MalformedLine {
        line: line_no,
        reason: format!("class `{}` does not fit in 32 bits", toks[0]),
    })?;
    let mut vals = [0.0f64; 5];
    for (i, tok) in toks[1..].iter().enumerate() {
        if !is_number_token(tok) {
            return Err(IngestError::MalformedLine {
                line: line_no,
                reason: format!("{} `{tok}` is not a decimal number", FIELD_NAMES[i]),
            });
        }
        let v: f64 = tok.parse().map_err(|_| IngestError::MalformedLine {
            line: line_no,
            reason: format!("{} `{tok}` is not a decimal number", FIELD_NAMES[i]),
        })?;
        let positive_extent = i == 2 || i == 3;
        let ok = if positive_extent {
            v > 0.0 && v <= 1.0
        } else {
            (0.0..=1.0).contains(&v)
        };
        if !ok {
            return Err(IngestError::OutOfRangeCoordinate {
                line: line_no,
                field: FIELD_NAMES[i],
                value: tok.to_string(),
            });
        }
        vals[i] = v;
    }
    let confidence = (toks.len() == 6).then_some(vals[4]);
    Ok(DetectionBox::new(
        class_id, vals[0], vals[1], vals[2], vals[3], confidence,
    )?)
}

fn parse_boxes(text: &str, conf_required: bool) -> Result<Vec<DetectionBox>, IngestError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_box_line(i + 1, l.trim_end_matches('\r'), conf_required))
        .collect()
}

/// Parses one detector output file; every non-blank line is one box.
pub fn parse_prediction_file(slice_id: &str, text: &str) -> Result<SlicePrediction, IngestError> {
    let boxes = parse_boxes(text, true)?;
    Ok(SlicePrediction::new(slice_id, boxes)?)
}

/// Parses a ground-truth annotation file (confidence column optional).
pub fn parse_annotation_file(text: &str) -> Result<Vec<DetectionBox>, IngestError> {
    parse_boxes(text, false)
}

/// Writes boxes in the text grammar. Floats use the shortest decimal form
/// that parses back to the same value, so parsing the output is lossless.
pub fn serialize_boxes(boxes: &[DetectionBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        let _ = write!(out, "{} {} {} {} {}", b.class_id(), b.cx(), b.cy(), b.w(), b.h());
        if let Some(c) = b.confidence() {
            let _ = write!(out, " {c}");
        }
        out.push('\n');
    }
    out
}

pub fn serialize_prediction(pred: &SlicePrediction) -> String {
    serialize_boxes(pred.boxes())
}

/// Location of a slice's prediction file under `root`: the slice's relative
/// path with its extension replaced by `.txt`.
pub fn prediction_path(root: &Path, slice: &SliceRecord) -> PathBuf {
    root.join(Path::new(slice.relative_path()).with_extension("txt"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanMode {
    #[default]
    Lenient,
    Strict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionScan {
    pub predictions: BTreeMap<String, SlicePrediction>,
    /// `.txt` files under the root that match no manifest slice, sorted.
    pub unknown_files: Vec<PathBuf>,
    /// Slices with no prediction file (treated as empty predictions), sorted.
    pub missing_files: Vec<String>,
}

/// Reads every slice's prediction file under `root`. Missing files map to
/// empty predictions. Stray `.txt` files are reported in lenient mode and
/// rejected in strict mode.
pub fn scan_prediction_dir(
    root: &Path,
    cohort: &CohortManifest,
    mode: ScanMode,
) -> Result<PredictionScan, IngestError> {
    if !root.is_dir() {
        return Err(IngestError::MissingRoot(root.to_path_buf()));
    }
    let expected: Vec<(&str, PathBuf)> = cohort
        .slices()
        .map(|s| (s.slice_id(), prediction_path(root, s)))
        .collect();
    let known: BTreeSet<&Path> = expected.iter().map(|(_, p)| p.as_path()).collect();

    let mut unknown_files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            IngestError::Io {
                path,
                source: e
                    .into_io_error()
                    .unwrap_or_else(|| std::io::Error::other("directory loop")),
            }
        })?;
        let path = entry.path();
        if entry.file_type().is_file() && path.extension().is_some_and(|e| e == "txt") && !known.contains(path) {
            if mode == ScanMode::Strict {
                return Err(IngestError::UnknownSliceFile(path.to_path_buf()));
            }
            unknown_files.push(path.to_path_buf());
        }
    }

    let parsed: Vec<Result<(String, Option<SlicePrediction>), IngestError>> = expected
        .par_iter()
        .map(|(slice_id, path)| {
            let text = match fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Ok((slice_id.to_string(), None));
                }
                Err(e) => return Err(io_err(path)(e)),
            };
            parse_prediction_file(slice_id, &text)
                .map(|p| (slice_id.to_string(), Some(p)))
                .map_err(|e| IngestError::InFile {
                    path: path.clone(),
                    source: Box::new(e),
                })
        })
        .collect();

    let mut predictions = BTreeMap::new();
    let mut missing_files = Vec::new();
    for item in parsed {
        let (slice_id, pred) = item?;
        let pred = pred.unwrap_or_else(|| {
            missing_files.push(slice_id.clone());
            SlicePrediction::empty(slice_id.clone())
        });
        predictions.insert(slice_id, pred);
    }
    missing_files.sort();
    Ok(PredictionScan {
        predictions,
        unknown_files,
        missing_files,
    })
}

/// Recomputes each patient's `archive_bytes` from its slices. Idempotent.
pub fn compute_archive_sizes(cohort: &CohortManifest) -> CohortManifest {
    let patients = cohort
        .patients()
        .iter()
        .map(|p| {
            PatientRecord::with_computed_size(p.patient_id(), p.label(), p.slices().to_vec())
                .expect("patient already validated")
        })
        .collect();
    CohortManifest::new(cohort.cohort_id(), patients, cohort.created_at()).expect("cohort already validated")
}

/// Replaces every slice's `byte_size` with the size of its image under
/// `images_root`, then recomputes archive sizes.
pub fn refresh_byte_sizes(cohort: &CohortManifest, images_root: &Path) -> Result<CohortManifest, IngestError> {
    let mut patients = Vec::with_capacity(cohort.patients().len());
    for p in cohort.patients() {
        let slices = p
            .slices()
            .iter()
            .map(|s| {
                let path = images_root.join(s.relative_path());
                let len = fs::metadata(&path).map_err(io_err(&path))?.len();
                Ok(s.with_byte_size(len))
            })
            .collect::<Result<Vec<_>, IngestError>>()?;
        patients.push(PatientRecord::with_computed_size(p.patient_id(), p.label(), slices)?);
    }
    Ok(CohortManifest::new(cohort.cohort_id(), patients, cohort.created_at())?)
}
