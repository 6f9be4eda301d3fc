//! Patient-level evaluation of slice-wise tumor detectors, and curation of
//! clinically imbalanced imaging datasets.
//!
//! The pipeline reads a cohort manifest plus one prediction file per slice,
//! computes slice-level precision/recall/F1, reduces each patient to a
//! PSTT (share of tumor-indicative slices), and declares a patient
//! tumor-positive when that share exceeds a general threshold (GTT)
//! calibrated from tumor cases. Supporting modules build 1:9 train/test
//! splits, augment images without breaking their boxes, and synthesize
//! cohorts for end-to-end testing.

pub mod augment;
pub mod cli;
pub mod cohort;
pub mod ingest;
pub mod ptp;
pub mod report;
pub mod rng;
pub mod slice_metrics;
pub mod splitter;
pub mod synth;

pub use cohort::{
    CohortManifest, ConfusionCounts, DetectionBox, Label, Modality, PatientRecord, PatientVerdict, SlicePrediction,
    SliceRecord, ValidationError,
};
pub use ptp::{calibrate_gtt, classify_patient, pstt, ptp_evaluate, GttCalibration, PsttSample, PtpReport};
pub use report::{emit, MetricsReport, ReportFormat};
pub use slice_metrics::{ClassMetrics, MetricsError, Score, SliceEvalConfig};
