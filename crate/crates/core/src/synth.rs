//! Synthetic cohorts and simulated detectors.
//!
//! Cohorts and predictions draw from separate seeded streams, so
//! re-simulating a detector never perturbs the cohort it runs on.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CohortManifest, DetectionBox, Label, Modality, PatientRecord, SlicePrediction, SliceRecord};
use crate::ingest::{prediction_path, serialize_prediction};
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub cohort_id: String,
    pub n_patients: usize,
    pub incidence: f64,
    pub slices_per_patient: (u32, u32),
    /// Beta(alpha, beta) distribution of the annotated-slice fraction in
    /// Tumor patients.
    pub tumor_fraction_alpha: f64,
    pub tumor_fraction_beta: f64,
    /// Lower bound applied to every drawn tumor fraction; a positive floor
    /// guarantees each Tumor patient at least that share of annotated
    /// slices.
    pub tumor_fraction_floor: f64,
    pub byte_size_range: (u64, u64),
    pub seed: u64,
    pub created_at: DateTime<Utc>,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            cohort_id: "synthetic".to_string(),
            n_patients: 30,
            incidence: 0.1,
            slices_per_patient: (20, 60),
            tumor_fraction_alpha: 2.0,
            tumor_fraction_beta: 20.0,
            tumor_fraction_floor: 0.0,
            byte_size_range: (20_000, 80_000),
            seed: 0,
            created_at: DateTime::<Utc>::from_timestamp(1_704_067_200, 0).expect("valid timestamp"),
        }
    }
}

impl CohortSpec {
    pub fn tumor_count(&self) -> usize {
        (self.incidence * self.n_patients as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if !(self.incidence > 0.0 && self.incidence < 1.0) {
            return bad(format!("incidence {} is outside (0, 1)", self.incidence));
        }
        if self.n_patients >= 10 && self.tumor_count() < 1 {
            return bad(format!(
                "incidence {} yields no tumor patients among {}",
                self.incidence, self.n_patients
            ));
        }
        let (lo, hi) = self.slices_per_patient;
        if lo == 0 || lo > hi {
            return bad(format!("slices_per_patient range [{lo}, {hi}] is invalid"));
        }
        if !(self.tumor_fraction_alpha > 0.0 && self.tumor_fraction_beta > 0.0) {
            return bad("tumor fraction Beta parameters must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tumor_fraction_floor) {
            return bad(format!(
                "tumor_fraction_floor {} is outside [0, 1]",
                self.tumor_fraction_floor
            ));
        }
        let (blo, bhi) = self.byte_size_range;
        if blo > bhi {
            return bad(format!("byte_size_range [{blo}, {bhi}] is inverted"));
        }
        Ok(())
    }
}

fn random_box(r: &mut Rng, confidence: Option<f64>) -> DetectionBox {
    let w = rng::uniform(r, 0.02, 0.2);
    let h = rng::uniform(r, 0.02, 0.2);
    let cx = rng::uniform(r, 0.1, 0.9);
    let cy = rng::uniform(r, 0.1, 0.9);
    DetectionBox::new(0, cx, cy, w, h, confidence).expect("box within frame")
}

fn random_modality(r: &mut Rng) -> Modality {
    match rng::below(r, 20) {
        0..=5 => Modality::MRI_T1,
        6..=11 => Modality::MRI_T2,
        12..=17 => Modality::MRI_DWI,
        18 => Modality::PET,
        _ => Modality::CT,
    }
}

/// Builds a cohort with exactly `round(incidence * n_patients)` Tumor
/// patients. Each Tumor patient's annotated slices form one contiguous run
/// whose length follows the Beta-distributed fraction.
pub fn generate_cohort(spec: &CohortSpec) -> Result<CohortManifest, SynthError> {
    spec.validate()?;
    let beta = Beta::new(spec.tumor_fraction_alpha, spec.tumor_fraction_beta)
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let mut r = rng::stream(spec.seed, rng::STREAM_COHORT);
    let n = spec.n_patients;
    let n_tumor = spec.tumor_count().min(n);
    let mut is_tumor = vec![false; n];
    for i in rng::sample_indices(&mut r, n, n_tumor) {
        is_tumor[i] = true;
    }
    let width = n.to_string().len().max(3);

    let mut patients = Vec::with_capacity(n);
    for (i, &tumor) in is_tumor.iter().enumerate() {
        let pid = format!("P{:0width$}", i + 1);
        let n_slices = rng::between(
            &mut r,
            u64::from(spec.slices_per_patient.0),
            u64::from(spec.slices_per_patient.1),
        ) as usize;
        let positive = if tumor {
            let frac = beta.sample(&mut r).max(spec.tumor_fraction_floor);
            let min_k = (spec.tumor_fraction_floor * n_slices as f64).ceil() as usize;
            let k = ((frac * n_slices as f64).round() as usize).clamp(min_k.min(n_slices), n_slices);
            let start = rng::between(&mut r, 0, (n_slices - k) as u64) as usize;
            start..start + k
        } else {
            0..0
        };
        let slices = (0..n_slices)
            .map(|j| {
                let modality = random_modality(&mut r);
                let bytes = rng::between(&mut r, spec.byte_size_range.0, spec.byte_size_range.1);
                let gt = if positive.contains(&j) {
                    vec![random_box(&mut r, None)]
                } else {
                    vec![]
                };
                let sid = format!("{pid}_S{j:04}");
                SliceRecord::new(&sid, &pid, format!("{pid}/{modality}/{sid}.jpg"), modality, bytes, gt)
                    .expect("generated slice is valid")
            })
            .collect();
        let label = if tumor { Label::Tumor } else { Label::Normal };
        patients.push(PatientRecord::with_computed_size(&pid, label, slices).expect("generated patient is valid"));
    }
    Ok(CohortManifest::new(&spec.cohort_id, patients, spec.created_at).expect("generated ids are unique"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub slice_tpr: f64,
    pub slice_fpr: f64,
    /// Confidence range of positive outputs (true and false positives).
    pub conf_positive_range: (f64, f64),
    /// Confidence range of the single low-confidence box emitted for a
    /// negative output. A range of `(0, 0)` emits no box at all.
    pub conf_negative_range: (f64, f64),
    pub seed: u64,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self {
            slice_tpr: 0.96,
            slice_fpr: 0.01,
            conf_positive_range: (0.5, 1.0),
            conf_negative_range: (0.0, 0.0),
            seed: 0,
        }
    }
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, v) in [("slice_tpr", self.slice_tpr), ("slice_fpr", self.slice_fpr)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::InvalidSpec(format!("{name} {v} is outside [0, 1]")));
            }
        }
        for (name, (lo, hi)) in [
            ("conf_positive_range", self.conf_positive_range),
            ("conf_negative_range", self.conf_negative_range),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(SynthError::InvalidSpec(format!("{name} [{lo}, {hi}] is invalid")));
            }
        }
        Ok(())
    }

    fn emits_negative_boxes(&self) -> bool {
        self.conf_negative_range.1 > 0.0
    }
}

/// Per-slice Bernoulli detector: annotated slices fire with probability
/// `slice_tpr`, unannotated ones with `slice_fpr`.
pub fn simulate_detector(
    cohort: &CohortManifest,
    spec: &DetectorSpec,
) -> Result<BTreeMap<String, SlicePrediction>, SynthError> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, rng::STREAM_DETECTOR);
    let mut out = BTreeMap::new();
    for slice in cohort.slices() {
        let rate = if slice.is_gt_positive() {
            spec.slice_tpr
        } else {
            spec.slice_fpr
        };
        let fires = rng::unit(&mut r) < rate;
        let boxes = if fires {
            let (lo, hi) = spec.conf_positive_range;
            let conf = rng::uniform(&mut r, lo, hi);
            vec![random_box(&mut r, Some(conf))]
        } else if spec.emits_negative_boxes() {
            let (lo, hi) = spec.conf_negative_range;
            let conf = rng::uniform(&mut r, lo, hi);
            vec![random_box(&mut r, Some(conf))]
        } else {
            vec![]
        };
        let pred = SlicePrediction::new(slice.slice_id(), boxes).expect("boxes carry confidence");
        out.insert(slice.slice_id().to_string(), pred);
    }
    Ok(out)
}

/// Writes one prediction file per non-empty prediction under `root`;
/// empty predictions get no file, like a detector that saw nothing.
pub fn write_predictions(
    root: &Path,
    cohort: &CohortManifest,
    preds: &BTreeMap<String, SlicePrediction>,
) -> Result<usize, SynthError> {
    let mut written = 0;
    for slice in cohort.slices() {
        let Some(pred) = preds.get(slice.slice_id()) else {
            continue;
        };
        if pred.boxes().is_empty() {
            continue;
        }
        let path = prediction_path(root, slice);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| SynthError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        fs::write(&path, serialize_prediction(pred)).map_err(|source| SynthError::Io { path, source })?;
        written += 1;
    }
    Ok(written)
}
