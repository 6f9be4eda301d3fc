//! Clinically realistic train/test partitioning.
//!
//! The test set is whole patients: the `test_normal_count` Normal and
//! `test_tumor_count` Tumor patients with the smallest archives, all of
//! their slices included. Training pairs every annotated tumor slice of the
//! remaining Tumor patients with `ratio_normal_per_tumor` normal slices
//! sampled without replacement.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CohortManifest, Label, PatientRecord, SliceRecord};
use crate::rng;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("need {needed} {label} patients for the test set, only {available} available")]
    InsufficientPatients {
        label: Label,
        needed: usize,
        available: usize,
    },
    #[error("need {needed} normal training slices, only {available} available")]
    InsufficientNormalPool { needed: usize, available: usize },
    #[error("no annotated tumor slices remain outside the test set")]
    NoTumorSlices,
    #[error("unknown patient `{0}`")]
    UnknownPatient(String),
    #[error("ratio_normal_per_tumor must be positive")]
    ZeroRatio,
    #[error("leakage: {0}")]
    Leakage(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub ratio_normal_per_tumor: u32,
    pub test_normal_count: usize,
    pub test_tumor_count: usize,
    pub seed: u64,
    /// Also draw training normals from tumor patients' unannotated slices.
    #[serde(default)]
    pub include_tumor_free_slices: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratio_normal_per_tumor: 9,
            test_normal_count: 27,
            test_tumor_count: 3,
            seed: 0,
            include_tumor_free_slices: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub ratio_normal_per_tumor: u32,
    /// Normal test patients first, then Tumor, each in archive-size order.
    pub test_patients: Vec<String>,
    /// The Tumor-labeled subset of `test_patients`.
    pub test_tumor_patients: Vec<String>,
    pub train_tumor_slices: Vec<String>,
    pub train_normal_slices: Vec<String>,
}

fn smallest(cohort: &CohortManifest, label: Label, count: usize) -> Result<Vec<&PatientRecord>, SplitError> {
    let mut candidates: Vec<&PatientRecord> = cohort.patients().iter().filter(|p| p.label() == label).collect();
    if candidates.len() < count {
        return Err(SplitError::InsufficientPatients {
            label,
            needed: count,
            available: candidates.len(),
        });
    }
    candidates.sort_by(|a, b| {
        a.archive_bytes()
            .cmp(&b.archive_bytes())
            .then_with(|| a.patient_id().cmp(b.patient_id()))
    });
    candidates.truncate(count);
    Ok(candidates)
}

/// Smallest-archive Normal patients followed by smallest-archive Tumor
/// patients; ties broken by ascending patient_id.
pub fn select_test_patients(cohort: &CohortManifest, cfg: &SplitConfig) -> Result<Vec<String>, SplitError> {
    let normals = smallest(cohort, Label::Normal, cfg.test_normal_count)?;
    let tumors = smallest(cohort, Label::Tumor, cfg.test_tumor_count)?;
    Ok(normals
        .into_iter()
        .chain(tumors)
        .map(|p| p.patient_id().to_string())
        .collect())
}

pub fn build_training_set(
    cohort: &CohortManifest,
    test_ids: &[String],
    cfg: &SplitConfig,
) -> Result<SplitPlan, SplitError> {
    if cfg.ratio_normal_per_tumor == 0 {
        return Err(SplitError::ZeroRatio);
    }
    let test: HashSet<&str> = test_ids.iter().map(String::as_str).collect();
    if let Some(id) = test_ids.iter().find(|id| cohort.patient(id).is_none()) {
        return Err(SplitError::UnknownPatient(id.clone()));
    }
    let test_tumor_patients: Vec<String> = test_ids
        .iter()
        .filter(|id| cohort.patient(id).is_some_and(|p| p.label() == Label::Tumor))
        .cloned()
        .collect();

    let train: Vec<&PatientRecord> = cohort
        .patients()
        .iter()
        .filter(|p| !test.contains(p.patient_id()))
        .collect();

    let mut tumor_slices: Vec<&str> = train
        .iter()
        .filter(|p| p.label() == Label::Tumor)
        .flat_map(|p| p.slices())
        .filter(|s| s.is_gt_positive())
        .map(SliceRecord::slice_id)
        .collect();
    if tumor_slices.is_empty() {
        return Err(SplitError::NoTumorSlices);
    }
    tumor_slices.sort_unstable();

    let mut pool: Vec<&str> = train
        .iter()
        .filter(|p| p.label() == Label::Normal || cfg.include_tumor_free_slices)
        .flat_map(|p| p.slices())
        .filter(|s| !s.is_gt_positive())
        .map(SliceRecord::slice_id)
        .collect();
    pool.sort_unstable();

    let needed = tumor_slices.len() * cfg.ratio_normal_per_tumor as usize;
    if pool.len() < needed {
        return Err(SplitError::InsufficientNormalPool {
            needed,
            available: pool.len(),
        });
    }
    let mut rng = rng::stream(cfg.seed, rng::STREAM_SPLIT);
    let mut normals: Vec<&str> = rng::sample_indices(&mut rng, pool.len(), needed)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    normals.sort_unstable();

    Ok(SplitPlan {
        seed: cfg.seed,
        ratio_normal_per_tumor: cfg.ratio_normal_per_tumor,
        test_patients: test_ids.to_vec(),
        test_tumor_patients,
        train_tumor_slices: tumor_slices.into_iter().map(str::to_string).collect(),
        train_normal_slices: normals.into_iter().map(str::to_string).collect(),
    })
}

/// Test selection followed by training-set construction.
pub fn plan_split(cohort: &CohortManifest, cfg: &SplitConfig) -> Result<SplitPlan, SplitError> {
    let test = select_test_patients(cohort, cfg)?;
    build_training_set(cohort, &test, cfg)
}

/// True iff the training normals are exactly `ratio` times the training
/// tumors and the test set holds the configured number of each label.
pub fn verify_ratio(plan: &SplitPlan, cfg: &SplitConfig) -> bool {
    let tumors = plan.test_tumor_patients.len();
    let subset = {
        let all: HashSet<&String> = plan.test_patients.iter().collect();
        plan.test_tumor_patients.iter().all(|t| all.contains(t))
    };
    subset
        && plan.train_normal_slices.len() == cfg.ratio_normal_per_tumor as usize * plan.train_tumor_slices.len()
        && tumors == cfg.test_tumor_count
        && plan.test_patients.len() == cfg.test_normal_count + tumors
}

/// Checks that no slice is used twice and that no training slice belongs
/// to a test patient.
pub fn check_leakage(plan: &SplitPlan, cohort: &CohortManifest) -> Result<(), SplitError> {
    let test: HashSet<&str> = plan.test_patients.iter().map(String::as_str).collect();
    let owner: std::collections::HashMap<&str, &str> =
        cohort.slices().map(|s| (s.slice_id(), s.patient_id())).collect();
    let mut seen = BTreeSet::new();
    for id in plan.train_tumor_slices.iter().chain(&plan.train_normal_slices) {
        if !seen.insert(id.as_str()) {
            return Err(SplitError::Leakage(format!("slice `{id}` used twice")));
        }
        match owner.get(id.as_str()) {
            None => return Err(SplitError::Leakage(format!("slice `{id}` not in cohort"))),
            Some(pid) if test.contains(pid) => {
                return Err(SplitError::Leakage(format!(
                    "training slice `{id}` belongs to test patient `{pid}`"
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn link_or_copy(src: &Path, dst: &Path) -> Result<(), SplitError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SplitError::Io { path, source }
    };
    if let Some(parent) = dst.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    if dst.exists() {
        return Ok(());
    }
    if fs::hard_link(src, dst).is_err() {
        fs::copy(src, dst).map_err(io(src))?;
    }
    Ok(())
}

/// Hard-links (or copies, across devices) images into
/// `out/{train/tumor,train/normal,test}/<relative_path>`.
pub fn materialize(plan: &SplitPlan, cohort: &CohortManifest, images: &Path, out: &Path) -> Result<(), SplitError> {
    let by_id: std::collections::HashMap<&str, &SliceRecord> = cohort.slices().map(|s| (s.slice_id(), s)).collect();
    let place = |ids: &[String], sub: &str| -> Result<(), SplitError> {
        for id in ids {
            let s = by_id
                .get(id.as_str())
                .ok_or_else(|| SplitError::Leakage(format!("slice `{id}` not in cohort")))?;
            link_or_copy(&images.join(s.relative_path()), &out.join(sub).join(s.relative_path()))?;
        }
        Ok(())
    };
    place(&plan.train_tumor_slices, "train/tumor")?;
    place(&plan.train_normal_slices, "train/normal")?;
    for pid in &plan.test_patients {
        let p = cohort
            .patient(pid)
            .ok_or_else(|| SplitError::UnknownPatient(pid.clone()))?;
        for s in p.slices() {
            link_or_copy(
                &images.join(s.relative_path()),
                &out.join("test").join(s.relative_path()),
            )?;
        }
    }
    Ok(())
}
