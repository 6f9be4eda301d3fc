use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use walkdir::WalkDir;

use ptp_core::cohort::{CohortManifest, Label, Modality, PatientRecord, SliceRecord};
use ptp_core::ingest::{
    compute_archive_sizes, parse_manifest, read_manifest, scan_prediction_dir, IngestError, ScanMode,
};
use ptp_core::splitter::{check_leakage, materialize, plan_split, select_test_patients, verify_ratio, SplitConfig};
use ptp_core::synth::{generate_cohort, CohortSpec};

fn ts() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

fn nested_cohort() -> CohortManifest {
    let mods = [Modality::CT, Modality::MRI_T1, Modality::MRI_T2];
    let mut patients = Vec::new();
    for p in 1..=3 {
        let pid = format!("P{p:02}");
        let slices = (0..6)
            .map(|j| {
                let m = mods[j % 3];
                let sid = format!("{pid}_{j}");
                SliceRecord::new(&sid, &pid, format!("{pid}/{}/{sid}.jpg", m.as_str()), m, 100, vec![]).unwrap()
            })
            .collect();
        patients.push(PatientRecord::with_computed_size(pid, Label::Normal, slices).unwrap());
    }
    CohortManifest::new("nested", patients, ts()).unwrap()
}

#[test]
fn nested_modality_tree_resolves_every_slice() {
    let cohort = nested_cohort();
    let dir = tempfile::tempdir().unwrap();
    for (i, s) in cohort.slices().enumerate() {
        if i % 2 == 0 {
            let path = dir.path().join(Path::new(s.relative_path()).with_extension("txt"));
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            fs::write(path, format!("0 0.5 0.5 0.1 0.1 0.{i:02}\n")).unwrap();
        }
    }
    let scan = scan_prediction_dir(dir.path(), &cohort, ScanMode::Strict).unwrap();
    let keys: BTreeSet<&str> = scan.predictions.keys().map(String::as_str).collect();
    let manifest_ids: BTreeSet<&str> = cohort.slices().map(|s| s.slice_id()).collect();
    assert_eq!(keys, manifest_ids);

    // Flat recursive listing, matched back to slices by path stem.
    let on_disk: BTreeSet<String> = WalkDir::new(dir.path())
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            e.path()
                .strip_prefix(dir.path())
                .unwrap()
                .with_extension("jpg")
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    for s in cohort.slices() {
        let has_file = on_disk.contains(s.relative_path());
        assert_eq!(
            !scan.predictions[s.slice_id()].boxes().is_empty(),
            has_file,
            "{}",
            s.slice_id()
        );
    }
    assert_eq!(scan.missing_files.len(), cohort.slice_count() - on_disk.len());
    assert!(scan.unknown_files.is_empty());
}

#[test]
fn missing_files_become_empty_predictions() {
    let slices: Vec<SliceRecord> = (0..5)
        .map(|j| SliceRecord::new(format!("s{j}"), "P1", format!("P1/s{j}.jpg"), Modality::CT, 10, vec![]).unwrap())
        .collect();
    let p = PatientRecord::with_computed_size("P1", Label::Normal, slices).unwrap();
    let cohort = CohortManifest::new("c", vec![p], ts()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("P1")).unwrap();
    for j in 0..3 {
        fs::write(dir.path().join(format!("P1/s{j}.txt")), "0 0.5 0.5 0.2 0.1 0.9\n").unwrap();
    }
    let scan = scan_prediction_dir(dir.path(), &cohort, ScanMode::Lenient).unwrap();
    assert_eq!(scan.predictions.len(), 5);
    assert_eq!(scan.predictions.values().filter(|p| p.boxes().is_empty()).count(), 2);
    assert_eq!(scan.missing_files, vec!["s3".to_string(), "s4".to_string()]);

    fs::write(dir.path().join("bogus.txt"), "").unwrap();
    let lenient = scan_prediction_dir(dir.path(), &cohort, ScanMode::Lenient).unwrap();
    assert_eq!(lenient.unknown_files, vec![dir.path().join("bogus.txt")]);
    assert_eq!(lenient.predictions.len(), 5);
    assert!(matches!(
        scan_prediction_dir(dir.path(), &cohort, ScanMode::Strict),
        Err(IngestError::UnknownSliceFile(p)) if p.ends_with("bogus.txt")
    ));
}

#[test]
fn malformed_prediction_file_names_the_file() {
    let cohort = nested_cohort();
    let dir = tempfile::tempdir().unwrap();
    let s = cohort.slices().next().unwrap();
    let path = dir.path().join(Path::new(s.relative_path()).with_extension("txt"));
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(&path, "0 1.50 0.5 0.2 0.1 0.9\n").unwrap();
    let err = scan_prediction_dir(dir.path(), &cohort, ScanMode::Lenient).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("1.50"), "{msg}");
    assert!(msg.contains(&path.display().to_string()), "{msg}");
}

#[test]
fn archive_sizes_match_fold_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let patients: Vec<PatientRecord> = (0..30)
        .map(|p| {
            let pid = format!("P{p}");
            let n = rng.random_range(1..20);
            let slices = (0..n)
                .map(|j| {
                    let size = rng.random_range(0..1_000_000u64);
                    SliceRecord::new(
                        format!("{pid}_{j}"),
                        &pid,
                        format!("{pid}/{j}.jpg"),
                        Modality::PET,
                        size,
                        vec![],
                    )
                    .unwrap()
                })
                .collect();
            PatientRecord::with_computed_size(&pid, Label::Normal, slices).unwrap()
        })
        .collect();
    let cohort = CohortManifest::new("c", patients, ts()).unwrap();
    let once = compute_archive_sizes(&cohort);
    for p in once.patients() {
        let oracle = p.slices().iter().fold(0u64, |acc, s| acc + s.byte_size());
        assert_eq!(p.archive_bytes(), oracle);
    }
    assert_eq!(compute_archive_sizes(&once), once);
}

#[test]
fn manifest_round_trips_through_disk() {
    let cohort = generate_cohort(&CohortSpec {
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    fs::write(&path, cohort.to_json()).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), cohort);
    assert!(read_manifest(&dir.path().join("absent.json")).unwrap_err().is_io());
}

#[test]
fn manifest_errors_carry_location() {
    let bad_label = r#"{"cohort_id":"c","created_at":"2024-01-01T00:00:00Z","patients":[
        {"patient_id":"P1","label":"Maybe","slices":[]}]}"#;
    match parse_manifest(bad_label) {
        Err(IngestError::SchemaViolation { path, .. }) => assert!(path.contains("patients[0].label"), "{path}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        parse_manifest("{\"cohort_id\": "),
        Err(IngestError::MalformedJson { .. })
    ));
}

fn oracle_test_ids(cohort: &CohortManifest, cfg: &SplitConfig) -> Vec<String> {
    let mut all: Vec<(Label, u64, String)> = cohort
        .patients()
        .iter()
        .map(|p| (p.label(), p.archive_bytes(), p.patient_id().to_string()))
        .collect();
    all.sort();
    let pick = |label: Label, n: usize| -> Vec<String> {
        all.iter()
            .filter(|t| t.0 == label)
            .take(n)
            .map(|t| t.2.clone())
            .collect()
    };
    let mut out = pick(Label::Normal, cfg.test_normal_count);
    out.extend(pick(Label::Tumor, cfg.test_tumor_count));
    out
}

#[test]
fn eighty_one_patient_split() {
    let cohort = generate_cohort(&CohortSpec {
        n_patients: 81,
        incidence: 0.2,
        seed: 81,
        ..Default::default()
    })
    .unwrap();
    let cfg = SplitConfig {
        seed: 5,
        ..Default::default()
    };
    let test = select_test_patients(&cohort, &cfg).unwrap();
    assert_eq!(test.len(), 30);
    assert_eq!(test, oracle_test_ids(&cohort, &cfg));
    let plan = plan_split(&cohort, &cfg).unwrap();
    assert!(verify_ratio(&plan, &cfg));
    check_leakage(&plan, &cohort).unwrap();
    assert_eq!(plan.train_normal_slices.len(), 9 * plan.train_tumor_slices.len());
    assert_eq!(plan, plan_split(&cohort, &cfg).unwrap());
}

#[test]
fn materialize_links_planned_slices() {
    let cohort = generate_cohort(&CohortSpec {
        n_patients: 20,
        incidence: 0.3,
        slices_per_patient: (4, 8),
        tumor_fraction_alpha: 5.0,
        tumor_fraction_beta: 5.0,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let cfg = SplitConfig {
        ratio_normal_per_tumor: 1,
        test_normal_count: 3,
        test_tumor_count: 1,
        seed: 1,
        ..Default::default()
    };
    let plan = plan_split(&cohort, &cfg).unwrap();
    let images = tempfile::tempdir().unwrap();
    for s in cohort.slices() {
        let p = images.path().join(s.relative_path());
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, s.slice_id()).unwrap();
    }
    let out = tempfile::tempdir().unwrap();
    materialize(&plan, &cohort, images.path(), out.path()).unwrap();
    let files: BTreeMap<String, String> = WalkDir::new(out.path())
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read_to_string(e.path()).unwrap(),
            )
        })
        .collect();
    let expected = plan.train_tumor_slices.len()
        + plan.train_normal_slices.len()
        + plan
            .test_patients
            .iter()
            .map(|id| cohort.patient(id).unwrap().slices().len())
            .sum::<usize>();
    assert_eq!(files.len(), expected);
    for (name, content) in &files {
        assert!(name.starts_with(content.as_str()), "{name} holds {content}");
    }
}
