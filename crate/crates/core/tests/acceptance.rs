//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ptp_core::augment::{flip, rotate, rotated_hull, Channels, FlipAxis, PixelBuffer};
use ptp_core::cohort::{CohortManifest, DetectionBox, Label, SlicePrediction};
use ptp_core::ptp::{calibrate_gtt, ptp_evaluate, PsttSample};
use ptp_core::rng::{self, below, between, unit};
use ptp_core::slice_metrics::{confusion, f1, weighted_average, ClassMetrics, Score, SliceEvalConfig};
use ptp_core::splitter::{check_leakage, plan_split, select_test_patients, verify_ratio, SplitConfig};
use ptp_core::synth::{generate_cohort, simulate_detector, CohortSpec, DetectorSpec};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn row(f: f64, support: u64) -> ClassMetrics {
    ClassMetrics {
        precision: Score::Value(f),
        recall: Score::Value(f),
        f1: Score::Value(f),
        support,
    }
}

fn f1_fixture() -> Outcome {
    let v = f1(Score::Value(0.99), Score::Value(0.96));
    let x = v.value().ok_or("f1 undefined")?;
    // 2 * 99 * 96 / (100 * 195), evaluated as a rational.
    let exact = 19008.0 / 19500.0;
    ensure((x - exact).abs() <= 1e-15, || {
        format!("f1 = {x:.17}, closed form {exact:.17}")
    })?;
    ensure(v.display_2dp() == "0.97", || format!("displayed {}", v.display_2dp()))?;
    Ok(format!("F1 = {x:.15} (19008/19500), displays {}", v.display_2dp()))
}

fn weighted_fixtures() -> Outcome {
    let student = weighted_average(&[row(0.82, 107), row(0.93, 214), row(0.97, 140)]).map_err(|e| e.to_string())?;
    let teacher = weighted_average(&[row(0.91, 107), row(0.98, 214), row(0.96, 140)]).map_err(|e| e.to_string())?;
    let (s, t) = (student.f1.display_2dp(), teacher.f1.display_2dp());
    let detail = format!(
        "student rows weighted F1 {:.6} -> {s} (want 0.92); teacher rows weighted F1 {:.6} -> {t} (want 0.97)",
        student.f1.value().unwrap_or(f64::NAN),
        teacher.f1.value().unwrap_or(f64::NAN)
    );
    ensure(student.support == 461 && teacher.support == 461, || {
        "support != 461".into()
    })?;
    ensure(s == "0.92" && t == "0.97", || detail.clone())?;
    Ok(detail)
}

fn perfect_detector() -> Outcome {
    let mut checked = 0;
    for seed in 0..20u64 {
        let cohort = generate_cohort(&CohortSpec {
            n_patients: 30,
            incidence: 0.1,
            tumor_fraction_floor: 0.05,
            seed,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        ensure(
            cohort.count_label(Label::Normal) == 27 && cohort.count_label(Label::Tumor) == 3,
            || format!("seed {seed}: cohort is not 27N + 3T"),
        )?;
        let preds = simulate_detector(
            &cohort,
            &DetectorSpec {
                slice_tpr: 1.0,
                slice_fpr: 0.0,
                seed,
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let r = ptp_evaluate(&cohort, &preds, 0.04, &SliceEvalConfig::default()).map_err(|e| e.to_string())?;
        for (name, s) in [
            ("accuracy", r.ptp_accuracy),
            ("precision", r.ptp_precision),
            ("recall", r.ptp_recall),
            ("f1", r.ptp_f1),
        ] {
            ensure(s == Score::Value(1.0), || format!("seed {seed}: PTP {name} = {s:?}"))?;
        }
        checked += 1;
    }
    Ok(format!(
        "PTP accuracy/precision/recall/F1 = 1.0 on {checked} seeded 27N+3T cohorts"
    ))
}

/// Order-statistic quantile written independently of the library: weights
/// the two neighbouring order statistics by distance.
fn oracle_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    v[lo] * (1.0 - w) + v[hi] * w
}

fn gtt_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for trial in 0..10u64 {
        let mut r = rng::stream(trial, 100);
        let values: Vec<f64> = (0..1000)
            .map(|_| {
                if trial % 2 == 0 {
                    unit(&mut r)
                } else {
                    below(&mut r, 40) as f64 / 40.0
                }
            })
            .collect();
        let samples: Vec<PsttSample> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| PsttSample {
                patient_id: format!("T{i:04}"),
                pstt: v,
                label: Label::Tumor,
            })
            .collect();
        let c = calibrate_gtt(&samples).map_err(|e| e.to_string())?;
        let (q1, med) = (oracle_quantile(&values, 0.25), oracle_quantile(&values, 0.5));
        let expected = (q1 + med) / 2.0;
        for (got, want) in [(c.q1, q1), (c.median, med), (c.gtt, expected)] {
            worst = worst.max((got - want).abs());
        }
        ensure(c.gtt == (c.q1 + c.median) / 2.0, || {
            format!("trial {trial}: gtt is not (q1+median)/2")
        })?;
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "10 x 1000 samples, max deviation from oracle {worst:e}; identity exact"
    ))
}

fn full_sort_oracle(cohort: &CohortManifest, cfg: &SplitConfig) -> Vec<String> {
    let mut all: Vec<(Label, u64, &str)> = cohort
        .patients()
        .iter()
        .map(|p| (p.label(), p.archive_bytes(), p.patient_id()))
        .collect();
    all.sort();
    let take = |l: Label, n: usize| all.iter().filter(move |t| t.0 == l).take(n).map(|t| t.2.to_string());
    take(Label::Normal, cfg.test_normal_count)
        .chain(take(Label::Tumor, cfg.test_tumor_count))
        .collect()
}

fn splitter_invariants() -> Outcome {
    let mut total_train = 0;
    for seed in 0..100u64 {
        let mut r = rng::stream(seed, 200);
        let n = between(&mut r, 40, 120) as usize;
        let cohort = generate_cohort(&CohortSpec {
            n_patients: n,
            incidence: 0.1 + 0.1 * unit(&mut r),
            slices_per_patient: (10, 40),
            tumor_fraction_floor: 0.02,
            seed,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let cfg = SplitConfig {
            ratio_normal_per_tumor: between(&mut r, 1, 9) as u32,
            test_normal_count: between(&mut r, 1, 10) as usize,
            test_tumor_count: between(&mut r, 1, 3) as usize,
            seed: seed * 7 + 1,
            include_tumor_free_slices: false,
        };
        let plan = plan_split(&cohort, &cfg).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure(verify_ratio(&plan, &cfg), || format!("seed {seed}: ratio broken"))?;
        check_leakage(&plan, &cohort).map_err(|e| format!("seed {seed}: {e}"))?;
        let again = plan_split(&cohort, &cfg).map_err(|e| e.to_string())?;
        let bytes = |p| serde_json::to_vec(p).expect("plan serializes");
        ensure(bytes(&plan) == bytes(&again), || {
            format!("seed {seed}: plan not reproducible")
        })?;
        let selected = select_test_patients(&cohort, &cfg).map_err(|e| e.to_string())?;
        ensure(selected == full_sort_oracle(&cohort, &cfg), || {
            format!("seed {seed}: test set differs from oracle")
        })?;
        ensure(plan.test_patients == selected, || {
            format!("seed {seed}: plan test set differs")
        })?;
        total_train += plan.train_tumor_slices.len() + plan.train_normal_slices.len();
    }
    Ok(format!(
        "100 cohorts: ratio, leakage, reproducibility and test-set oracle hold ({total_train} training slices)"
    ))
}

fn slice_confusion_oracle() -> Outcome {
    for trial in 0..10u64 {
        let cohort = generate_cohort(&CohortSpec {
            n_patients: 20,
            incidence: 0.3,
            slices_per_patient: (25, 25),
            tumor_fraction_alpha: 2.0,
            tumor_fraction_beta: 3.0,
            seed: trial,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        ensure(cohort.slice_count() == 500, || {
            format!("trial {trial}: {} slices", cohort.slice_count())
        })?;
        let mut r = rng::stream(trial, 300);
        let mut preds = BTreeMap::new();
        for s in cohort.slices() {
            let n = below(&mut r, 4);
            let boxes = (0..n)
                .map(|_| DetectionBox::predicted(0, 0.5, 0.5, 0.1, 0.1, unit(&mut r)).expect("valid box"))
                .collect();
            preds.insert(
                s.slice_id().to_string(),
                SlicePrediction::new(s.slice_id(), boxes).expect("valid"),
            );
        }
        let conf = unit(&mut r);
        let min_boxes = between(&mut r, 1, 3) as u32;
        let cfg = SliceEvalConfig::new(conf, min_boxes).map_err(|e| e.to_string())?;
        let got = confusion(&preds, &cohort, &cfg).map_err(|e| e.to_string())?;
        let mut tally = [0u64; 4];
        for s in cohort.slices() {
            let passing = preds[s.slice_id()]
                .boxes()
                .iter()
                .filter(|b| b.confidence() >= Some(conf))
                .count();
            let idx = match (s.gt_boxes().is_empty(), passing >= min_boxes as usize) {
                (false, true) => 0,
                (true, true) => 1,
                (true, false) => 2,
                (false, false) => 3,
            };
            tally[idx] += 1;
        }
        ensure([got.tp, got.fp, got.tn, got.fn_] == tally, || {
            format!(
                "trial {trial}: {:?} vs oracle {tally:?}",
                [got.tp, got.fp, got.tn, got.fn_]
            )
        })?;
    }
    Ok("10 cohorts x 500 slices: confusion equals per-slice tally".into())
}

fn rotate_corners(b: &DetectionBox, deg: f64, w: f64, h: f64) -> [(f64, f64); 4] {
    let t = deg.to_radians();
    let (x0, y0, x1, y1) = b.corners();
    [(x0, y0), (x1, y0), (x1, y1), (x0, y1)].map(|(x, y)| {
        // Pixel frame, y down; a positive angle turns counter-clockwise on screen.
        let (px, py) = ((x - 0.5) * w, (0.5 - y) * h);
        let (rx, ry) = (px * t.cos() - py * t.sin(), px * t.sin() + py * t.cos());
        (rx / w + 0.5, 0.5 - ry / h)
    })
}

fn augmentation_properties() -> Outcome {
    let mut r = rng::stream(7, 400);
    // Double flips: random images, boxes on the annotation grid.
    for _ in 0..50 {
        let (w, h) = (between(&mut r, 1, 16) as u32, between(&mut r, 1, 16) as u32);
        let ch = if below(&mut r, 2) == 0 {
            Channels::Gray
        } else {
            Channels::Rgb
        };
        let data = (0..w as usize * h as usize * ch.count())
            .map(|_| below(&mut r, 256) as u8)
            .collect();
        let img = PixelBuffer::new(w, h, ch, data).map_err(|e| e.to_string())?;
        let grid = |r: &mut rng::Rng, lo: u64| between(r, lo, 1_000_000) as f64 / 1e6;
        let boxes: Vec<DetectionBox> = (0..5)
            .map(|_| {
                let (cx, cy) = (grid(&mut r, 0), grid(&mut r, 0));
                let (bw, bh) = (grid(&mut r, 1), grid(&mut r, 1));
                DetectionBox::ground_truth(0, cx, cy, bw, bh).expect("valid box")
            })
            .collect();
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            let (p1, b1) = flip(&img, &boxes, axis);
            let (p2, b2) = flip(&p1, &b1, axis);
            ensure(p2 == img, || format!("{axis:?}: pixels changed after double flip"))?;
            ensure(b2 == boxes, || format!("{axis:?}: boxes changed after double flip"))?;
        }
    }

    // Containment on 1000 random boxes and angles, before clipping.
    for i in 0..1000 {
        let b = DetectionBox::ground_truth(
            0,
            unit(&mut r),
            unit(&mut r),
            unit(&mut r).max(1e-3),
            unit(&mut r).max(1e-3),
        )
        .expect("valid box");
        let theta = -180.0 + 360.0 * unit(&mut r);
        let (w, h) = (between(&mut r, 32, 1024) as f64, between(&mut r, 32, 1024) as f64);
        let (cx, cy, bw, bh) = rotated_hull(&b, theta, w as u32, h as u32);
        for (x, y) in rotate_corners(&b, theta, w, h) {
            let inside = x >= cx - bw / 2.0 - 1e-12
                && x <= cx + bw / 2.0 + 1e-12
                && y >= cy - bh / 2.0 - 1e-12
                && y <= cy + bh / 2.0 + 1e-12;
            ensure(inside, || {
                format!("box {i} at {theta} deg: corner ({x}, {y}) escapes hull")
            })?;
        }
    }

    let square = PixelBuffer::filled(540, 540, Channels::Gray, 0);
    let b = DetectionBox::ground_truth(0, 0.25, 0.5, 0.2, 0.1).expect("valid box");
    let (_, out) = rotate(&square, &[b], 90.0, 1e-4).map_err(|e| e.to_string())?;
    let want = DetectionBox::ground_truth(0, 0.5, 0.75, 0.1, 0.2).expect("valid box");
    ensure(out == vec![want], || format!("90 deg: got {out:?}"))?;

    let b = DetectionBox::ground_truth(0, 0.5, 0.5, 0.4, 0.2).expect("valid box");
    let (_, out) = rotate(&square, &[b], 30.0, 1e-4).map_err(|e| e.to_string())?;
    let corners = rotate_corners(&b, 30.0, 540.0, 540.0);
    let (xs, ys): (Vec<f64>, Vec<f64>) = corners.iter().copied().unzip();
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (ow, oh) = (max(&xs) - min(&xs), max(&ys) - min(&ys));
    let (ocx, ocy) = ((max(&xs) + min(&xs)) / 2.0, (max(&ys) + min(&ys)) / 2.0);
    let got = out.first().ok_or("30 deg: box dropped")?;
    let dev = [(got.cx(), ocx), (got.cy(), ocy), (got.w(), ow), (got.h(), oh)]
        .iter()
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(dev <= 1e-9, || format!("30 deg: deviation {dev:e}"))?;
    Ok(format!(
        "double flips exact; 1000 hulls contain rotated corners; 90 deg exact; 30 deg w={:.4} h={:.4} (dev {dev:e})",
        got.w(),
        got.h()
    ))
}

fn pipeline(dir: &Path, threads: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let steps: [&[&str]; 4] = [
        &[
            "synth",
            "--patients",
            "60",
            "--seed",
            "1",
            "--out-manifest",
            "m.json",
            "--out-preds",
            "preds",
        ],
        &[
            "split",
            "--manifest",
            "m.json",
            "--seed",
            "1",
            "--test-normal",
            "20",
            "--test-tumor",
            "2",
            "--out",
            "plan.json",
        ],
        &[
            "calibrate-gtt",
            "--manifest",
            "m.json",
            "--pred-dir",
            "preds",
            "--out",
            "gtt.json",
        ],
        &[
            "eval-ptp",
            "--manifest",
            "m.json",
            "--pred-dir",
            "preds",
            "--gtt-file",
            "gtt.json",
            "--out",
            "report.json",
        ],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_ptp"))
            .current_dir(dir)
            .env("PTP_THREADS", threads)
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr))
        })?;
    }
    ["m.json", "plan.json", "gtt.json", "report.json"]
        .iter()
        .map(|f| {
            fs::read(dir.join(f))
                .map(|b| (f.to_string(), b))
                .map_err(|e| e.to_string())
        })
        .collect()
}

fn end_to_end_determinism() -> Outcome {
    let runs = ["1", "1", "4", "0"]
        .iter()
        .map(|threads| {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            pipeline(dir.path(), threads)
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (i, run) in runs.iter().enumerate().skip(1) {
        for ((name, a), (_, b)) in runs[0].iter().zip(run) {
            ensure(a == b, || format!("run {i}: {name} differs"))?;
        }
    }
    let size: usize = runs[0].iter().map(|(_, b)| b.len()).sum();
    Ok(format!(
        "4 runs (PTP_THREADS 1, 1, 4, auto) byte-identical, {size} bytes of output"
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("F1 arithmetic fixture", Duration::from_secs(1), f1_fixture),
        ("weighted-average fixtures", Duration::from_secs(1), weighted_fixtures),
        ("PTP perfect-detector fixture", Duration::from_secs(1), perfect_detector),
        ("GTT calibration oracle", Duration::from_secs(1), gtt_oracle),
        ("splitter invariants", Duration::from_secs(5), splitter_invariants),
        ("slice-confusion oracle", Duration::from_secs(5), slice_confusion_oracle),
        (
            "augmentation properties",
            Duration::from_secs(5),
            augmentation_properties,
        ),
        (
            "end-to-end determinism",
            Duration::from_secs(10),
            end_to_end_determinism,
        ),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > *budget => Err(format!("{d}; took {elapsed:.2?}, budget {budget:?}")),
            o => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} {tag} {name}: {detail} [{elapsed:.2?}]", i + 1);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
