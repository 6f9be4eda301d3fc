//! The `ptp` command-line interface.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 I/O error.
//! Diagnostics go to stderr; machine output goes to `--out` or stdout.
//! `PTP_THREADS` caps internal parallelism (0 or unset means automatic).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use crate::augment::{self, AugmentConfig, AugmentError, PixelBuffer};
use crate::cohort::{CohortManifest, Label, Modality, SlicePrediction};
use crate::ingest::{self, IngestError, ScanMode};
use crate::ptp::{self, GttCalibration, DEFAULT_GTT};
use crate::report::{canonical_json, emit, parse_report, MetricsReport, ReportFormat};
use crate::slice_metrics::{confusion, MetricsError, SliceEvalConfig, SliceMetricsSection};
use crate::splitter::{self, SplitConfig, SplitError, SplitPlan};
use crate::synth::{self, CohortSpec, DetectorSpec, SynthError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn validation(module: &str, msg: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: format!("{module}: {msg}"),
        }
    }

    fn io(module: &str, msg: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("{module}: {msg}"),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        if e.is_io() {
            Self::io("ingest", e)
        } else {
            Self::validation("ingest", e)
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::validation("metrics", e)
    }
}

impl From<SplitError> for CliError {
    fn from(e: SplitError) -> Self {
        match e {
            SplitError::Io { .. } => Self::io("split", e),
            e => Self::validation("split", e),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match &e {
            AugmentError::Io { .. } => Self::io("augment", e),
            AugmentError::Image {
                source: image::ImageError::IoError(_),
                ..
            } => Self::io("augment", e),
            _ => Self::validation("augment", e),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { .. } => Self::io("synth", e),
            e => Self::validation("synth", e),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "ptp",
    version,
    about = "Patient-level tumor detection metrics and dataset curation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a manifest and its prediction directory.
    Ingest(IngestArgs),
    /// Build the train/test split plan.
    Split(SplitArgs),
    /// Write augmented copies of the training slices of a split plan.
    Augment(AugmentArgs),
    /// Calibrate the general tumor threshold from patient PSTT values.
    CalibrateGtt(EvalArgs),
    /// Slice-level precision, recall and F1.
    EvalSlices(EvalSlicesArgs),
    /// Patient-level (PTP) metrics.
    EvalPtp(EvalPtpArgs),
    /// Generate a synthetic cohort and simulated detector output.
    Synth(SynthArgs),
    /// Re-render a JSON report as canonical JSON or CSV.
    Report(ReportArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long = "pred-dir")]
    pred_dir: Option<PathBuf>,
    /// Fail on prediction files that match no manifest slice.
    #[arg(long)]
    strict: bool,
    /// Re-read slice byte sizes from the images under this root.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Write the (possibly size-refreshed) manifest here.
    #[arg(long = "out-manifest")]
    out_manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 9)]
    ratio: u32,
    #[arg(long = "test-normal", default_value_t = 27)]
    test_normal: usize,
    #[arg(long = "test-tumor", default_value_t = 3)]
    test_tumor: usize,
    /// Let unannotated slices of Tumor patients join the normal pool.
    #[arg(long = "include-tumor-free")]
    include_tumor_free: bool,
    /// Hard-link images into train/test trees under this directory.
    #[arg(long, requires = "images")]
    materialize: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    brightness: f64,
    #[arg(long)]
    hflip: bool,
    #[arg(long)]
    vflip: bool,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    rotate: f64,
    #[arg(long = "min-box-area", default_value_t = 1e-4)]
    min_box_area: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw per-slice brightness and angle from [-|value|, |value|].
    #[arg(long)]
    randomize: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long = "pred-dir")]
    pred_dir: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    #[arg(long = "min-boxes", default_value_t = 1)]
    min_boxes: u32,
    /// Only evaluate slices of these modalities (repeatable).
    #[arg(long = "modality")]
    modality: Vec<String>,
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalSlicesArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
}

#[derive(Args, Debug)]
struct EvalPtpArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, conflicts_with = "gtt_file")]
    gtt: Option<f64>,
    #[arg(long = "gtt-file")]
    gtt_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 30)]
    patients: usize,
    #[arg(long, default_value_t = 0.1)]
    incidence: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "min-slices", default_value_t = 20)]
    min_slices: u32,
    #[arg(long = "max-slices", default_value_t = 60)]
    max_slices: u32,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 20.0)]
    beta: f64,
    /// Minimum annotated-slice fraction for Tumor patients.
    #[arg(long = "tumor-floor", default_value_t = 0.0)]
    tumor_floor: f64,
    #[arg(long, default_value_t = 0.96)]
    tpr: f64,
    #[arg(long, default_value_t = 0.01)]
    fpr: f64,
    /// Detector seed; defaults to the cohort seed.
    #[arg(long = "detector-seed")]
    detector_seed: Option<u64>,
    #[arg(long = "out-manifest")]
    out_manifest: PathBuf,
    #[arg(long = "out-preds")]
    out_preds: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_text(path: &Path, module: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(module, format!("{}: {e}", path.display())))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| CliError::io("output", format!("{}: {e}", parent.display())))?;
            }
            fs::write(path, text).map_err(|e| CliError::io("output", format!("{}: {e}", path.display())))
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io("output", e)),
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, module: &str) -> Result<T, CliError> {
    let text = read_text(path, module)?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(module, format!("{}: {e}", path.display())))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn eval_config(args: &EvalArgs) -> Result<SliceEvalConfig, CliError> {
    let modalities = args
        .modality
        .iter()
        .map(|m| m.parse::<Modality>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::validation("args", e))?;
    let cfg = SliceEvalConfig::new(args.conf, args.min_boxes).map_err(|e| CliError::validation("args", e))?;
    Ok(cfg.with_modalities(modalities))
}

fn load_inputs(args: &EvalArgs) -> Result<(CohortManifest, BTreeMap<String, SlicePrediction>), CliError> {
    let cohort = ingest::read_manifest(&args.manifest)?;
    let mode = if args.strict {
        ScanMode::Strict
    } else {
        ScanMode::Lenient
    };
    let scan = ingest::scan_prediction_dir(&args.pred_dir, &cohort, mode)?;
    for f in &scan.unknown_files {
        eprintln!("warning: prediction file {} matches no slice", f.display());
    }
    Ok((cohort, scan.predictions))
}

fn eval_echo(command: &str, args: &EvalArgs, cfg: &SliceEvalConfig) -> serde_json::Value {
    json!({
        "command": command,
        "manifest": display(&args.manifest),
        "pred_dir": display(&args.pred_dir),
        "strict": args.strict,
        "slice_eval": cfg,
    })
}

fn slice_section(
    cohort: &CohortManifest,
    preds: &BTreeMap<String, SlicePrediction>,
    cfg: &SliceEvalConfig,
) -> Result<Option<SliceMetricsSection>, CliError> {
    let counts = confusion(preds, cohort, cfg)?;
    match SliceMetricsSection::from_confusion(counts) {
        Ok(s) => Ok(Some(s)),
        Err(MetricsError::ZeroTotalSupport) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn cmd_ingest(args: IngestArgs) -> Result<(), CliError> {
    let mut cohort = ingest::read_manifest(&args.manifest)?;
    if let Some(images) = &args.images {
        cohort = ingest::refresh_byte_sizes(&cohort, images)?;
    }
    let cohort = ingest::compute_archive_sizes(&cohort);
    let mut summary = json!({
        "cohort_id": cohort.cohort_id(),
        "patients": cohort.patients().len(),
        "tumor_patients": cohort.count_label(Label::Tumor),
        "normal_patients": cohort.count_label(Label::Normal),
        "slices": cohort.slice_count(),
        "archive_bytes": cohort.patients().iter().map(|p| p.archive_bytes()).sum::<u64>(),
    });
    if let Some(dir) = &args.pred_dir {
        let mode = if args.strict {
            ScanMode::Strict
        } else {
            ScanMode::Lenient
        };
        let scan = ingest::scan_prediction_dir(dir, &cohort, mode)?;
        for f in &scan.unknown_files {
            eprintln!("warning: prediction file {} matches no slice", f.display());
        }
        summary["predictions"] = json!({
            "files_found": scan.predictions.len() - scan.missing_files.len(),
            "missing_files": scan.missing_files.len(),
            "unknown_files": scan.unknown_files.iter().map(|p| display(p)).collect::<Vec<_>>(),
            "boxes": scan.predictions.values().map(|p| p.boxes().len()).sum::<usize>(),
        });
    }
    if let Some(path) = &args.out_manifest {
        write_output(Some(path), &cohort.to_json())?;
    }
    write_output(args.out.as_deref(), &canonical_json(&summary))
}

fn cmd_split(args: SplitArgs) -> Result<(), CliError> {
    let cohort = ingest::read_manifest(&args.manifest)?;
    let cfg = SplitConfig {
        ratio_normal_per_tumor: args.ratio,
        test_normal_count: args.test_normal,
        test_tumor_count: args.test_tumor,
        seed: args.seed,
        include_tumor_free_slices: args.include_tumor_free,
    };
    let plan = splitter::plan_split(&cohort, &cfg)?;
    splitter::check_leakage(&plan, &cohort)?;
    if let (Some(dest), Some(images)) = (&args.materialize, &args.images) {
        splitter::materialize(&plan, &cohort, images, dest)?;
    }
    write_output(args.out.as_deref(), &canonical_json(&plan))
}

fn cmd_augment(args: AugmentArgs) -> Result<(), CliError> {
    let cohort = ingest::read_manifest(&args.manifest)?;
    let plan: SplitPlan = load_json(&args.plan, "augment")?;
    let cfg = AugmentConfig {
        brightness_delta: args.brightness,
        hflip: args.hflip,
        vflip: args.vflip,
        rotation_deg: args.rotate,
        min_box_area: args.min_box_area,
        seed: args.seed,
        randomize: args.randomize,
    };
    cfg.validate()?;
    let slices: BTreeMap<&str, _> = cohort.slices().map(|s| (s.slice_id(), s)).collect();
    let targets = plan
        .train_tumor_slices
        .iter()
        .chain(&plan.train_normal_slices)
        .map(|id| {
            slices
                .get(id.as_str())
                .copied()
                .ok_or_else(|| CliError::validation("augment", format!("plan slice `{id}` is not in the manifest")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let written: Vec<usize> = targets
        .par_iter()
        .map(|slice| -> Result<usize, CliError> {
            let pixels = PixelBuffer::load(&args.images.join(slice.relative_path()))?;
            let samples = augment::apply_pipeline(slice, &pixels, &cfg)?;
            Ok(augment::write_samples(&args.out, slice.slice_id(), &samples)?.len())
        })
        .collect::<Result<_, _>>()?;
    eprintln!(
        "augment: wrote {} images for {} slices",
        written.iter().sum::<usize>(),
        targets.len()
    );
    Ok(())
}

fn cmd_calibrate(args: EvalArgs) -> Result<(), CliError> {
    let cfg = eval_config(&args)?;
    let (cohort, preds) = load_inputs(&args)?;
    let samples = ptp::pstt_samples(&cohort, &preds, &cfg)?;
    let calibration = ptp::calibrate_gtt(&samples)?;
    write_output(args.out.as_deref(), &canonical_json(&calibration))
}

fn cmd_eval_slices(args: EvalSlicesArgs) -> Result<(), CliError> {
    let cfg = eval_config(&args.eval)?;
    let (cohort, preds) = load_inputs(&args.eval)?;
    let mut report = MetricsReport::new(eval_echo("eval-slices", &args.eval, &cfg));
    report.slice_metrics = slice_section(&cohort, &preds, &cfg)?;
    write_output(args.eval.out.as_deref(), &emit(&report, args.format.into()))
}

fn cmd_eval_ptp(args: EvalPtpArgs) -> Result<(), CliError> {
    let cfg = eval_config(&args.eval)?;
    let (calibration, gtt, source) = match (&args.gtt, &args.gtt_file) {
        (Some(g), _) => (None, *g, "flag".to_string()),
        (None, Some(path)) => {
            let c: GttCalibration = load_json(path, "eval-ptp")?;
            let g = c.gtt;
            (Some(c), g, display(path))
        }
        (None, None) => (None, DEFAULT_GTT, "default".to_string()),
    };
    ptp::check_gtt(gtt).map_err(|e| CliError::validation("args", e))?;
    let (cohort, preds) = load_inputs(&args.eval)?;
    let mut echo = eval_echo("eval-ptp", &args.eval, &cfg);
    echo["gtt"] = json!({ "value": gtt, "source": source });
    let mut report = MetricsReport::new(echo);
    report.slice_metrics = slice_section(&cohort, &preds, &cfg)?;
    report.ptp = Some(ptp::ptp_evaluate(&cohort, &preds, gtt, &cfg)?);
    report.gtt = calibration;
    write_output(args.eval.out.as_deref(), &emit(&report, args.format.into()))
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let spec = CohortSpec {
        n_patients: args.patients,
        incidence: args.incidence,
        slices_per_patient: (args.min_slices, args.max_slices),
        tumor_fraction_alpha: args.alpha,
        tumor_fraction_beta: args.beta,
        tumor_fraction_floor: args.tumor_floor,
        seed: args.seed,
        ..CohortSpec::default()
    };
    let cohort = synth::generate_cohort(&spec)?;
    write_output(Some(&args.out_manifest), &cohort.to_json())?;
    if let Some(dir) = &args.out_preds {
        let det = DetectorSpec {
            slice_tpr: args.tpr,
            slice_fpr: args.fpr,
            seed: args.detector_seed.unwrap_or(args.seed),
            ..DetectorSpec::default()
        };
        let preds = synth::simulate_detector(&cohort, &det)?;
        fs::create_dir_all(dir).map_err(|e| CliError::io("synth", format!("{}: {e}", dir.display())))?;
        let n = synth::write_predictions(dir, &cohort, &preds)?;
        eprintln!(
            "synth: {} patients, {} slices, {n} prediction files",
            cohort.patients().len(),
            cohort.slice_count()
        );
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let text = read_text(&args.input, "report")?;
    let report =
        parse_report(&text).map_err(|e| CliError::validation("report", format!("{}: {e}", args.input.display())))?;
    write_output(args.out.as_deref(), &emit(&report, args.format.into()))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Split(a) => cmd_split(a),
        Command::Augment(a) => cmd_augment(a),
        Command::CalibrateGtt(a) => cmd_calibrate(a),
        Command::EvalSlices(a) => cmd_eval_slices(a),
        Command::EvalPtp(a) => cmd_eval_ptp(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Reads `PTP_THREADS`; unset, empty, unparsable or 0 means automatic.
pub fn threads_from_env() -> usize {
    std::env::var("PTP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Runs one invocation (`argv[0]` is the program name) on a pool of
/// `threads` workers (0 = automatic) and returns the exit code.
pub fn run_with_threads(argv: &[String], threads: usize) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_IO;
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(argv: &[String]) -> i32 {
    run_with_threads(argv, threads_from_env())
}
