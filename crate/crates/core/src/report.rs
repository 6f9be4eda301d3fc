//! Machine- and human-readable metric reports.
//!
//! JSON output is canonical: object keys sorted, floats written in the
//! shortest form that round-trips, full precision. CSV output mirrors a
//! classification-report table and is the only place values are rounded.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ptp::{GttCalibration, PtpReport};
use crate::slice_metrics::{ClassMetrics, Score, SliceMetricsSection};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_metrics: Option<SliceMetricsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ptp: Option<PtpReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gtt: Option<GttCalibration>,
    pub config_echo: serde_json::Value,
    pub toolkit_version: String,
}

impl MetricsReport {
    pub fn new(config_echo: serde_json::Value) -> Self {
        Self {
            slice_metrics: None,
            ptp: None,
            gtt: None,
            config_echo,
            toolkit_version: TOOLKIT_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Canonical JSON text for any serializable value, newline-terminated.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // Routing through `Value` sorts object keys (serde_json's map is a
    // BTreeMap unless `preserve_order` is enabled, which this crate never
    // does).
    let v = serde_json::to_value(value).expect("report types serialize");
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    s
}

fn csv_row(out: &mut String, class: &str, m: &ClassMetrics) {
    let _ = writeln!(
        out,
        "{class},{},{},{},{}",
        m.precision.display_2dp(),
        m.recall.display_2dp(),
        m.f1.display_2dp(),
        m.support
    );
}

fn csv_ptp(out: &mut String, ptp: &PtpReport) {
    out.push_str("PTP Metric,Value\n");
    let rows: [(&str, Score); 4] = [
        ("Accuracy", ptp.ptp_accuracy),
        ("Precision", ptp.ptp_precision),
        ("Recall", ptp.ptp_recall),
        ("F1", ptp.ptp_f1),
    ];
    for (name, s) in rows {
        let _ = writeln!(out, "{name},{}", s.display_2dp());
    }
}

/// Renders a report. CSV holds the per-class table (`Class, Precision,
/// Recall, F1, Support`; rows per class, then `AVG` as the unweighted mean
/// and `Weighted AVG` by support) followed, after a blank line, by the
/// patient-level metrics when present.
pub fn emit(report: &MetricsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => canonical_json(report),
        ReportFormat::Csv => {
            let mut out = String::new();
            if let Some(sm) = &report.slice_metrics {
                out.push_str("Class,Precision,Recall,F1,Support\n");
                for row in &sm.classes {
                    csv_row(&mut out, &row.class, &row.metrics);
                }
                csv_row(&mut out, "AVG", &sm.macro_average);
                csv_row(&mut out, "Weighted AVG", &sm.weighted_average);
            }
            if let Some(ptp) = &report.ptp {
                if !out.is_empty() {
                    out.push('\n');
                }
                csv_ptp(&mut out, ptp);
            }
            out
        }
    }
}

pub fn parse_report(text: &str) -> Result<MetricsReport, serde_json::Error> {
    serde_json::from_str(text)
}
