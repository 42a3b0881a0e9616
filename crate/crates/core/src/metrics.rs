//! Per-image stage timings, CSV and JSON output, run summaries and
//! scenario comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column layout of `metrics.csv`. Times are seconds with 6 decimals.
/// `edge_rtt`/`cloud_rtt` span first chunk sent to result received and
/// exclude far-edge detection; only the column matching `origin` is set.
/// Summary spreads are sample standard deviations (n−1).
pub const CSV_HEADER: &str = "image_id,t_read_decode,t_quality,t_infer1,t_infer2,t_detect_total,t_upload,t_identify,edge_rtt,cloud_rtt,origin,recognized,label";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Edge,
    Cloud,
    None,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Edge => "edge",
            Origin::Cloud => "cloud",
            Origin::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub image_id: String,
    pub t_read_decode: f64,
    pub t_quality: f64,
    pub t_infer1: f64,
    pub t_infer2: f64,
    pub t_detect_total: f64,
    /// Absent for images that were never uploaded.
    pub t_upload: Option<f64>,
    pub t_identify: Option<f64>,
    pub edge_rtt: Option<f64>,
    pub cloud_rtt: Option<f64>,
    pub origin: Origin,
    pub recognized: bool,
    pub label: Option<String>,
    pub is_false_positive: bool,
    /// Virtual (or scaled wall) time at which the record became final.
    pub completed_at: f64,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records to summarize")]
    EmptyRecords,
    #[error("wall time must be positive, got {0}")]
    NonPositiveWall(f64),
    #[error("cannot compare runs of {base} and {variant} images")]
    MismatchedScenarios { base: usize, variant: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n == 1 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Stat { n, mean, std })
    }
}

/// Busy time accumulated by one core over a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoreTrace {
    pub core_id: u8,
    pub busy_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_images: usize,
    pub total_runtime: f64,
    pub throughput: f64,
    pub metrics: BTreeMap<String, Stat>,
    pub core0_util: f64,
    pub core1_util: f64,
    pub total_util: f64,
    pub recognized: usize,
    pub false_positives: usize,
    pub origin_counts: BTreeMap<String, usize>,
}

type Column = (&'static str, fn(&MetricsRecord) -> Option<f64>);

/// Busy time over `wall` for cores 0 and 1; other cores are ignored.
pub fn summarize(
    records: &[MetricsRecord],
    core_traces: &[CoreTrace],
    wall: f64,
) -> Result<RunSummary, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    if wall.is_nan() || wall <= 0.0 {
        return Err(MetricsError::NonPositiveWall(wall));
    }
    let util = |id: u8| {
        core_traces
            .iter()
            .filter(|c| c.core_id == id)
            .map(|c| c.busy_time)
            .sum::<f64>()
            / wall
    };
    let (core0_util, core1_util) = (util(0), util(1));

    let columns: [Column; 10] = [
        ("t_read_decode", |r| Some(r.t_read_decode)),
        ("t_quality", |r| Some(r.t_quality)),
        ("t_infer1", |r| Some(r.t_infer1)),
        ("t_infer2", |r| Some(r.t_infer2)),
        ("t_detect_total", |r| Some(r.t_detect_total)),
        ("t_upload", |r| r.t_upload),
        ("t_identify", |r| r.t_identify),
        ("edge_rtt", |r| r.edge_rtt),
        ("cloud_rtt", |r| r.cloud_rtt),
        ("completed_at", |r| Some(r.completed_at)),
    ];
    let metrics = columns
        .iter()
        .filter_map(|(name, get)| {
            let values: Vec<f64> = records.iter().filter_map(get).collect();
            Stat::of(&values).map(|s| (name.to_string(), s))
        })
        .collect();

    let mut origin_counts = BTreeMap::new();
    for r in records {
        *origin_counts
            .entry(r.origin.as_str().to_string())
            .or_insert(0) += 1;
    }
    Ok(RunSummary {
        n_images: records.len(),
        total_runtime: wall,
        throughput: records.len() as f64 / wall,
        metrics,
        core0_util,
        core1_util,
        total_util: (core0_util + core1_util) / 2.0,
        recognized: records.iter().filter(|r| r.recognized).count(),
        false_positives: records.iter().filter(|r| r.is_false_positive).count(),
        origin_counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub runtime_reduction: f64,
    pub throughput_gain: f64,
}

pub fn compare(base: &RunSummary, variant: &RunSummary) -> Result<ComparisonReport, MetricsError> {
    if base.n_images != variant.n_images {
        return Err(MetricsError::MismatchedScenarios {
            base: base.n_images,
            variant: variant.n_images,
        });
    }
    Ok(ComparisonReport {
        runtime_reduction: (base.total_runtime - variant.total_runtime) / base.total_runtime,
        throughput_gain: (variant.throughput - base.throughput) / base.throughput,
    })
}

/// Orders records by completion time, then image id.
pub fn sort_records(records: &mut [MetricsRecord]) {
    records.sort_by(|a, b| {
        a.completed_at
            .total_cmp(&b.completed_at)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(records: &[MetricsRecord]) -> String {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut out = String::with_capacity(64 + sorted.len() * 128);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &sorted {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{},{}",
            csv_field(&r.image_id),
            r.t_read_decode,
            r.t_quality,
            r.t_infer1,
            r.t_infer2,
            r.t_detect_total,
            opt(r.t_upload),
            opt(r.t_identify),
            opt(r.edge_rtt),
            opt(r.cloud_rtt),
            r.origin.as_str(),
            r.recognized,
            csv_field(r.label.as_deref().unwrap_or("")),
        );
    }
    out
}

/// Writes `records` to `path`; returns the number of data rows.
pub fn emit_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<usize, MetricsError> {
    std::fs::write(path, render_csv(records))?;
    Ok(records.len())
}

pub fn summary_json(summary: &RunSummary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, edge_rtt: f64, completed_at: f64) -> MetricsRecord {
        MetricsRecord {
            image_id: id.into(),
            t_read_decode: 1.34,
            t_quality: 0.62,
            t_infer1: 0.52,
            t_infer2: 3.31,
            t_detect_total: 4.45,
            t_upload: Some(2.0),
            t_identify: Some(1.09),
            edge_rtt: Some(edge_rtt),
            cloud_rtt: None,
            origin: Origin::Edge,
            recognized: true,
            label: Some("Person 1".into()),
            is_false_positive: false,
            completed_at,
        }
    }

    fn summary(n: usize, runtime: f64) -> RunSummary {
        let recs: Vec<_> = (0..n)
            .map(|i| record(&format!("i{i}"), 3.0, i as f64))
            .collect();
        summarize(&recs, &[], runtime).unwrap()
    }

    #[test]
    fn single_record_has_zero_std() {
        let s = summarize(&[record("a", 3.0, 1.0)], &[], 10.0).unwrap();
        assert_eq!(
            s.metrics["edge_rtt"],
            Stat {
                n: 1,
                mean: 3.0,
                std: 0.0
            }
        );
    }

    #[test]
    fn textbook_sample_std() {
        let recs: Vec<_> = [1.0, 2.0, 3.0].iter().map(|&v| record("a", v, v)).collect();
        let s = summarize(&recs, &[], 1.0).unwrap();
        assert_eq!(s.metrics["edge_rtt"].mean, 2.0);
        assert_eq!(s.metrics["edge_rtt"].std, 1.0);
        assert!(!s.metrics.contains_key("cloud_rtt"));
    }

    #[test]
    fn utilization_identity() {
        let traces = [
            CoreTrace {
                core_id: 0,
                busy_time: 9.7,
            },
            CoreTrace {
                core_id: 1,
                busy_time: 4.14,
            },
        ];
        let s = summarize(&[record("a", 1.0, 1.0)], &traces, 10.0).unwrap();
        assert!((s.core0_util - 0.97).abs() < 1e-12);
        assert_eq!(s.total_util, (s.core0_util + s.core1_util) / 2.0);
        assert_eq!(s.throughput, 1.0 / 10.0);
    }

    #[test]
    fn summarize_errors() {
        assert!(matches!(
            summarize(&[], &[], 1.0),
            Err(MetricsError::EmptyRecords)
        ));
        assert!(summarize(&[record("a", 1.0, 1.0)], &[], 0.0).is_err());
    }

    #[test]
    fn reduction_and_gain_examples() {
        let r = compare(&summary(3, 289.8), &summary(3, 226.7)).unwrap();
        assert!((r.runtime_reduction - 0.2177).abs() < 1e-4);

        let mut base = summary(3, 1.0);
        let mut variant = summary(3, 1.0);
        base.throughput = 0.172;
        variant.throughput = 0.220;
        assert!((compare(&base, &variant).unwrap().throughput_gain - 0.279).abs() < 1e-3);

        let same = compare(&base, &base).unwrap();
        assert_eq!((same.runtime_reduction, same.throughput_gain), (0.0, 0.0));

        assert!(matches!(
            compare(&summary(3, 1.0), &summary(4, 1.0)),
            Err(MetricsError::MismatchedScenarios { .. })
        ));
    }

    #[test]
    fn compare_flips_sign() {
        let (a, b) = (summary(2, 10.0), summary(2, 8.0));
        let ab = compare(&a, &b).unwrap();
        let ba = compare(&b, &a).unwrap();
        assert!(ab.runtime_reduction > 0.0 && ba.runtime_reduction < 0.0);
        assert!(ab.throughput_gain > 0.0 && ba.throughput_gain < 0.0);
    }

    #[test]
    fn csv_layout_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut late = record("b", 3.1, 5.0);
        late.cloud_rtt = Some(4.0);
        late.edge_rtt = None;
        late.origin = Origin::Cloud;
        late.label = None;
        late.recognized = false;
        let rows = emit_csv(&[late, record("z", 3.1, 2.0), record("a", 3.1, 2.0)], &path).unwrap();
        assert_eq!(rows, 3);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(
            lines[1],
            "a,1.340000,0.620000,0.520000,3.310000,4.450000,2.000000,1.090000,3.100000,,edge,true,Person 1"
        );
        assert!(lines[2].starts_with("z,"));
        assert!(lines[3].ends_with(",,4.000000,cloud,false,"));
    }

    #[test]
    fn empty_csv_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        assert_eq!(emit_csv(&[], &path).unwrap(), 0);
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            format!("{CSV_HEADER}\n")
        );
    }

    #[test]
    fn emit_to_missing_dir_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nope").join("m.csv");
        assert!(matches!(emit_csv(&[], &path), Err(MetricsError::Io(_))));
    }
}
