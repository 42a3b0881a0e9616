//! Named scenario matrices and their comparison reports.
//!
//! | preset            | images           | cloud   | parallelism | transports |
//! |-------------------|------------------|---------|-------------|------------|
//! | `fig3_parallelism`| 3,000            | off     | on / off    | both       |
//! | `fig4_rtt`        | 47               | on      | on          | both       |
//! | `fig5_datasets`   | 47, 100, 150, 200| on, off | on / off    | both       |
//! | `fp_study`        | 158 unknown      | on      | on          | pub/sub    |
//!
//! The 3,000-image runs use the bench link ([`FIG3_FAR_TO_EDGE`]); every
//! other preset uses the fitted field link from [`crate::calibration`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Value};
use thiserror::Error;

use crate::calibration::FIG3_FAR_TO_EDGE;
use crate::domain::{ScenarioConfig, TimeMode, TransportKind};
use crate::metrics::{compare, emit_csv, summary_json, MetricsError, RunSummary};
use crate::nodes::{run_scenario, tcp::run_tcp, NodeError, RunOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PresetName {
    Fig3Parallelism,
    Fig4Rtt,
    Fig5Datasets,
    FpStudy,
}

impl PresetName {
    pub const ALL: [PresetName; 4] = [
        PresetName::Fig3Parallelism,
        PresetName::Fig4Rtt,
        PresetName::Fig5Datasets,
        PresetName::FpStudy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::Fig3Parallelism => "fig3_parallelism",
            PresetName::Fig4Rtt => "fig4_rtt",
            PresetName::Fig5Datasets => "fig5_datasets",
            PresetName::FpStudy => "fp_study",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown preset `{0}`")]
pub struct UnknownPreset(pub String);

impl FromStr for PresetName {
    type Err = UnknownPreset;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| UnknownPreset(s.to_string()))
    }
}

/// One cell of a preset matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Output subdirectory name.
    pub name: String,
    pub cfg: ScenarioConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetScenario {
    pub name: PresetName,
    pub scenarios: Vec<Scenario>,
}

pub const FIG5_SIZES: [usize; 4] = [47, 100, 150, 200];

fn tag(t: TransportKind) -> &'static str {
    match t {
        TransportKind::Pubsub => "pubsub",
        TransportKind::BlockingSession => "blocking",
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

const TRANSPORTS: [TransportKind; 2] = [TransportKind::Pubsub, TransportKind::BlockingSession];

/// Expands `name` over `base`; each cell overrides only the axes the
/// preset varies (plus the fig3 bench link and fp_study population).
pub fn preset(name: PresetName, base: &ScenarioConfig) -> PresetScenario {
    let mut scenarios = Vec::new();
    match name {
        PresetName::Fig3Parallelism => {
            for transport in TRANSPORTS {
                for parallelism in [false, true] {
                    scenarios.push(Scenario {
                        name: format!("{}_par_{}", tag(transport), on_off(parallelism)),
                        cfg: ScenarioConfig {
                            transport,
                            parallelism,
                            cloud_enabled: false,
                            dataset_size: 3000,
                            link_far_to_edge: FIG3_FAR_TO_EDGE,
                            ..base.clone()
                        },
                    });
                }
            }
        }
        PresetName::Fig4Rtt => {
            for transport in TRANSPORTS {
                scenarios.push(Scenario {
                    name: tag(transport).to_string(),
                    cfg: ScenarioConfig {
                        transport,
                        parallelism: true,
                        cloud_enabled: true,
                        dataset_size: 47,
                        ..base.clone()
                    },
                });
            }
        }
        PresetName::Fig5Datasets => {
            for size in FIG5_SIZES {
                for transport in TRANSPORTS {
                    for (cloud_enabled, parallelism) in
                        [(true, true), (false, true), (false, false)]
                    {
                        scenarios.push(Scenario {
                            name: format!(
                                "n{size:03}_{}_cloud_{}_par_{}",
                                tag(transport),
                                on_off(cloud_enabled),
                                on_off(parallelism)
                            ),
                            cfg: ScenarioConfig {
                                transport,
                                parallelism,
                                cloud_enabled,
                                dataset_size: size,
                                ..base.clone()
                            },
                        });
                    }
                }
            }
        }
        PresetName::FpStudy => scenarios.push(Scenario {
            name: "pubsub".to_string(),
            cfg: ScenarioConfig {
                transport: TransportKind::Pubsub,
                parallelism: true,
                cloud_enabled: true,
                dataset_size: 158,
                face_prob: 1.0,
                known_prob: 0.0,
                fp_rate: 0.627,
                ..base.clone()
            },
        }),
    }
    PresetScenario { name, scenarios }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("scenario `{scenario}`: {source}")]
    Run { scenario: String, source: NodeError },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub name: String,
    pub cfg: ScenarioConfig,
    pub output: RunOutput,
    pub summary: RunSummary,
}

#[derive(Debug, Clone)]
pub struct MatrixResult {
    pub preset: PresetName,
    pub results: Vec<ScenarioResult>,
    pub comparison: Value,
}

impl MatrixResult {
    pub fn get(&self, name: &str) -> Option<&ScenarioResult> {
        self.results.iter().find(|r| r.name == name)
    }
}

pub fn run_one(name: &str, cfg: &ScenarioConfig) -> Result<ScenarioResult, ReportError> {
    let output = match cfg.time_mode {
        TimeMode::Virtual => run_scenario(cfg),
        TimeMode::WallclockTcp => run_tcp(cfg),
    };
    let output = output.map_err(|source| ReportError::Run {
        scenario: name.to_string(),
        source,
    })?;
    let summary = output.summary()?;
    Ok(ScenarioResult {
        name: name.to_string(),
        cfg: cfg.clone(),
        output,
        summary,
    })
}

/// Runs every cell in order, then builds the preset's comparison report.
pub fn run_preset(p: &PresetScenario) -> Result<MatrixResult, ReportError> {
    let results = p
        .scenarios
        .iter()
        .map(|s| run_one(&s.name, &s.cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let comparison = comparison_report(p.name, &results)?;
    Ok(MatrixResult {
        preset: p.name,
        results,
        comparison,
    })
}

fn find<'a>(results: &'a [ScenarioResult], name: &str) -> &'a RunSummary {
    &results
        .iter()
        .find(|r| r.name == name)
        .expect("preset cell")
        .summary
}

fn stat(s: &RunSummary, metric: &str) -> Value {
    s.metrics.get(metric).map_or(
        Value::Null,
        |m| json!({"mean": m.mean, "std": m.std, "n": m.n}),
    )
}

fn parallelism_gain(off: &RunSummary, on: &RunSummary) -> Result<Value, MetricsError> {
    let c = compare(off, on)?;
    Ok(json!({
        "sequential_throughput": off.throughput,
        "parallel_throughput": on.throughput,
        "runtime_reduction": c.runtime_reduction,
        "throughput_gain": c.throughput_gain,
        "sequential_util": [off.core0_util, off.core1_util, off.total_util],
        "parallel_util": [on.core0_util, on.core1_util, on.total_util],
    }))
}

pub fn comparison_report(
    name: PresetName,
    results: &[ScenarioResult],
) -> Result<Value, MetricsError> {
    let mut report = BTreeMap::new();
    match name {
        PresetName::Fig3Parallelism => {
            for t in TRANSPORTS {
                let off = find(results, &format!("{}_par_off", tag(t)));
                let on = find(results, &format!("{}_par_on", tag(t)));
                report.insert(tag(t).to_string(), parallelism_gain(off, on)?);
            }
        }
        PresetName::Fig4Rtt => {
            for t in TRANSPORTS {
                let s = find(results, tag(t));
                let ratio = match (s.metrics.get("cloud_rtt"), s.metrics.get("edge_rtt")) {
                    (Some(c), Some(e)) => json!(c.mean / e.mean),
                    _ => Value::Null,
                };
                report.insert(
                    tag(t).to_string(),
                    json!({
                        "edge_rtt": stat(s, "edge_rtt"),
                        "cloud_rtt": stat(s, "cloud_rtt"),
                        "t_upload": stat(s, "t_upload"),
                        "cloud_to_edge_rtt_ratio": ratio,
                    }),
                );
            }
        }
        PresetName::Fig5Datasets => {
            for size in FIG5_SIZES {
                for t in TRANSPORTS {
                    let cell = |cloud: &str, par: &str| {
                        find(
                            results,
                            &format!("n{size:03}_{}_cloud_{cloud}_par_{par}", tag(t)),
                        )
                    };
                    let on = cell("off", "on");
                    let off = cell("off", "off");
                    let cloud = cell("on", "on");
                    report.insert(
                        format!("n{size:03}_{}", tag(t)),
                        json!({
                            "throughput_cloud_on_par_on": cloud.throughput,
                            "throughput_cloud_off_par_on": on.throughput,
                            "throughput_cloud_off_par_off": off.throughput,
                            "parallelism": parallelism_gain(off, on)?,
                        }),
                    );
                }
            }
        }
        PresetName::FpStudy => {
            let s = find(results, "pubsub");
            report.insert(
                "pubsub".to_string(),
                json!({
                    "images_sent": s.n_images,
                    "false_positives": s.false_positives,
                    "false_positive_rate": s.false_positives as f64 / s.n_images as f64,
                }),
            );
        }
    }
    Ok(serde_json::to_value(report).expect("report serializes"))
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

/// Writes `metrics.csv` and `summary.json` for one run into `dir`.
pub fn write_scenario(dir: &Path, result: &ScenarioResult) -> Result<(), ReportError> {
    std::fs::create_dir_all(dir)?;
    emit_csv(&result.output.records, dir.join("metrics.csv"))?;
    std::fs::write(dir.join("summary.json"), summary_json(&result.summary))?;
    Ok(())
}

/// One subdirectory per cell, plus `summary.json` (all cells) and
/// `comparison.json` at the top of `out`.
pub fn write_matrix(out: &Path, m: &MatrixResult) -> Result<(), ReportError> {
    std::fs::create_dir_all(out)?;
    let mut all = BTreeMap::new();
    for r in &m.results {
        write_scenario(&out.join(&r.name), r)?;
        all.insert(
            r.name.clone(),
            serde_json::to_value(&r.summary).expect("summary serializes"),
        );
    }
    let top = json!({ "preset": m.preset.as_str(), "scenarios": all });
    std::fs::write(out.join("summary.json"), pretty(&top))?;
    std::fs::write(out.join("comparison.json"), pretty(&m.comparison))?;
    Ok(())
}
