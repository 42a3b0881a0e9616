//! Flag parsing and scenario execution for the `tricloud` binary.
//!
//! Precedence, lowest first: built-in defaults, then the `--scenario` file,
//! then individual flags. `--preset` replaces the file layer with a named
//! matrix; only `--seed`, `--chunk-size`, `--mode`, `--time-scale` and
//! `--out` may accompany it.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use thiserror::Error;
use tricloud_core::domain::{
    validate_config, ConfigError, ScenarioConfig, TimeMode, TransportKind, Violation,
};
use tricloud_core::metrics::emit_csv;
use tricloud_core::nodes::NodeError;
use tricloud_core::presets::{
    preset, run_one, run_preset, write_matrix, write_scenario, PresetName, PresetScenario,
    ReportError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransportFlag {
    Blocking,
    Pubsub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeFlag {
    Sim,
    Tcp,
}

#[derive(Debug, Parser)]
#[command(
    name = "tricloud",
    version,
    about = "Far-edge / edge / cloud continuum simulator"
)]
struct Flags {
    /// Scenario config file (JSON).
    #[arg(long, value_name = "FILE")]
    scenario: Option<PathBuf>,
    /// fig3_parallelism, fig4_rtt, fig5_datasets or fp_study.
    #[arg(long, value_name = "NAME", value_parser = |s: &str| s.parse::<PresetName>())]
    preset: Option<PresetName>,
    #[arg(long, value_enum)]
    transport: Option<TransportFlag>,
    #[arg(long, value_enum)]
    parallelism: Option<Switch>,
    #[arg(long, value_enum)]
    cloud: Option<Switch>,
    #[arg(long, value_name = "N")]
    images: Option<usize>,
    #[arg(long = "chunk-size", value_name = "N")]
    chunk_size: Option<usize>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeFlag>,
    /// Wall seconds per simulated second in tcp mode.
    #[arg(long = "time-scale", value_name = "F")]
    time_scale: Option<f64>,
    #[arg(long, value_name = "DIR", default_value = "results")]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    Single(Box<ScenarioConfig>),
    Matrix(PresetScenario),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub plan: Plan,
    pub out: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Unknown flag, bad flag value, or a help/version request.
    #[error("{}", first_line(.0))]
    UnknownFlag(clap::Error),
    #[error("--preset cannot be combined with {0}")]
    ConflictingFlags(&'static str),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid config: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Run(#[from] ReportError),
}

fn first_line(e: &clap::Error) -> String {
    let text = e.to_string();
    let line = text.lines().next().unwrap_or_default();
    line.strip_prefix("error: ").unwrap_or(line).to_string()
}

fn join(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.0.as_str())
        .collect::<Vec<_>>()
        .join("; ")
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::UnknownFlag(e) if !e.use_stderr() => EXIT_OK,
            CliError::UnknownFlag(_)
            | CliError::ConflictingFlags(_)
            | CliError::Config(_)
            | CliError::Invalid(_) => EXIT_CONFIG,
            CliError::Run(_) => EXIT_RUNTIME,
        }
    }
}

fn on(s: Switch) -> bool {
    s == Switch::On
}

fn apply_base_flags(cfg: &mut ScenarioConfig, f: &Flags) {
    if let Some(n) = f.chunk_size {
        cfg.chunk_size_bytes = n;
    }
    if let Some(seed) = f.seed {
        cfg.rng_seed = seed;
    }
    if let Some(m) = f.mode {
        cfg.time_mode = match m {
            ModeFlag::Sim => TimeMode::Virtual,
            ModeFlag::Tcp => TimeMode::WallclockTcp,
        };
    }
    if let Some(s) = f.time_scale {
        cfg.time_scale = s;
    }
}

fn validated(cfg: &ScenarioConfig) -> Result<(), CliError> {
    validate_config(cfg).map_err(CliError::Invalid)
}

pub fn parse_flags<I, T>(argv: I) -> Result<Invocation, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let f = Flags::try_parse_from(argv).map_err(CliError::UnknownFlag)?;

    if let Some(name) = f.preset {
        let conflicts = [
            ("--scenario", f.scenario.is_some()),
            ("--transport", f.transport.is_some()),
            ("--parallelism", f.parallelism.is_some()),
            ("--cloud", f.cloud.is_some()),
            ("--images", f.images.is_some()),
        ];
        if let Some((flag, _)) = conflicts.iter().find(|(_, set)| *set) {
            return Err(CliError::ConflictingFlags(flag));
        }
        let mut base = ScenarioConfig::default();
        apply_base_flags(&mut base, &f);
        let matrix = preset(name, &base);
        for s in &matrix.scenarios {
            validated(&s.cfg)?;
        }
        return Ok(Invocation {
            plan: Plan::Matrix(matrix),
            out: f.out,
        });
    }

    let mut cfg = match &f.scenario {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(t) = f.transport {
        cfg.transport = match t {
            TransportFlag::Blocking => TransportKind::BlockingSession,
            TransportFlag::Pubsub => TransportKind::Pubsub,
        };
    }
    if let Some(p) = f.parallelism {
        cfg.parallelism = on(p);
    }
    if let Some(c) = f.cloud {
        cfg.cloud_enabled = on(c);
    }
    if let Some(n) = f.images {
        cfg.dataset_size = n;
    }
    apply_base_flags(&mut cfg, &f);
    validated(&cfg)?;
    Ok(Invocation {
        plan: Plan::Single(Box::new(cfg)),
        out: f.out,
    })
}

/// Keeps whatever finished before a transport failure.
fn save_partial(dir: &Path, err: &ReportError) {
    if let ReportError::Run {
        source: NodeError::TransportFailure { partial, .. },
        ..
    } = err
    {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = emit_csv(partial, dir.join("metrics.csv"));
        }
    }
}

pub fn execute(inv: &Invocation) -> Result<(), CliError> {
    match &inv.plan {
        Plan::Single(cfg) => {
            let result = run_one("scenario", cfg).inspect_err(|e| save_partial(&inv.out, e))?;
            write_scenario(&inv.out, &result)?;
            println!(
                "{} images in {:.3} s, {:.4} img/s -> {}",
                result.summary.n_images,
                result.summary.total_runtime,
                result.summary.throughput,
                inv.out.display()
            );
        }
        Plan::Matrix(matrix) => {
            let m = run_preset(matrix).inspect_err(|e| {
                if let ReportError::Run { scenario, .. } = e {
                    save_partial(&inv.out.join(scenario), e);
                }
            })?;
            write_matrix(&inv.out, &m)?;
            for r in &m.results {
                println!("{:<32} {:>10.4} img/s", r.name, r.summary.throughput);
            }
            println!("-> {}", inv.out.display());
        }
    }
    Ok(())
}

/// Parses, runs, and maps the outcome to a process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match parse_flags(argv).and_then(|inv| execute(&inv)) {
        Ok(()) => EXIT_OK,
        Err(CliError::UnknownFlag(e)) if !e.use_stderr() => {
            let _ = e.print();
            EXIT_OK
        }
        Err(e) => {
            eprintln!("tricloud: {e}");
            e.exit_code()
        }
    }
}
