//! `anongoss run` / `anongoss report`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{parse_sweep, ConfigError, ScenarioConfig};
use crate::world::{run_scenario, Metric, RunOutput, WorldError};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const REPORTS_FILE: &str = "reports.jsonl";

#[derive(Debug, Parser)]
#[command(
    name = "anongoss",
    version,
    about = "Simulator for onion-routed task delegation over gossip"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario (or every cell of a sweep) and write results.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// `key=v1,v2,...`; repeatable.
        #[arg(long)]
        sweep: Vec<String>,
    },
    /// Summarize a populated output directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Invariant(String),
    #[error("no results in {0}")]
    MissingData(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad summary file: {0}")]
    Summary(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::MissingData(_) | CliError::Io(_) | CliError::Summary(_) => 1,
        }
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::Config(c) => CliError::Config(c),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

/// Parses argv, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let res = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            sweep,
        } => run(&config, &out, seed, &sweep).map(|_| ()),
        Command::Report { out } => report(&out).map(|text| print!("{text}")),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("anongoss: {e}");
            e.exit_code()
        }
    }
}

/// Expands sweep cells, runs them in parallel and writes the three output
/// files, merged in cell order.
pub fn run(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    sweeps: &[String],
) -> Result<Vec<RunOutput>, CliError> {
    let mut base = ScenarioConfig::load(config)?;
    if seed.is_some() {
        base.seed = seed;
    }
    base.seed()?;
    let extra = sweeps
        .iter()
        .map(|s| parse_sweep(s))
        .collect::<Result<Vec<_>, _>>()?;
    let cells = base.cells(&extra)?;
    for (_, c) in &cells {
        c.validate()?;
    }
    log::info!("running {} scenario cell(s)", cells.len());
    let results: Vec<Result<RunOutput, WorldError>> =
        cells.par_iter().map(|(_, c)| run_scenario(c)).collect();
    let outputs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    write_outputs(out, &outputs)?;
    Ok(outputs)
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    scenario: &'a str,
    #[serde(flatten)]
    inner: &'a T,
}

pub fn write_outputs(out: &Path, outputs: &[RunOutput]) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let mut csv = csv::Writer::from_path(out.join(SUMMARY_FILE))
        .map_err(|e| CliError::Summary(e.to_string()))?;
    for o in outputs {
        for m in &o.metrics {
            csv.serialize(m)
                .map_err(|e| CliError::Summary(e.to_string()))?;
        }
    }
    csv.flush()?;
    let mut events = BufWriter::new(File::create(out.join(EVENTS_FILE))?);
    let mut reports = BufWriter::new(File::create(out.join(REPORTS_FILE))?);
    for o in outputs {
        for e in &o.events {
            serde_json::to_writer(
                &mut events,
                &Tagged {
                    scenario: &o.scenario,
                    inner: e,
                },
            )
            .map_err(std::io::Error::other)?;
            events.write_all(b"\n")?;
        }
        for r in &o.reports {
            serde_json::to_writer(
                &mut reports,
                &Tagged {
                    scenario: &o.scenario,
                    inner: r,
                },
            )
            .map_err(std::io::Error::other)?;
            reports.write_all(b"\n")?;
        }
    }
    events.flush()?;
    reports.flush()?;
    Ok(())
}

/// A scenario name and its `metric -> (value, unit)` rows.
pub type SummaryBlock = (String, BTreeMap<String, (f64, String)>);

/// Reads `summary.csv` back, grouped by scenario in file order.
pub fn read_summary(out: &Path) -> Result<Vec<SummaryBlock>, CliError> {
    let path = out.join(SUMMARY_FILE);
    if !path.exists() {
        return Err(CliError::MissingData(out.display().to_string()));
    }
    let mut rd = csv::Reader::from_path(&path).map_err(|e| CliError::Summary(e.to_string()))?;
    let mut blocks: Vec<SummaryBlock> = Vec::new();
    for row in rd.deserialize::<(String, String, f64, String)>() {
        let (scenario, metric, value, unit) = row.map_err(|e| CliError::Summary(e.to_string()))?;
        if blocks.last().is_none_or(|b| b.0 != scenario) {
            blocks.push((scenario, BTreeMap::new()));
        }
        blocks
            .last_mut()
            .expect("pushed")
            .1
            .insert(metric, (value, unit));
    }
    if blocks.is_empty() {
        return Err(CliError::MissingData(out.display().to_string()));
    }
    Ok(blocks)
}

/// One text block per scenario.
pub fn report(out: &Path) -> Result<String, CliError> {
    let blocks = read_summary(out)?;
    let mut s = String::new();
    for (name, m) in &blocks {
        let get = |k: &str| m.get(k).map(|v| v.0);
        s.push_str(&format!("== {name}\n"));
        let rows: [(&str, &str); 11] = [
            ("delegations", "delegations"),
            ("delivery_rate", "delivery rate"),
            ("result_rate", "result rate"),
            ("messages_per_delegation", "messages per delegation"),
            ("mean_route_relays", "mean route relays"),
            ("mean_result_latency", "mean result latency (ticks)"),
            ("delegate_view_mean_degree", "degree vs delegate"),
            ("collusion_mean_degree", "degree vs colluders"),
            (
                "collusion_full_deanonymization_rate",
                "full deanonymization rate",
            ),
            ("collusion_oracle_rate", "  oracle"),
            ("sniffer_identification_rate", "sniffer identification rate"),
        ];
        for (key, label) in rows {
            if let Some(v) = get(key) {
                s.push_str(&format!("  {label:<30} {}\n", fmt_value(v)));
            }
        }
    }
    Ok(s)
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

/// Metric rows as `(metric, value)` for one scenario; handy in tests.
pub fn metric_map(metrics: &[Metric]) -> BTreeMap<&str, f64> {
    metrics
        .iter()
        .map(|m| (m.metric.as_str(), m.value))
        .collect()
}
