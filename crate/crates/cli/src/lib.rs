//! Command-line front end: argument parsing, config merging, output files
//! and exit codes. The numerics live in `energy_calib`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use energy_calib::evaluation::MetricMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub mod args;
pub mod commands;
pub mod config;
pub mod report;

pub use args::Cli;
pub use config::RunConfig;

pub const DEFAULT_OUT_DIR: &str = "energy-calib-out";

pub mod exit {
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const NUMERIC: u8 = 4;
    pub const DATA: u8 = 5;
}

/// A bad flag value or config field, reported with the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Maps an error chain to a process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use energy_calib::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return exit::USAGE;
        }
        if cause.is::<std::io::Error>() {
            return exit::IO;
        }
        if cause.is::<serde_json::Error>() {
            return exit::DATA;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } => exit::IO,
                e if e.is_numeric() => exit::NUMERIC,
                _ => exit::DATA,
            };
        }
    }
    exit::OTHER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    /// File name only, so outputs do not depend on where inputs live.
    pub name: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self {
            name: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

/// Embedded in every JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub metric_mode: MetricMode,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputDigest>,
    pub config: RunConfig,
}

impl Provenance {
    pub fn new(command: &str, config: &RunConfig, inputs: Vec<InputDigest>) -> Self {
        let seeds = BTreeMap::from([
            ("split".to_string(), config.split.seed),
            ("synth".to_string(), config.synth.seed),
        ]);
        Self {
            tool: "energy-calib".into(),
            tool_version: energy_calib::TOOL_VERSION.into(),
            command: command.into(),
            metric_mode: config.metric,
            seeds,
            inputs,
            config: config.clone(),
        }
    }
}

/// A JSON output file: provenance plus the command's result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub provenance: Provenance,
    pub result: T,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(std::io::BufWriter::new(f))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
}

/// Parses arguments already split into a [`Cli`], loads the config and runs
/// the subcommand.
pub fn run(cli: Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref())?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    commands::dispatch(cli.command, config, &out)
}
