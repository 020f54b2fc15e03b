//! Run configuration: built-in preset, TOML overlay file, then command-line
//! overrides, in increasing precedence.

use std::path::{Path, PathBuf};

use spinex::presets::{self, Preset};

use crate::CliError;

pub const OUTPUT_DIR_ENV: &str = "SPINEX_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "spinex-out";
pub const DEFAULT_PRESET: &str = "paper_defaults";

/// Settings that steer the command rather than the physics. They live under
/// `[cli]` in a config file and are removed before the preset is parsed.
#[derive(Debug, Clone, Default, PartialEq, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliSection {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub noise_sd: Option<f64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub noise_sd: f64,
    pub threads: Option<usize>,
}

/// Raw sources of a configuration, as given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Sources {
    pub preset: Option<String>,
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    /// Dedicated flags, already rendered as `key.path=value`.
    pub flag_sets: Vec<String>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub noise_sd: Option<f64>,
    pub threads: Option<usize>,
}

fn config(msg: impl std::fmt::Display) -> CliError {
    CliError::Config(msg.to_string())
}

fn read_overlay(path: &Path) -> Result<(toml::Table, CliSection), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = text.parse().map_err(|e| config(format!("{}: {e}", path.display())))?;
    let cli = match table.remove("cli") {
        None => CliSection::default(),
        Some(v) => v.try_into().map_err(|e| config(format!("{}: [cli]: {e}", path.display())))?,
    };
    Ok((table, cli))
}

/// `a.b.c=value` as a nested table. The value is read as a TOML value and
/// falls back to a bare string.
pub fn parse_assignment(spec: &str) -> Result<toml::Table, CliError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| config(format!("--set `{spec}`: expected key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config(format!("--set `{spec}`: empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = value;
    for seg in path.iter().rev() {
        let mut t = toml::Table::new();
        t.insert(seg.to_string(), node);
        node = toml::Value::Table(t);
    }
    match node {
        toml::Value::Table(t) => Ok(t),
        _ => unreachable!(),
    }
}

fn builtin(name: &str) -> Result<toml::Table, CliError> {
    let src = presets::source(name).map_err(config)?;
    src.parse().map_err(config)
}

impl RunConfig {
    pub fn load(src: &Sources) -> Result<RunConfig, CliError> {
        let (overlay, cli) = match &src.config {
            Some(path) => {
                let (t, c) = read_overlay(path)?;
                (Some(t), c)
            }
            None => (None, CliSection::default()),
        };
        let mut table = match (&src.preset, overlay) {
            (Some(name), Some(top)) => {
                let mut base = builtin(name)?;
                presets::merge(&mut base, top);
                base
            }
            (Some(name), None) => builtin(name)?,
            (None, Some(top)) if top.contains_key("extends") || top.contains_key("species") => top,
            (None, Some(top)) => {
                let mut base = builtin(DEFAULT_PRESET)?;
                presets::merge(&mut base, top);
                base
            }
            (None, None) => builtin(DEFAULT_PRESET)?,
        };
        for spec in src.sets.iter().chain(&src.flag_sets) {
            presets::merge(&mut table, parse_assignment(spec)?);
        }
        let preset = Preset::from_table(table).map_err(config)?;

        let output_dir = src
            .output_dir
            .clone()
            .or(cli.output_dir)
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
        let noise_sd = src.noise_sd.or(cli.noise_sd).unwrap_or(0.0);
        if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
            return Err(config(format!("noise_sd must be a finite non-negative number, got {noise_sd}")));
        }
        let threads = src.threads.or(cli.threads);
        if threads == Some(0) {
            return Err(config("threads must be at least 1"));
        }
        Ok(RunConfig { preset, output_dir, seed: src.seed.or(cli.seed).unwrap_or(0), noise_sd, threads })
    }
}
