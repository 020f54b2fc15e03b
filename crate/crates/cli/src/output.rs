//! Output directory bookkeeping and the run manifest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use spinex::io::Header;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub toolkit_version: String,
    pub preset: String,
    pub config_hash: String,
    pub seed: u64,
    pub noise_sd: f64,
    pub threads: usize,
    pub started_unix_s: f64,
    pub wall_clock_s: f64,
    pub files: Vec<FileEntry>,
    pub summary: serde_json::Value,
}

/// Collects the files a command emits so the manifest can list them all.
pub struct Output {
    dir: PathBuf,
    command: String,
    started: SystemTime,
    clock: Instant,
    files: Vec<FileEntry>,
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Output {
    pub fn create(dir: &Path, command: &str) -> Result<Output, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("output directory {}: {e}", dir.display())))?;
        let probe = dir.join(".spinex-write-test");
        fs::write(&probe, b"").map_err(|e| CliError::Config(format!("output directory {} is not writable: {e}", dir.display())))?;
        let _ = fs::remove_file(probe);
        Ok(Output { dir: dir.to_path_buf(), command: command.into(), started: SystemTime::now(), clock: Instant::now(), files: Vec::new() })
    }

    /// Standard header block for a table produced under `cfg`.
    pub fn header(&self, cfg: &RunConfig) -> Header {
        Header::new()
            .with("spinex", env!("CARGO_PKG_VERSION"))
            .with("command", &self.command)
            .with("preset", &cfg.preset.name)
            .with("config_hash", cfg.preset.digest())
            .with("seed", cfg.seed)
            .with("noise_sd", cfg.noise_sd)
    }

    /// Renders a file in memory, writes it and records its checksum.
    pub fn emit<F>(&mut self, name: &str, render: F) -> Result<PathBuf, CliError>
    where
        F: FnOnce(&mut dyn Write) -> spinex::Result<()>,
    {
        let mut buf = Vec::new();
        render(&mut buf).map_err(|e| CliError::Runtime(format!("{name}: {e}")))?;
        let path = self.dir.join(name);
        let mut f = BufWriter::new(fs::File::create(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?);
        f.write_all(&buf).and_then(|_| f.flush()).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        self.files.push(FileEntry { path: name.into(), bytes: buf.len() as u64, sha256: hex(&buf) });
        Ok(path)
    }

    /// Writes `<command>_manifest.json` and returns it.
    pub fn finish(self, cfg: &RunConfig, summary: serde_json::Value) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            command: self.command.clone(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            preset: cfg.preset.name.clone(),
            config_hash: cfg.preset.digest(),
            seed: cfg.seed,
            noise_sd: cfg.noise_sd,
            threads: rayon::current_num_threads(),
            started_unix_s: self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            wall_clock_s: self.clock.elapsed().as_secs_f64(),
            files: self.files,
            summary,
        };
        let path = self.dir.join(format!("{}_manifest.json", self.command));
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(manifest)
    }
}
