//! `spinex` command-line driver.

mod commands;
mod config;
mod output;
mod validate;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{RunConfig, Sources};
use output::Output;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

/// Bad inputs map to the configuration code, everything the run itself
/// trips over to the runtime code.
impl From<spinex::Error> for CliError {
    fn from(e: spinex::Error) -> Self {
        use spinex::Error as E;
        match e {
            E::Domain { .. } | E::InvalidParameter { .. } | E::UnknownPreset(_) | E::Parse(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "spinex", version, about = "Alkali / noble-gas spin-exchange simulations, scans, spectra and fits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Built-in preset to start from (see `presets-list`).
    #[arg(long, short)]
    preset: Option<String>,
    /// TOML overlay merged over the preset; an optional [cli] table sets
    /// output_dir, seed, noise_sd and threads.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any preset key, e.g. `--set rates.gamma_p=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory [default: $SPINEX_OUTPUT_DIR or ./spinex-out].
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
    /// Seed for synthetic noise and random validation draws.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for scans and sweeps.
    #[arg(long)]
    threads: Option<usize>,
    /// Integrator relative tolerance (run.grid.rtol).
    #[arg(long)]
    rtol: Option<f64>,
    /// Output sampling rate in Hz (run.grid.sample_rate).
    #[arg(long)]
    sample_rate: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one pulse sequence (and the preset's free-evolution traces).
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Exchange time of the sequence, s (protocol.exchange_time).
        #[arg(long)]
        exchange_time: Option<f64>,
        /// Standard deviation of additive Gaussian noise on the probe signal.
        #[arg(long)]
        noise_sd: Option<f64>,
        /// Keep the raw probe signal (run.subtract_background = false).
        #[arg(long)]
        no_background: bool,
    },
    /// Simulate, fit and reconstruct across exchange times.
    ExchangeScan {
        #[command(flatten)]
        common: Common,
        /// Explicit exchange times in s, comma separated; overrides [scan].
        #[arg(long, value_delimiter = ',')]
        t_values: Option<Vec<f64>>,
        #[arg(long)]
        t_start: Option<f64>,
        #[arg(long)]
        t_stop: Option<f64>,
        #[arg(long)]
        t_step: Option<f64>,
        /// Run both pulse axes and reconstruct the complex amplitude.
        #[arg(long)]
        complex: bool,
    },
    /// Spectral map over the preset's field sweep, with gap and branches.
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        b_min_mg: Option<f64>,
        #[arg(long)]
        b_max_mg: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
        /// Measurement window per column, s (sweep.spectrum.duration).
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Fit a recorded readout signal (two columns: τ, signal).
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        input: PathBuf,
        /// Exchange time the readout belongs to, s.
        #[arg(long)]
        exchange_time: Option<f64>,
        /// Chirp rate Γ̃_p, Hz (fit.gamma_p_tilde).
        #[arg(long)]
        gamma_p_tilde: Option<f64>,
        /// `model` or `fit` (fit.polarization).
        #[arg(long)]
        polarization: Option<String>,
    },
    /// Run the self-check suites; exits 1 if any fails.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        oracle_draws: usize,
        #[arg(long, default_value_t = 200)]
        fit_draws: usize,
    },
    /// List built-in presets, or print one fully resolved.
    PresetsList {
        #[arg(long, value_name = "NAME")]
        show: Option<String>,
    },
}

fn push<T: std::fmt::Display>(sets: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        sets.push(format!("{key}={v}"));
    }
}

/// Floats rendered so TOML reads them back as floats.
fn float(v: Option<f64>) -> Option<String> {
    v.map(|x| format!("{x:e}"))
}

fn sources(common: Common, mut flag_sets: Vec<String>, noise_sd: Option<f64>) -> Sources {
    push(&mut flag_sets, "run.grid.rtol", float(common.rtol));
    push(&mut flag_sets, "run.grid.sample_rate", float(common.sample_rate));
    Sources {
        preset: common.preset,
        config: common.config,
        sets: common.sets,
        flag_sets,
        output_dir: common.output_dir,
        seed: common.seed,
        noise_sd,
        threads: common.threads,
    }
}

fn prepare(src: Sources, name: &str) -> Result<(RunConfig, Output), CliError> {
    let cfg = RunConfig::load(&src)?;
    if let Some(n) = cfg.threads {
        // Fails only if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = Output::create(&cfg.output_dir, name)?;
    Ok((cfg, out))
}

/// Stdout that tolerates a closed pipe.
fn say(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn finish(cfg: &RunConfig, out: Output, summary: serde_json::Value) -> Result<(), CliError> {
    let dir = cfg.output_dir.display().to_string();
    let manifest = out.finish(cfg, summary)?;
    say(&(serde_json::to_string_pretty(&manifest.summary).unwrap_or_default() + "\n"));
    eprintln!("wrote {} files to {dir} in {:.2} s", manifest.files.len() + 1, manifest.wall_clock_s);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common, exchange_time, noise_sd, no_background } => {
            let mut sets = Vec::new();
            push(&mut sets, "protocol.exchange_time", float(exchange_time));
            if no_background {
                sets.push("run.subtract_background=false".into());
            }
            let (cfg, mut out) = prepare(sources(common, sets, noise_sd), "simulate")?;
            let summary = commands::simulate(&cfg, &mut out)?;
            finish(&cfg, out, summary)
        }
        Command::ExchangeScan { common, t_values, t_start, t_stop, t_step, complex } => {
            let mut sets = Vec::new();
            push(&mut sets, "scan.t_start", float(t_start));
            push(&mut sets, "scan.t_stop", float(t_stop));
            push(&mut sets, "scan.t_step", float(t_step));
            let (cfg, mut out) = prepare(sources(common, sets, None), "exchange_scan")?;
            let summary = commands::exchange_scan(&cfg, &mut out, t_values, complex)?;
            finish(&cfg, out, summary)
        }
        Command::Spectrum { common, b_min_mg, b_max_mg, points, duration } => {
            let mut sets = Vec::new();
            push(&mut sets, "sweep.b_min_mg", float(b_min_mg));
            push(&mut sets, "sweep.b_max_mg", float(b_max_mg));
            push(&mut sets, "sweep.points", points);
            push(&mut sets, "sweep.spectrum.duration", float(duration));
            let (cfg, mut out) = prepare(sources(common, sets, None), "spectrum")?;
            let summary = commands::spectrum(&cfg, &mut out)?;
            finish(&cfg, out, summary)
        }
        Command::Fit { common, input, exchange_time, gamma_p_tilde, polarization } => {
            let mut sets = Vec::new();
            push(&mut sets, "protocol.exchange_time", float(exchange_time));
            push(&mut sets, "fit.gamma_p_tilde", float(gamma_p_tilde));
            push(&mut sets, "fit.polarization", polarization.map(|p| format!("\"{p}\"")));
            let (cfg, mut out) = prepare(sources(common, sets, None), "fit")?;
            let file = std::fs::File::open(&input).map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
            let (tau, signal) = spinex::io::read_signal(&mut std::io::BufReader::new(file))
                .map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
            let summary = commands::fit(&cfg, &mut out, &tau, &signal, &input)?;
            finish(&cfg, out, summary)
        }
        Command::Validate { common, oracle_draws, fit_draws } => {
            if oracle_draws == 0 || fit_draws == 0 {
                return Err(CliError::Config("draw counts must be positive".into()));
            }
            let (cfg, mut out) = prepare(sources(common, Vec::new(), None), "validate")?;
            let settings = validate::Settings { grid: cfg.preset.run.grid, oracle_draws, fit_draws, seed: cfg.seed };
            let results = validate::run_all(&settings);
            for r in &results {
                say(&(r.line() + "\n"));
            }
            out.emit("validate.json", |w| {
                serde_json::to_writer_pretty(&mut *w, &results).map_err(|e| spinex::Error::Io(e.to_string()))?;
                Ok(writeln!(w)?)
            })?;
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            let summary = serde_json::json!({ "passed": failed.is_empty(), "failed": failed });
            out.finish(&cfg, summary)?;
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Validation(failed.join(", ")))
            }
        }
        Command::PresetsList { show } => {
            say(&commands::presets_list(show.as_deref())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spinex: {e}");
            ExitCode::from(e.code())
        }
    }
}
