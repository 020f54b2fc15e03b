//! Subcommand bodies. Each writes its files through [`Output`] and returns a
//! JSON summary for the manifest.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};

use spinex::fitting::{eval_readout_model, PARAM_NAMES};
use spinex::io::{self, Header};
use spinex::physics::coupling_rate_j;
use spinex::pipeline::{self, fit_readout_signal, known_polarization, regime_traces, ScanOptions};
use spinex::presets::{self, Preset};
use spinex::reconstruct::reconstruct_record;
use spinex::sequence::{run_protocol, ExchangeProtocol};
use spinex::spectral::{extract_gap, mirror_branch_fraction, peak_track};

use crate::config::RunConfig;
use crate::output::Output;
use crate::CliError;

/// JSON number, or null for NaN and infinities.
fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

/// Adds seeded N(0, sd²) noise in place; sd = 0 leaves the signal untouched.
pub fn add_noise(signal: &mut [f64], sd: f64, seed: u64) {
    if sd == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sd).expect("sd checked at load");
    for v in signal {
        *v += normal.sample(&mut rng);
    }
}

fn resolve_protocol(p: &Preset) -> Result<ExchangeProtocol, CliError> {
    let spec = p.protocol().map_err(|e| CliError::Config(e.to_string()))?;
    spec.resolve(&p.species, &p.polarization).map_err(|e| CliError::Config(e.to_string()))
}

fn protocol_header(h: Header, proto: &ExchangeProtocol) -> Header {
    h.with("exchange_time_s", proto.exchange_time)
        .with("pulse_axis", format!("{:?}", proto.pulse_axis).to_lowercase())
        .with("pulse_amplitude_g", proto.pulse_amplitude)
        .with("pulse_width_s", proto.pulse_width)
        .with("b_exchange_g", proto.b_exchange)
        .with("b_readout_g", proto.b_readout)
        .with("readout_start_s", proto.readout_start())
}

pub fn simulate(cfg: &RunConfig, out: &mut Output) -> Result<Value, CliError> {
    let p = &cfg.preset;
    let mut summary = serde_json::Map::new();
    if p.protocol.is_some() {
        let proto = resolve_protocol(p)?;
        let run = run_protocol(&proto, &p.species, &p.polarization, &p.rates, &p.misalignment, &p.run)?;
        let mut signal = run.signal.clone();
        add_noise(&mut signal, cfg.noise_sd, cfg.seed);
        let header = protocol_header(out.header(cfg), &proto).with("background_subtracted", run.background.is_some());
        out.emit("simulate.tsv", |w| io::write_simulation(w, &header, &run.output, &signal))?;
        let r = run.readout_range();
        let t0 = proto.readout_start();
        let tau: Vec<f64> = run.output.time[r.clone()].iter().map(|t| t - t0).collect();
        out.emit("simulate_readout.tsv", |w| io::write_signal(w, &header, &tau, &signal[r.clone()]))?;
        let peak = signal[r].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        summary.insert(
            "protocol".into(),
            json!({
                "exchange_time_s": proto.exchange_time,
                "b_exchange_g": proto.b_exchange,
                "b_readout_g": proto.b_readout,
                "samples": run.output.len(),
                "readout_samples": tau.len(),
                "readout_peak_signal": peak,
            }),
        );
    }
    if p.trace.is_some() {
        let traces = regime_traces(p)?;
        let mut rows = Vec::new();
        for (k, tr) in traces.iter().enumerate() {
            let header = out.header(cfg).with("field_g", tr.field).with("delta_hz", tr.delta);
            out.emit(&format!("simulate_trace_{k}.tsv"), |w| io::write_trace(w, &header, tr))?;
            let j = coupling_rate_j(&p.species, &p.polarization.at(0.0))?;
            rows.push(json!({
                "file": format!("simulate_trace_{k}.tsv"),
                "field_mg": tr.field * 1e3,
                "delta_hz": tr.delta,
                "delta_over_j": tr.delta / j,
                "envelope_rate_hz": tr.envelope_rate().map_or(Value::Null, num),
                "decay_time_1pct_s": tr.decay_time(0.01).map_or(Value::Null, num),
            }));
        }
        summary.insert("traces".into(), Value::Array(rows));
    }
    if summary.is_empty() {
        return Err(CliError::Config(format!("preset `{}` has neither [protocol] nor [trace]", p.name)));
    }
    Ok(Value::Object(summary))
}

pub fn exchange_scan(cfg: &RunConfig, out: &mut Output, t_values: Option<Vec<f64>>, complex: bool) -> Result<Value, CliError> {
    let p = &cfg.preset;
    let t = match t_values {
        Some(t) => t,
        None => p
            .scan
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("preset `{}` has no [scan]; pass --t-values", p.name)))?
            .t_values()
            .map_err(|e| CliError::Config(e.to_string()))?,
    };
    if t.is_empty() || t.windows(2).any(|w| w[1] <= w[0]) || t[0] < 0.0 {
        return Err(CliError::Config("exchange times must be non-empty, non-negative and strictly increasing".into()));
    }
    let scan = pipeline::exchange_scan(p, &t, &ScanOptions { complex })?;
    let header = out
        .header(cfg)
        .with("p_a_0", scan.context.p_a_0)
        .with("j_0_hz", scan.context.j_0)
        .with("polarization_source", format!("{:?}", p.fit.polarization).to_lowercase())
        .with("complex", complex);
    out.emit("exchange_scan.tsv", |w| io::write_records(w, &header, &scan.records))?;
    let revival = scan.first_revival();
    let totals: Vec<f64> = scan.records.iter().map(|r| r.total()).filter(|v| v.is_finite()).collect();
    let spread = if totals.is_empty() {
        f64::NAN
    } else {
        let mean = totals.iter().sum::<f64>() / totals.len() as f64;
        totals.iter().map(|v| (v / mean - 1.0).abs()).fold(0.0, f64::max)
    };
    Ok(json!({
        "points": scan.records.len(),
        "failed_t": scan.failed.iter().map(|&i| scan.records[i].t).collect::<Vec<_>>(),
        "n_a_first": num(scan.records[0].n_a_exc),
        "revival": revival.map(|r| json!({"t_s": r.t, "n_a": r.n_a, "contrast": r.contrast})),
        "total_spread": num(spread),
    }))
}

pub fn spectrum(cfg: &RunConfig, out: &mut Output) -> Result<Value, CliError> {
    let p = &cfg.preset;
    if p.sweep.is_none() {
        return Err(CliError::Config(format!("preset `{}` has no [sweep]", p.name)));
    }
    let map = pipeline::sweep(p)?;
    let header = out.header(cfg).with("j_norm_hz", map.j_norm).with("omega_b_hz", map.omega_b_shift);
    out.emit("spectrum_map.tsv", |w| io::write_map_matrix(w, &header, &map))?;
    out.emit("spectrum_axes.json", |w| io::write_map_axes(w, &header, &map))?;
    let gap = extract_gap(&map);
    let branches = peak_track(&map);
    if let Ok(br) = &branches {
        out.emit("spectrum_branches.tsv", |w| io::write_branches(w, &header, br))?;
    }
    let failed: Vec<Value> = map
        .failed
        .iter()
        .zip(&map.delta_axis)
        .filter_map(|(f, d)| f.as_ref().map(|why| json!({"delta_hz": d, "reason": why})))
        .collect();
    Ok(json!({
        "columns": map.n_columns(),
        "j_norm_hz": map.j_norm,
        "gap_hz": gap.as_ref().map_or(Value::Null, |g| num(*g)),
        "gap_error": gap.as_ref().err().map(|e| e.to_string()),
        "branches_error": branches.as_ref().err().map(|e| e.to_string()),
        "mirror_branch_fraction": mirror_branch_fraction(&map).map_or(Value::Null, num),
        "failed_columns": failed,
    }))
}

pub fn fit(cfg: &RunConfig, out: &mut Output, tau: &[f64], signal: &[f64], input: &Path) -> Result<Value, CliError> {
    let p = &cfg.preset;
    let proto = resolve_protocol(p)?;
    let fit = fit_readout_signal(p, &proto, tau, signal)?;
    let model = eval_readout_model(&fit.model, tau);
    let resid: Vec<f64> = model.iter().zip(signal).map(|(m, y)| y - m).collect();
    let header = protocol_header(out.header(cfg), &proto).with("input", input.display());
    out.emit("fit.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &fit).map_err(|e| spinex::Error::Io(e.to_string()))?;
        Ok(writeln!(w)?)
    })?;
    out.emit("fit_curve.tsv", |w| io::write_columns(w, &header, &["tau", "signal", "model", "residual"], &[tau, signal, &model, &resid]))?;

    let ctx = pipeline::reconstruction_context(p)?;
    let record = reconstruct_record(&p.species, &ctx, proto.exchange_time, &fit, known_polarization(p, &proto));
    if let Ok(r) = &record {
        out.emit("fit_excitations.tsv", |w| io::write_records(w, &header, std::slice::from_ref(r)))?;
    }
    let params: serde_json::Map<String, Value> = PARAM_NAMES
        .iter()
        .zip(fit.model.to_vec())
        .zip(fit.std_errors)
        .map(|((n, v), sd)| (n.to_string(), json!({"value": num(v), "sd": num(sd)})))
        .collect();
    Ok(json!({
        "samples": tau.len(),
        "converged": fit.converged,
        "iterations": fit.iterations,
        "residual_norm": fit.residual_norm,
        "warnings": fit.warnings,
        "parameters": params,
        "n_a_exc": record.as_ref().ok().map(|r| num(r.n_a_exc)),
        "n_b_exc": record.as_ref().ok().map(|r| num(r.n_b_exc)),
        "reconstruction_error": record.as_ref().err().map(|e| e.to_string()),
    }))
}

/// Built-in preset names with descriptions, or one preset fully resolved.
pub fn presets_list(show: Option<&str>) -> Result<String, CliError> {
    match show {
        Some(name) => {
            let p = presets::load(name).map_err(|e| CliError::Config(e.to_string()))?;
            toml::to_string_pretty(&p).map_err(|e| CliError::Runtime(e.to_string()))
        }
        None => {
            let mut s = String::new();
            for name in presets::names() {
                let p = presets::load(name).map_err(|e| CliError::Config(e.to_string()))?;
                s.push_str(&format!("{name:<18} {}\n", p.description));
            }
            Ok(s)
        }
    }
}
