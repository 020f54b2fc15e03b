//! End-to-end runs on a preset: exchange scans (simulate, fit, reconstruct at
//! each exchange time), free-evolution traces and spectral sweeps.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch_sim::PULSE_SUPPORT;
use crate::error::{invalid, Result};
use crate::fitting::{auto_guess, eval_omega_a, fit_readout, FitMask, FitResult, Param, ReadoutModel};
use crate::physics::{angular, coupling_rate_j, precession_frequencies};
use crate::presets::{PolarizationSource, Preset};
use crate::reconstruct::{reconstruct_pair, reconstruct_record, ExcitationRecord, ReconstructionContext};
use crate::sequence::{run_protocol, ExchangeProtocol, PulseAxis};
use crate::spectral::{alkali_series, sweep_map, SpectralMap, SweepSpec};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanOptions {
    /// Also run the orthogonal pulse axis and reconstruct the complex ⟨a⟩.
    pub complex: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeScan {
    pub records: Vec<ExcitationRecord>,
    pub context: ReconstructionContext,
    /// Indices of records whose fit or reconstruction failed.
    pub failed: Vec<usize>,
}

impl ExchangeScan {
    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn alkali(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.n_a_exc).collect()
    }

    pub fn first_revival(&self) -> Option<Revival> {
        first_revival(&self.times(), &self.alkali())
    }
}

pub fn reconstruction_context(preset: &Preset) -> Result<ReconstructionContext> {
    let pol = &preset.polarization;
    Ok(ReconstructionContext {
        p_a_0: pol.alkali.initial(),
        j_0: coupling_rate_j(&preset.species, &pol.at(0.0))?,
        p_a_sd: 0.0,
    })
}

/// Fit seed from the known readout field, plus the parameter mask. A held
/// polarization has no chirp, so Γ̃_p is zero and p_a(t) is fixed.
pub fn readout_seed(preset: &Preset, proto: &ExchangeProtocol) -> Result<(ReadoutModel, f64, FitMask)> {
    let pol = &preset.polarization;
    let state = pol.at(proto.readout_start());
    let (omega_a, omega_b) = precession_frequencies(&preset.species, &state, proto.b_readout)?;
    let frozen = pol.alkali.is_frozen();
    let gpt = if frozen { 0.0 } else { preset.fit.gamma_p_tilde };
    let mask = if frozen { FitMask::none().fix(Param::PaT) } else { FitMask::none() };
    let seed = ReadoutModel {
        sigma_a: Complex64::new(0.0, 0.0),
        sigma_b: Complex64::new(0.0, 0.0),
        gamma_a: preset.rates.gamma_2(),
        gamma_b: preset.rates.gamma_b,
        omega_0: omega_a / eval_omega_a(1.0, state.p_a, gpt, 0.0),
        omega_b,
        p_a_t: state.p_a,
        gamma_p_tilde: gpt,
    };
    Ok((seed, gpt, mask))
}

/// Fits a readout window recorded under `proto`, seeded from the preset and
/// retried from an automatic guess when the seeded fit fails.
pub fn fit_readout_signal(preset: &Preset, proto: &ExchangeProtocol, tau: &[f64], signal: &[f64]) -> Result<FitResult> {
    let (seed, gpt, mask) = readout_seed(preset, proto)?;
    let opts = preset.fit.options();
    fit_readout(tau, signal, Some(&seed), gpt, &mask, &opts).or_else(|first| {
        let mut guess = auto_guess(tau, signal, gpt, &mask).map_err(|_| first.clone())?;
        if mask.is_fixed(Param::PaT) {
            guess.p_a_t = seed.p_a_t;
        }
        fit_readout(tau, signal, Some(&guess), gpt, &mask, &opts).map_err(|_| first)
    })
}

/// The p_a(t) used to scale the fit, or `None` to take the fit's own.
pub fn known_polarization(preset: &Preset, proto: &ExchangeProtocol) -> Option<f64> {
    match preset.fit.polarization {
        PolarizationSource::Model => Some(preset.polarization.at(proto.readout_start()).p_a),
        PolarizationSource::Fit => None,
    }
}

fn fit_run(preset: &Preset, proto: &ExchangeProtocol) -> Result<FitResult> {
    let run = run_protocol(proto, &preset.species, &preset.polarization, &preset.rates, &preset.misalignment, &preset.run)?;
    let (tau, signal) = run.readout_signal();
    fit_readout_signal(preset, proto, &tau, &signal)
}

fn scan_point(preset: &Preset, ctx: &ReconstructionContext, t: f64, opts: &ScanOptions) -> Result<ExcitationRecord> {
    let proto = preset.protocol()?.at_time(t).resolve(&preset.species, &preset.polarization)?;
    let known_p = known_polarization(preset, &proto);
    if opts.complex {
        let fx = fit_run(preset, &proto.with_axis(PulseAxis::X))?;
        let fy = fit_run(preset, &proto.with_axis(PulseAxis::Y))?;
        reconstruct_pair(&preset.species, ctx, t, &fx, &fy, known_p)
    } else {
        reconstruct_record(&preset.species, ctx, t, &fit_run(preset, &proto)?, known_p)
    }
}

fn failed_record(t: f64, reason: String) -> ExcitationRecord {
    ExcitationRecord {
        t,
        n_a_exc: f64::NAN,
        n_b_exc: f64::NAN,
        a_complex: None,
        sd_n_a: f64::NAN,
        sd_n_b: f64::NAN,
        sd_a: None,
        p_a_t: f64::NAN,
        j_t: f64::NAN,
        delta_t: f64::NAN,
        warnings: vec![format!("failed: {reason}")],
    }
}

/// One record per exchange time. A failing time yields a NaN row flagged in
/// `failed`; the scan continues.
pub fn exchange_scan(preset: &Preset, t_values: &[f64], opts: &ScanOptions) -> Result<ExchangeScan> {
    if t_values.is_empty() {
        return Err(invalid("t_values", "at least one exchange time is required"));
    }
    if t_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("t_values", "exchange times must be strictly increasing"));
    }
    preset.protocol()?;
    let ctx = reconstruction_context(preset)?;
    let records: Vec<ExcitationRecord> = t_values
        .par_iter()
        .map(|&t| scan_point(preset, &ctx, t, opts).unwrap_or_else(|e| failed_record(t, e.to_string())))
        .collect();
    let failed = records.iter().enumerate().filter(|(_, r)| !r.n_a_exc.is_finite()).map(|(i, _)| i).collect();
    Ok(ExchangeScan { records, context: ctx, failed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Revival {
    pub t: f64,
    pub n_a: f64,
    /// n_a at the revival over n_a at the first sample.
    pub contrast: f64,
}

/// Vertex of the parabola through three points; the middle point when the
/// parabola does not open downwards.
fn vertex(x: [f64; 3], y: [f64; 3]) -> (f64, f64) {
    let den = (x[0] - x[1]) * (x[0] - x[2]) * (x[1] - x[2]);
    let a = (x[2] * (y[1] - y[0]) + x[1] * (y[0] - y[2]) + x[0] * (y[2] - y[1])) / den;
    let b = (x[2] * x[2] * (y[0] - y[1]) + x[1] * x[1] * (y[2] - y[0]) + x[0] * x[0] * (y[1] - y[2])) / den;
    let c = (x[1] * x[2] * (x[1] - x[2]) * y[0] + x[2] * x[0] * (x[2] - x[0]) * y[1] + x[0] * x[1] * (x[0] - x[1]) * y[2]) / den;
    if !(a < 0.0) {
        return (x[1], y[1]);
    }
    let xv = (-b / (2.0 * a)).clamp(x[0], x[2]);
    (xv, a * xv * xv + b * xv + c)
}

/// First maximum after the first minimum of n(t), refined by a parabola
/// through the neighbouring samples. Non-finite samples are skipped.
pub fn first_revival(t: &[f64], n: &[f64]) -> Option<Revival> {
    let pts: Vec<(f64, f64)> = t.iter().zip(n).filter(|p| p.1.is_finite()).map(|(a, b)| (*a, *b)).collect();
    if pts.len() < 5 || !(pts[0].1 > 0.0) {
        return None;
    }
    let min = (1..pts.len() - 1).find(|&i| pts[i].1 < pts[i - 1].1 && pts[i].1 <= pts[i + 1].1)?;
    let max = (min + 1..pts.len() - 1).find(|&i| pts[i].1 > pts[i - 1].1 && pts[i].1 >= pts[i + 1].1)?;
    let (tv, nv) = vertex(
        [pts[max - 1].0, pts[max].0, pts[max + 1].0],
        [pts[max - 1].1, pts[max].1, pts[max + 1].1],
    );
    Some(Revival { t: tv, n_a: nv, contrast: nv / pts[0].1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub field: f64,
    /// Detuning at t = 0, Hz.
    pub delta: f64,
    /// Sample times from the end of the pulse on, s.
    pub t: Vec<f64>,
    pub a: Vec<Complex64>,
}

impl Trace {
    pub fn excitations(&self) -> Vec<f64> {
        self.a.iter().map(|v| v.norm_sqr()).collect()
    }

    /// Envelope rate of |⟨a⟩|² with the residual beat at Δ averaged out.
    pub fn envelope_rate(&self) -> Option<f64> {
        let (t, n) = running_mean(&self.t, &self.excitations(), 1.0 / self.delta.abs());
        envelope_rate(&t, &n)
    }

    pub fn decay_time(&self, fraction: f64) -> Option<f64> {
        decay_time(&self.t, &self.excitations(), fraction)
    }
}

/// Boxcar mean over `window` seconds, reported at the window centres. A
/// window shorter than two samples returns the input.
pub fn running_mean(t: &[f64], n: &[f64], window: f64) -> (Vec<f64>, Vec<f64>) {
    if t.len() < 2 || !window.is_finite() {
        return (t.to_vec(), n.to_vec());
    }
    let m = (window / (t[1] - t[0])).round() as usize;
    if m < 2 || m >= n.len() {
        return (t.to_vec(), n.to_vec());
    }
    let mut acc: f64 = n[..m].iter().sum();
    let mut out_t = Vec::with_capacity(n.len() - m + 1);
    let mut out_n = Vec::with_capacity(n.len() - m + 1);
    for i in 0..=n.len() - m {
        if i > 0 {
            acc += n[i + m - 1] - n[i - 1];
        }
        out_t.push(0.5 * (t[i] + t[i + m - 1]));
        out_n.push(acc / m as f64);
    }
    (out_t, out_n)
}

/// ⟨a(t)⟩ after the protocol pulse at each field of the preset's `[trace]`.
pub fn regime_traces(preset: &Preset) -> Result<Vec<Trace>> {
    let trace = preset.trace.as_ref().ok_or_else(|| invalid("trace", format!("preset `{}` has no [trace]", preset.name)))?;
    let proto = preset.protocol()?.resolve(&preset.species, &preset.polarization)?;
    let s0 = preset.polarization.at(0.0);
    let spec = SweepSpec {
        duration: trace.duration,
        pulse_amplitude: proto.pulse_amplitude,
        pulse_width: proto.pulse_width,
        ..SweepSpec::default()
    };
    trace
        .fields
        .par_iter()
        .map(|f| {
            let b = f.resolve(&preset.species, &s0)?;
            let (w_a, w_b) = precession_frequencies(&preset.species, &s0, b)?;
            let (t, a) = alkali_series(&preset.species, &preset.polarization, &preset.rates, &preset.misalignment, &spec, b, &preset.run)?;
            let k = t.partition_point(|&x| x < PULSE_SUPPORT * proto.pulse_width);
            Ok(Trace { field: b, delta: w_a - w_b, t: t[k..].to_vec(), a: a[k..].to_vec() })
        })
        .collect()
}

/// Linear-interpolated first time n(t)/n(0) drops below `fraction`.
fn first_below(t: &[f64], n: &[f64], fraction: f64) -> Option<f64> {
    let level = fraction * n.first()?;
    let k = n.iter().position(|&v| v < level)?;
    if k == 0 {
        return Some(t[0]);
    }
    let x = (n[k - 1] - level) / (n[k - 1] - n[k]);
    Some(t[k - 1] + x * (t[k] - t[k - 1]))
}

/// Rate of the equivalent exponential, Hz: n(t_e) = n(0)/e with
/// n ∝ exp(−2π·rate·t).
pub fn envelope_rate(t: &[f64], n: &[f64]) -> Option<f64> {
    let te = first_below(t, n, (-1.0f64).exp())? - t[0];
    (te > 0.0).then(|| 1.0 / angular(te))
}

/// Time after which n(t)/n(0) stays below `fraction`.
pub fn decay_time(t: &[f64], n: &[f64], fraction: f64) -> Option<f64> {
    let level = fraction * n.first()?;
    let k = n.iter().rposition(|&v| v >= level)?;
    if k + 1 == n.len() {
        return None;
    }
    let x = (n[k] - level) / (n[k] - n[k + 1]);
    Some(t[k] + x * (t[k + 1] - t[k]) - t[0])
}

pub fn sweep(preset: &Preset) -> Result<SpectralMap> {
    let s = preset.sweep.as_ref().ok_or_else(|| invalid("sweep", format!("preset `{}` has no [sweep]", preset.name)))?;
    sweep_map(&preset.species, &preset.polarization, &preset.rates, &preset.misalignment, &s.spectrum, &s.fields()?, &preset.run)
}
