//! Normalized spectra of the alkali amplitude, detuning sweeps, branch
//! tracking and avoided-crossing gap extraction.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch_sim::Misalignment;
use crate::error::{invalid, Error, Result};
use crate::physics::{angular, coupling_rate_j, precession_frequencies, EnsemblePolarization, RelaxationRates, SpeciesParams};
use crate::reconstruct::{assemble_complex_a, eta_factor};
use crate::sequence::{run_protocol, ExchangeProtocol, PulseAxis, RunOptions};
use crate::two_mode::{self, ModeAmplitudes, TwoModeSystem};

pub const DEFAULT_DURATION: f64 = 65e-3;
pub const DEFAULT_FREQ_STEP: f64 = 0.5;
/// Frequency half-span in units of J.
pub const DEFAULT_HALF_SPAN: f64 = 6.0;
/// Local maxima below this fraction of the column maximum are ignored.
pub const PEAK_FLOOR: f64 = 0.05;
/// Largest branch jump between adjacent columns, in units of J.
pub const JUMP_LIMIT: f64 = 0.5;

pub fn frequency_grid(center: f64, half_span: f64, step: f64) -> Vec<f64> {
    let n = (half_span / step).floor() as i64;
    (-n..=n).map(|k| center + k as f64 * step).collect()
}

fn trapezoid_weights(t: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut w = vec![0.0; n];
    for k in 0..n.saturating_sub(1) {
        let h = 0.5 * (t[k + 1] - t[k]);
        w[k] += h;
        w[k + 1] += h;
    }
    w
}

/// ∫₀^T a(t)e^{−2πift}dt / √(T·∫₀^T|a|²dt) on `freqs` (Hz), samples beyond T
/// dropped.
pub fn normalized_spectrum(t: &[f64], a: &[Complex64], duration: f64, freqs: &[f64]) -> Result<Vec<Complex64>> {
    if t.len() != a.len() {
        return Err(Error::Alignment(format!("{} times vs {} samples", t.len(), a.len())));
    }
    if !(duration > 0.0) {
        return Err(invalid("duration", "must be positive"));
    }
    let n = t.partition_point(|&x| x <= duration * (1.0 + 1e-12));
    let (t, a) = (&t[..n], &a[..n]);
    if n < 2 {
        return Err(invalid("series", "fewer than two samples in the window"));
    }
    let w = trapezoid_weights(t);
    let energy: f64 = a.iter().zip(&w).map(|(v, w)| v.norm_sqr() * w).sum();
    if !(energy > 0.0) {
        return Err(Error::ZeroEnergy);
    }
    let norm = (duration * energy).sqrt();
    Ok(freqs
        .iter()
        .map(|&f| {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..n {
                let (s, c) = (angular(f) * t[k]).sin_cos();
                acc += a[k] * Complex64::new(c, -s) * w[k];
            }
            acc / norm
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralMap {
    /// Time-averaged Δ per column, ascending, Hz.
    pub delta_axis: Vec<f64>,
    pub omega_axis: Vec<f64>,
    /// One column per Δ, |normalized ⟨a(ω)⟩| on `omega_axis`.
    pub amplitude: Vec<Vec<f64>>,
    pub j_norm: f64,
    pub omega_b_shift: f64,
    /// Axial field per column when the map comes from a sweep, G.
    pub fields: Vec<f64>,
    /// Per-column failure reason; failed columns hold zeros.
    pub failed: Vec<Option<String>>,
    /// Window length of the transform, s.
    pub duration: f64,
}

impl SpectralMap {
    pub fn n_columns(&self) -> usize {
        self.delta_axis.len()
    }

    /// Δ/J axis.
    pub fn delta_normalized(&self) -> Vec<f64> {
        self.delta_axis.iter().map(|d| d / self.j_norm).collect()
    }

    /// (ω − ω_b)/J axis.
    pub fn omega_normalized(&self) -> Vec<f64> {
        self.omega_axis.iter().map(|w| (w - self.omega_b_shift) / self.j_norm).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// Measurement window after the pulse, s.
    pub duration: f64,
    /// Gaussian pulse peak field (G) and width (s).
    pub pulse_amplitude: f64,
    pub pulse_width: f64,
    pub freq_step: f64,
    /// Half-span of the frequency axis in units of J.
    pub half_span: f64,
    /// Axis scale, Hz; the time-averaged coupling when absent.
    pub j_norm: Option<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            duration: DEFAULT_DURATION,
            pulse_amplitude: 2.4e-3,
            pulse_width: 2.8e-6,
            freq_step: DEFAULT_FREQ_STEP,
            half_span: DEFAULT_HALF_SPAN,
            j_norm: None,
        }
    }
}

struct Column {
    delta: f64,
    omega_b: f64,
    j_avg: f64,
    t: Vec<f64>,
    a: Result<Vec<Complex64>>,
}

/// Time averages of (Δ, ω_b, J) over the window on a uniform grid.
fn averages(params: &SpeciesParams, pol: &EnsemblePolarization, b: f64, duration: f64) -> Result<(f64, f64, f64)> {
    let n = 400;
    let (mut d, mut wb, mut j) = (0.0, 0.0, 0.0);
    for k in 0..n {
        let s = pol.at((k as f64 + 0.5) * duration / n as f64);
        let (w_a, w_b) = precession_frequencies(params, &s, b)?;
        d += w_a - w_b;
        wb += w_b;
        j += coupling_rate_j(params, &s)?;
    }
    Ok((d / n as f64, wb / n as f64, j / n as f64))
}

/// Assembled ⟨a(t)⟩ = √η·(S̄ₓ − i·S̄_y) from an x/y pulse pair at a constant
/// axial field `b`, t ≥ 0 up to the spec duration.
pub fn alkali_series(
    params: &SpeciesParams,
    pol: &EnsemblePolarization,
    rates: &RelaxationRates,
    mis: &Misalignment,
    spec: &SweepSpec,
    b: f64,
    opts: &RunOptions,
) -> Result<(Vec<f64>, Vec<Complex64>)> {
    let proto = ExchangeProtocol {
        exchange_time: spec.duration,
        pulse_axis: PulseAxis::X,
        pulse_amplitude: spec.pulse_amplitude,
        pulse_width: spec.pulse_width,
        b_exchange: b,
        b_readout: b,
        ramp_duration: 0.0,
        readout_duration: 0.0,
    };
    let opts = RunOptions { subtract_background: false, ..*opts };
    let rx = run_protocol(&proto, params, pol, rates, mis, &opts)?;
    let ry = run_protocol(&proto.with_axis(PulseAxis::Y), params, pol, rates, mis, &opts)?;
    if rx.output.time != ry.output.time {
        return Err(Error::Alignment("x and y runs on different grids".into()));
    }
    let p0 = pol.alkali.initial();
    let first = rx.output.time.partition_point(|&t| t < 0.0);
    let eta = rx.output.p_a[first..].iter().map(|&p| eta_factor(params, p0, p.min(p0))).collect::<Result<Vec<_>>>()?;
    let a = assemble_complex_a(&rx.signal[first..], &ry.signal[first..], &eta)?;
    Ok((rx.output.time[first..].to_vec(), a))
}

/// Detailed-model spectral map over axial fields `fields` (G). Each column is
/// an x/y pair of pulsed runs without background subtraction.
pub fn sweep_map(
    params: &SpeciesParams,
    pol: &EnsemblePolarization,
    rates: &RelaxationRates,
    mis: &Misalignment,
    spec: &SweepSpec,
    fields: &[f64],
    opts: &RunOptions,
) -> Result<SpectralMap> {
    if fields.len() < 2 {
        return Err(invalid("fields", "at least two sweep points are required"));
    }
    let mut cols: Vec<(f64, Column)> = fields
        .par_iter()
        .map(|&b| {
            let (delta, omega_b, j_avg) = averages(params, pol, b, spec.duration)?;
            let series = alkali_series(params, pol, rates, mis, spec, b, opts);
            let (t, a) = match series {
                Ok((t, a)) => (t, Ok(a)),
                Err(e) => (Vec::new(), Err(e)),
            };
            Ok((b, Column { delta, omega_b, j_avg, t, a }))
        })
        .collect::<Result<Vec<_>>>()?;
    cols.sort_by(|x, y| x.1.delta.total_cmp(&y.1.delta));

    let n = cols.len() as f64;
    let j_norm = spec.j_norm.unwrap_or_else(|| cols.iter().map(|c| c.1.j_avg).sum::<f64>() / n);
    let omega_b_shift = cols.iter().map(|c| c.1.omega_b).sum::<f64>() / n;
    let omega_axis = frequency_grid(omega_b_shift, spec.half_span * j_norm, spec.freq_step);
    let spectra: Vec<Result<Vec<f64>>> = cols
        .par_iter()
        .map(|(_, c)| match &c.a {
            Ok(a) => normalized_spectrum(&c.t, a, spec.duration, &omega_axis).map(|s| s.iter().map(|v| v.norm()).collect()),
            Err(e) => Err(e.clone()),
        })
        .collect();
    let mut amplitude = Vec::with_capacity(cols.len());
    let mut failed = Vec::with_capacity(cols.len());
    for s in spectra {
        match s {
            Ok(col) => {
                amplitude.push(col);
                failed.push(None);
            }
            Err(e) => {
                amplitude.push(vec![0.0; omega_axis.len()]);
                failed.push(Some(e.to_string()));
            }
        }
    }
    Ok(SpectralMap {
        delta_axis: cols.iter().map(|c| c.1.delta).collect(),
        omega_axis,
        amplitude,
        j_norm,
        omega_b_shift,
        duration: spec.duration,
        fields: cols.iter().map(|c| c.0).collect(),
        failed,
    })
}

/// Map from the two-mode model, a(0) = 1, b(0) = 0, sampled at `sample_rate`.
/// The frequency axis spans ω_b ± `half_span_hz`.
#[allow(clippy::too_many_arguments)]
pub fn synthetic_map(
    j: f64,
    gamma: f64,
    omega_b: f64,
    deltas: &[f64],
    duration: f64,
    sample_rate: f64,
    freq_step: f64,
    half_span_hz: f64,
) -> Result<SpectralMap> {
    if deltas.len() < 2 {
        return Err(invalid("deltas", "at least two detunings are required"));
    }
    let n = (duration * sample_rate).round() as usize;
    let t: Vec<f64> = (0..=n).map(|k| k as f64 / sample_rate).collect();
    let omega_axis = frequency_grid(omega_b, half_span_hz, freq_step);
    let mut sorted = deltas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let amplitude = sorted
        .par_iter()
        .map(|&d| {
            let sys = TwoModeSystem::new(omega_b + d, omega_b, gamma, j)?;
            let init = ModeAmplitudes::new(Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0));
            let a: Vec<Complex64> = t
                .iter()
                .map(|&x| two_mode::propagate(&sys, &init, x).map(|m| m.a))
                .collect::<Result<_>>()?;
            Ok(normalized_spectrum(&t, &a, duration, &omega_axis)?.iter().map(|v| v.norm()).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(SpectralMap {
        failed: vec![None; sorted.len()],
        fields: Vec::new(),
        delta_axis: sorted,
        omega_axis,
        amplitude,
        j_norm: j,
        omega_b_shift: omega_b,
        duration,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub omega: f64,
    pub amplitude: f64,
    /// Distance to half maximum below and above the peak, Hz; `None` when a
    /// higher maximum or the axis edge comes first.
    pub half_width_below: Option<f64>,
    pub half_width_above: Option<f64>,
}

fn half_width(omega: &[f64], col: &[f64], k: usize, dir: isize) -> Option<f64> {
    let half = 0.5 * col[k];
    let mut i = k as isize;
    loop {
        let next = i + dir;
        if next < 0 || next as usize >= col.len() {
            return None;
        }
        let (v0, v1) = (col[i as usize], col[next as usize]);
        if v1 > col[k] {
            return None;
        }
        if v1 <= half {
            let x = (v0 - half) / (v0 - v1);
            let w = omega[i as usize] + x * (omega[next as usize] - omega[i as usize]);
            return Some((w - omega[k]).abs());
        }
        i = next;
    }
}

/// Peaks are maxima over ±this many 1/T, which rejects truncation sidelobes.
pub const PEAK_WINDOW: f64 = 2.0;

/// Maxima over a ±`window` (Hz) neighbourhood above [`PEAK_FLOOR`] of the
/// column maximum, with parabolic refinement.
pub fn column_peaks(omega: &[f64], col: &[f64], window: f64) -> Vec<Peak> {
    let top = col.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 || omega.len() < 3 {
        return Vec::new();
    }
    let step = omega[1] - omega[0];
    let half = ((window / step).round() as usize).max(1);
    let mut out = Vec::new();
    for k in 1..col.len() - 1 {
        if col[k] < PEAK_FLOOR * top || !(col[k] > col[k - 1] && col[k] >= col[k + 1]) {
            continue;
        }
        let lo = k.saturating_sub(half);
        let hi = (k + half).min(col.len() - 1);
        if col[lo..=hi].iter().any(|&v| v > col[k]) {
            continue;
        }
        let (a, b, c) = (col[k - 1], col[k], col[k + 1]);
        let d = a - 2.0 * b + c;
        let shift = if d != 0.0 { (0.5 * (a - c) / d).clamp(-0.5, 0.5) } else { 0.0 };
        out.push(Peak {
            omega: omega[k] + shift * step,
            amplitude: b - 0.25 * (a - c) * shift,
            half_width_below: half_width(omega, col, k, -1),
            half_width_above: half_width(omega, col, k, 1),
        });
    }
    out
}

impl SpectralMap {
    pub fn peaks(&self, column: usize) -> Vec<Peak> {
        if self.failed[column].is_some() {
            return Vec::new();
        }
        column_peaks(&self.omega_axis, &self.amplitude[column], PEAK_WINDOW / self.duration)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branches {
    pub delta: Vec<f64>,
    pub lower: Vec<Option<Peak>>,
    pub upper: Vec<Option<Peak>>,
}

/// Links the two strongest peaks of a seed column across Δ by nearest
/// neighbour, with a jump limit of [`JUMP_LIMIT`]·J per column step.
pub fn peak_track(map: &SpectralMap) -> Result<Branches> {
    let n = map.n_columns();
    let peaks: Vec<Vec<Peak>> = (0..n)
        .map(|c| map.peaks(c))
        .collect();
    let seed = (0..n)
        .find(|&c| peaks[c].len() >= 2)
        .ok_or_else(|| Error::BranchTracking("no column has two resolvable peaks".into()))?;
    let mut strongest = peaks[seed].clone();
    strongest.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude));
    let (mut lo, mut hi) = (strongest[0], strongest[1]);
    if lo.omega > hi.omega {
        std::mem::swap(&mut lo, &mut hi);
    }
    let mut lower = vec![None; n];
    let mut upper = vec![None; n];
    lower[seed] = Some(lo);
    upper[seed] = Some(hi);
    let limit = JUMP_LIMIT * map.j_norm;
    let mut link = |order: &mut dyn Iterator<Item = usize>| {
        let (mut last_lo, mut last_hi) = ((lo.omega, 1usize), (hi.omega, 1usize));
        for c in order {
            let cand = &peaks[c];
            let pick = |target: (f64, usize), taken: Option<usize>| {
                cand.iter()
                    .enumerate()
                    .filter(|(i, p)| Some(*i) != taken && (p.omega - target.0).abs() <= limit * target.1 as f64)
                    .min_by(|a, b| (a.1.omega - target.0).abs().total_cmp(&(b.1.omega - target.0).abs()))
                    .map(|(i, _)| i)
            };
            let mut i_lo = pick(last_lo, None);
            let mut i_hi = pick(last_hi, None);
            if i_lo.is_some() && i_lo == i_hi {
                let k = i_lo.unwrap();
                if (cand[k].omega - last_lo.0).abs() <= (cand[k].omega - last_hi.0).abs() {
                    i_hi = pick(last_hi, Some(k));
                } else {
                    i_lo = pick(last_lo, Some(k));
                }
            }
            match i_lo {
                Some(i) => {
                    lower[c] = Some(cand[i]);
                    last_lo = (cand[i].omega, 1);
                }
                None => last_lo.1 += 1,
            }
            match i_hi {
                Some(i) => {
                    upper[c] = Some(cand[i]);
                    last_hi = (cand[i].omega, 1);
                }
                None => last_hi.1 += 1,
            }
        }
    };
    link(&mut (seed + 1..n));
    link(&mut (0..seed).rev());
    Ok(Branches { delta: map.delta_axis.clone(), lower, upper })
}

/// Columns with |Δ| below this many J count as near the crossing.
pub const CROSSING_BAND: f64 = 0.25;

/// Minimum separation of the tracked branches; requires both branches in at
/// least one column near Δ = 0.
pub fn extract_gap(map: &SpectralMap) -> Result<f64> {
    let d = &map.delta_axis;
    if !(d[0] < 0.0 && *d.last().unwrap() > 0.0) {
        return Err(invalid("map", "detuning axis does not span Δ = 0"));
    }
    let br = peak_track(map)?;
    let mut gap = f64::INFINITY;
    let mut near_zero = false;
    for c in 0..map.n_columns() {
        if let (Some(l), Some(u)) = (br.lower[c], br.upper[c]) {
            let sep = u.omega - l.omega;
            // a doublet is resolved when each line's outer full width is below the splitting
            let resolved = l.half_width_below.is_some_and(|w| 2.0 * w < sep) && u.half_width_above.is_some_and(|w| 2.0 * w < sep);
            if sep > 0.0 {
                gap = gap.min(sep);
                near_zero |= resolved && d[c].abs() <= CROSSING_BAND * map.j_norm;
            }
        }
    }
    if !near_zero {
        return Err(Error::BranchTracking("fewer than two resolvable peaks near Δ = 0".into()));
    }
    Ok(gap)
}

/// Relative amplitude of the branch that asymptotes to ω_b in one column:
/// the column maximum within ±[`CROSSING_BAND`]·J of the lossless two-mode
/// position ω_b + Δ/2 − sgn(Δ)·√(J² + Δ²/4), over the column maximum.
pub fn horizontal_branch_ratio(map: &SpectralMap, column: usize) -> Option<f64> {
    if map.failed[column].is_some() {
        return None;
    }
    let (j, d) = (map.j_norm, map.delta_axis[column]);
    let target = map.omega_b_shift + d / 2.0 - d.signum() * (j * j + d * d / 4.0).sqrt();
    let col = &map.amplitude[column];
    let top = col.iter().copied().fold(0.0, f64::max);
    let near = map
        .omega_axis
        .iter()
        .zip(col)
        .filter(|(w, _)| (**w - target).abs() <= CROSSING_BAND * j)
        .map(|(_, v)| *v)
        .fold(f64::NAN, f64::max);
    (top > 0.0 && near.is_finite()).then(|| near / top)
}

/// Peak search tolerance around the mirrored line, units of J.
pub const MIRROR_TOLERANCE: f64 = 0.5;

/// Fraction of eligible columns showing a peak at ω = −ω_a, the
/// counter-rotating image of the alkali line that appears when the pumping
/// axis is tilted. Columns with |Δ| ≤ J, or whose image falls within J of
/// either direct line or off the axis, are not eligible. `None` when no
/// column is eligible.
pub fn mirror_branch_fraction(map: &SpectralMap) -> Option<f64> {
    let j = map.j_norm;
    let (w_lo, w_hi) = (map.omega_axis[0], *map.omega_axis.last()?);
    let (mut eligible, mut hits) = (0usize, 0usize);
    for c in 0..map.n_columns() {
        let delta = map.delta_axis[c];
        let omega_a = map.omega_b_shift + delta;
        let image = -omega_a;
        let clear = (image - map.omega_b_shift).abs() > j && (image - omega_a).abs() > j;
        if map.failed[c].is_some() || delta.abs() <= j || !clear || image < w_lo || image > w_hi {
            continue;
        }
        eligible += 1;
        if map.peaks(c).iter().any(|p| (p.omega - image).abs() <= MIRROR_TOLERANCE * j) {
            hits += 1;
        }
    }
    (eligible > 0).then(|| hits as f64 / eligible as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(duration: f64, rate: f64) -> Vec<f64> {
        let n = (duration * rate).round() as usize;
        (0..=n).map(|k| k as f64 / rate).collect()
    }

    #[test]
    fn damped_exponential_peak_height() {
        let (f0, g, big_t) = (50.0, 5.0, 65e-3);
        let t = uniform(big_t, 20e3);
        let a: Vec<Complex64> = t.iter().map(|&x| Complex64::new(-angular(g) * x, angular(f0) * x).exp()).collect();
        let freqs = frequency_grid(50.0, 20.0, 0.5);
        let s = normalized_spectrum(&t, &a, big_t, &freqs).unwrap();
        let (k, peak) = s.iter().enumerate().map(|(k, v)| (k, v.norm())).max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert!((freqs[k] - 50.0).abs() < 1e-9);
        let x = angular(g) * big_t;
        let closed = (-(-x).exp_m1() / angular(g)) / (big_t * -(-2.0 * x).exp_m1() / (2.0 * angular(g))).sqrt();
        assert!((peak / closed - 1.0).abs() < 0.02, "{peak} vs {closed}");
        // untruncated form (1/γ)/√(T/(2γ)) in angular units
        let infinite = (1.0 / angular(g)) / (big_t / (2.0 * angular(g))).sqrt();
        assert!(peak < infinite);
    }

    #[test]
    fn constant_series_is_sinc() {
        let t = uniform(0.1, 2e3);
        let a = vec![Complex64::new(1.0, 0.0); t.len()];
        let freqs = frequency_grid(0.0, 30.0, 0.5);
        let s: Vec<f64> = normalized_spectrum(&t, &a, 0.1, &freqs).unwrap().iter().map(|v| v.norm()).collect();
        let k0 = freqs.len() / 2;
        assert!((s[k0] - 1.0).abs() < 1e-12);
        // first zero at 1/T
        let k10 = freqs.iter().position(|f| (f - 10.0).abs() < 1e-9).unwrap();
        assert!(s[k10] < 1e-3);
    }

    #[test]
    fn zero_padding_invariance() {
        let t = uniform(40e-3, 20e3);
        let a: Vec<Complex64> = t.iter().map(|&x| Complex64::new(-angular(9.0) * x, angular(80.0) * x).exp()).collect();
        let freqs = frequency_grid(80.0, 60.0, 0.5);
        let s1 = normalized_spectrum(&t, &a, 65e-3, &freqs).unwrap();
        let mut tp = t.clone();
        let mut ap = a.clone();
        for k in 1..=500 {
            tp.push(t.last().unwrap() + k as f64 / 20e3);
            ap.push(Complex64::new(0.0, 0.0));
        }
        let s2 = normalized_spectrum(&tp, &ap, 65e-3, &freqs).unwrap();
        let top = s1.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (x, y) in s1.iter().zip(&s2) {
            assert!((x.norm() - y.norm()).abs() < 1e-3 * top);
        }
    }

    #[test]
    fn zero_energy_rejected() {
        let t = uniform(0.01, 1e3);
        let a = vec![Complex64::new(0.0, 0.0); t.len()];
        assert_eq!(normalized_spectrum(&t, &a, 0.01, &[0.0]), Err(Error::ZeroEnergy));
    }

    fn deltas(j: f64, step: f64, half: f64) -> Vec<f64> {
        let n = (half / step).round() as i64;
        (-n..=n).map(|k| k as f64 * step * j).collect()
    }

    #[test]
    fn synthetic_gap_is_two_j() {
        let j = 47.0;
        let map = synthetic_map(j, 0.0, 40.0, &deltas(j, 0.1, 5.0), 65e-3, 4e3, 0.5, 6.0 * j).unwrap();
        let gap = extract_gap(&map).unwrap();
        assert!((gap - 2.0 * j).abs() < 2.0, "gap {gap}");
    }

    #[test]
    fn synthetic_branches_follow_eigenvalues() {
        let j = 47.0;
        let ds = deltas(j, 0.25, 5.0);
        let map = synthetic_map(j, 1.0, 40.0, &ds, 65e-3, 4e3, 0.5, 6.0 * j).unwrap();
        let br = peak_track(&map).unwrap();
        // half the transform resolution 1/T
        let tol = 0.5 / map.duration;
        for (c, &d) in map.delta_axis.iter().enumerate() {
            let sys = TwoModeSystem::new(40.0 + d, 40.0, 1.0, j).unwrap();
            let (l1, l2) = two_mode::eigenvalues(&sys);
            let (hi, lo) = (l1.re.max(l2.re), l1.re.min(l2.re));
            if let Some(p) = br.upper[c] {
                assert!((p.omega - hi).abs() < tol, "Δ={d}: {} vs {hi}", p.omega);
            }
            if let Some(p) = br.lower[c] {
                assert!((p.omega - lo).abs() < tol, "Δ={d}: {} vs {lo}", p.omega);
            }
            if d.abs() >= 5.0 * j - 1e-9 {
                let sep = br.upper[c].unwrap().omega - br.lower[c].unwrap().omega;
                assert!((sep / d.abs() - 1.0).abs() < 0.1);
            }
        }
    }

    #[test]
    fn lossless_map_symmetry() {
        // (Δ, ω − ω̄) → (−Δ, −(ω − ω̄)) with ω̄ = ω_b + Δ/2
        let (j, wb) = (30.0, 40.0);
        let map = synthetic_map(j, 0.0, wb, &deltas(j, 0.5, 3.0), 65e-3, 4e3, 0.5, 6.0 * j).unwrap();
        let (n, m) = (map.n_columns(), map.omega_axis.len());
        for c in 0..n {
            let d = map.delta_axis[c];
            for k in (0..m).step_by(7) {
                let w = map.omega_axis[k];
                let w2 = (wb - d / 2.0) - (w - (wb + d / 2.0));
                let kk = ((w2 - map.omega_axis[0]) / 0.5).round();
                if kk < 0.0 || kk as usize >= m || (map.omega_axis[kk as usize] - w2).abs() > 1e-6 {
                    continue;
                }
                let (a, b) = (map.amplitude[c][k], map.amplitude[n - 1 - c][kk as usize]);
                assert!((a - b).abs() < 1e-6 * (1.0 + a), "Δ={d} ω={w}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn decoupled_lines_cross() {
        let ds = deltas(47.0, 0.2, 3.0);
        let map = synthetic_map(0.0, 2.0, 40.0, &ds, 65e-3, 4e3, 0.5, 200.0).unwrap();
        for (c, d) in map.delta_axis.iter().enumerate() {
            let p = map.peaks(c);
            let top = p.iter().max_by(|a, b| a.amplitude.total_cmp(&b.amplitude)).unwrap();
            assert!((top.omega - (40.0 + d)).abs() < 0.5, "Δ={d}: {}", top.omega);
        }
    }

    #[test]
    fn overdamped_map_is_unresolvable() {
        let j = 47.0;
        let map = synthetic_map(j, 3.2 * j, 40.0, &deltas(j, 0.1, 3.0), 65e-3, 4e3, 0.5, 6.0 * j).unwrap();
        assert!(matches!(extract_gap(&map), Err(Error::BranchTracking(_))));
    }

    #[test]
    fn gap_lower_bound() {
        for (j, gamma) in [(47.0, 5.0), (30.0, 10.0), (60.0, 20.0)] {
            let map = synthetic_map(j, gamma, 40.0, &deltas(j, 0.1, 4.0), 65e-3, 4e3, 0.5, 6.0 * j).unwrap();
            let gap = extract_gap(&map).unwrap();
            assert!(gap >= 2.0 * j * 0.95, "J={j} γ={gamma}: gap {gap}");
        }
    }

    #[test]
    fn mirror_branch_only_when_injected() {
        let (j, wb) = (40.0, 40.0);
        let mut map = synthetic_map(j, 2.0, wb, &deltas(j, 0.25, 5.0), 65e-3, 4e3, 0.5, 6.0 * j).unwrap();
        assert_eq!(mirror_branch_fraction(&map), Some(0.0));
        for (c, col) in map.amplitude.iter_mut().enumerate() {
            let image = -(wb + map.delta_axis[c]);
            let top = col.iter().copied().fold(0.0, f64::max);
            for (v, w) in col.iter_mut().zip(&map.omega_axis) {
                *v += 0.2 * top * (-((w - image) / 4.0).powi(2)).exp();
            }
        }
        let f = mirror_branch_fraction(&map).unwrap();
        assert!(f > 0.9, "{f}");
    }

    #[test]
    fn horizontal_branch_of_decoupled_map() {
        // J → 0 with b(0) = 0: only truncation sidelobes reach ω_b
        let map = synthetic_map(1e-3, 2.0, 40.0, &[-300.0, -150.0, 150.0, 300.0], 65e-3, 4e3, 0.5, 400.0).unwrap();
        for c in 0..map.n_columns() {
            assert!(horizontal_branch_ratio(&map, c).unwrap() < 0.1);
        }
        let map = synthetic_map(40.0, 1.0, 40.0, &[-20.0, 20.0], 65e-3, 4e3, 0.5, 240.0).unwrap();
        for c in 0..map.n_columns() {
            assert!(horizontal_branch_ratio(&map, c).unwrap() > 0.5);
        }
    }
}
