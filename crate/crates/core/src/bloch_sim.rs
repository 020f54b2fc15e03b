//! Linearized Bloch equations for the transverse collective spins S− (alkali)
//! and K− (noble gas) with time-dependent polarization and field schedules.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ode::{self, OdeSystem, Stats, Tolerances};
use crate::physics::{
    angular, precession_frequencies, q_of, unidirectional_rates, EnsemblePolarization, PolarizationState,
    RelaxationRates, SpeciesParams,
};
use crate::two_mode::{ModeAmplitudes, TwoModeSystem};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
/// Gaussian pulses are treated as zero beyond this many widths from center.
pub const PULSE_SUPPORT: f64 = 6.0;
/// Step cap inside a pulse, as a fraction of its width.
pub const PULSE_STEP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochState {
    pub s_minus: Complex64,
    pub k_minus: Complex64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Waveform {
    Zero,
    Constant { value: Complex64 },
    /// amplitude·exp(−(t − center)²/width²)
    Gaussian { amplitude: Complex64, center: f64, width: f64 },
}

impl Waveform {
    pub fn eval(&self, t: f64) -> Complex64 {
        match *self {
            Waveform::Zero => Complex64::new(0.0, 0.0),
            Waveform::Constant { value } => value,
            Waveform::Gaussian { amplitude, center, width } => {
                let x = (t - center) / width;
                if x.abs() > PULSE_SUPPORT {
                    Complex64::new(0.0, 0.0)
                } else {
                    amplitude * (-x * x).exp()
                }
            }
        }
    }

    fn support(&self) -> Option<(f64, f64)> {
        match *self {
            Waveform::Gaussian { amplitude, center, width } if amplitude.norm() > 0.0 => {
                Some((center - PULSE_SUPPORT * width, center + PULSE_SUPPORT * width))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration: f64,
    pub bz_start: f64,
    pub bz_end: f64,
    pub transverse: Waveform,
}

impl Segment {
    pub fn hold(duration: f64, bz: f64, transverse: Waveform) -> Self {
        Segment { duration, bz_start: bz, bz_end: bz, transverse }
    }
}

/// Contiguous field segments starting at `start`; waveforms take absolute time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSchedule {
    pub start: f64,
    pub segments: Vec<Segment>,
}

impl FieldSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(invalid("segments", "schedule is empty"));
        }
        if !self.start.is_finite() {
            return Err(invalid("start", "must be finite"));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.duration > 0.0 && s.duration.is_finite()) {
                return Err(invalid(&format!("segments[{i}].duration"), format!("must be positive, got {}", s.duration)));
            }
            if !(s.bz_start.is_finite() && s.bz_end.is_finite()) {
                return Err(invalid(&format!("segments[{i}].bz"), "must be finite"));
            }
            if let Waveform::Gaussian { width, .. } = s.transverse {
                if !(width > 0.0) {
                    return Err(invalid(&format!("segments[{i}].transverse.width"), "must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Segment edges, including start and end.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut out = vec![self.start];
        let mut t = self.start;
        for s in &self.segments {
            t += s.duration;
            out.push(t);
        }
        out
    }

    pub fn end(&self) -> f64 {
        self.start + self.segments.iter().map(|s| s.duration).sum::<f64>()
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let mut t0 = self.start;
        for (i, s) in self.segments.iter().enumerate() {
            if t < t0 + s.duration || i + 1 == self.segments.len() {
                return (i, t0);
            }
            t0 += s.duration;
        }
        unreachable!("schedule validated non-empty")
    }

    pub fn bz(&self, t: f64) -> f64 {
        let (i, t0) = self.locate(t);
        let s = &self.segments[i];
        let x = ((t - t0) / s.duration).clamp(0.0, 1.0);
        s.bz_start + (s.bz_end - s.bz_start) * x
    }

    pub fn b_minus(&self, t: f64) -> Complex64 {
        let (i, _) = self.locate(t);
        self.segments[i].transverse.eval(t)
    }

    fn max_step_in(&self, seg: usize, t: f64) -> f64 {
        match self.segments[seg].transverse.support() {
            Some((lo, hi)) => {
                if let Waveform::Gaussian { width, .. } = self.segments[seg].transverse {
                    if t >= lo && t < hi {
                        width * PULSE_STEP_FRACTION
                    } else if t < lo {
                        (lo - t).max(width * PULSE_STEP_FRACTION)
                    } else {
                        f64::INFINITY
                    }
                } else {
                    f64::INFINITY
                }
            }
            None => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Misalignment {
    pub eta_x: f64,
    pub eta_y: f64,
    pub beta_x: f64,
    pub beta_y: f64,
    pub eps_par: f64,
    pub eps_perp: f64,
    pub b_res_minus: Complex64,
}

/// Small-angle validity limit for the tilt angles (rad).
pub const MAX_TILT: f64 = 0.1;

impl Misalignment {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta_x", self.eta_x), ("eta_y", self.eta_y), ("beta_x", self.beta_x), ("beta_y", self.beta_y)] {
            if !(v.abs() < MAX_TILT) {
                return Err(invalid(name, format!("|{v}| rad is outside the small-angle range")));
            }
        }
        for (name, v) in [("eps_par", self.eps_par), ("eps_perp", self.eps_perp)] {
            if !(v.abs() < MAX_TILT) {
                return Err(invalid(name, format!("|{v}| is outside the small-misalignment range")));
            }
        }
        if !(self.b_res_minus.re.is_finite() && self.b_res_minus.im.is_finite()) {
            return Err(invalid("b_res_minus", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Output sampling rate in Hz; samples sit at integer multiples of 1/rate.
    pub sample_rate: f64,
    pub rtol: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { sample_rate: 20e3, rtol: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub time: Vec<f64>,
    pub s_minus: Vec<Complex64>,
    pub k_minus: Vec<Complex64>,
    pub p_a: Vec<f64>,
    pub q: Vec<f64>,
    /// Probe signal normalized by N_a·p_a(0)/2.
    pub signal: Vec<f64>,
    pub p_b: f64,
}

/// S−(0) and K−(0) for ensembles polarized along −ẑ with tilted pump and SEOP axes.
pub fn initial_state(params: &SpeciesParams, pol: &PolarizationState, mis: &Misalignment) -> Result<BlochState> {
    mis.validate()?;
    Ok(BlochState {
        s_minus: params.atoms_a * pol.p_a * Complex64::new(mis.eta_x, -mis.eta_y) / 2.0,
        k_minus: params.atoms_b * pol.p_b * Complex64::new(mis.beta_x, -mis.beta_y) / 2.0,
        t: 0.0,
    })
}

/// Raw probe projection Re[(1 + iε∥)S−] + ε⊥·N_a·p_a/2.
pub fn probe_projection(s_minus: Complex64, p_a: f64, params: &SpeciesParams, mis: &Misalignment) -> f64 {
    (Complex64::new(1.0, mis.eps_par) * s_minus).re + mis.eps_perp * params.atoms_a * p_a / 2.0
}

/// Normalized probe signal S̄ₓ for a series.
pub fn probe_signal(s_minus: &[Complex64], p_a: &[f64], p_a0: f64, params: &SpeciesParams, mis: &Misalignment) -> Result<Vec<f64>> {
    if s_minus.len() != p_a.len() {
        return Err(Error::Alignment(format!("{} spin samples vs {} polarization samples", s_minus.len(), p_a.len())));
    }
    if !(p_a0 > 0.0) {
        return Err(Error::Singularity("signal normalization (p_a(0) = 0)"));
    }
    let norm = params.atoms_a * p_a0 / 2.0;
    Ok(s_minus.iter().zip(p_a).map(|(&s, &p)| probe_projection(s, p, params, mis) / norm).collect())
}

/// Eq.-(1)-frame mode amplitudes from the lab-frame Holstein-Primakoff amplitudes
/// a = √(q/(N_a p_a))·S−, b = K−/√(N_b p_b).
pub fn to_two_mode_frame(a_lab: Complex64, b_lab: Complex64) -> ModeAmplitudes {
    ModeAmplitudes { a: a_lab.conj(), b: -b_lab.conj() }
}

pub fn from_two_mode_frame(m: &ModeAmplitudes) -> (Complex64, Complex64) {
    (m.a.conj(), -m.b.conj())
}

impl SimOutput {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    /// Lab-frame Holstein-Primakoff amplitude of the alkali.
    pub fn alkali_mode(&self, params: &SpeciesParams) -> Vec<Complex64> {
        self.s_minus
            .iter()
            .zip(self.q.iter().zip(&self.p_a))
            .map(|(&s, (&q, &p))| if p > 0.0 { s * (q / (params.atoms_a * p)).sqrt() } else { Complex64::new(0.0, 0.0) })
            .collect()
    }

    pub fn noble_mode(&self, params: &SpeciesParams) -> Vec<Complex64> {
        let c = if self.p_b > 0.0 { 1.0 / (params.atoms_b * self.p_b).sqrt() } else { 0.0 };
        self.k_minus.iter().map(|&k| k * c).collect()
    }

    /// Mode amplitudes in the two-mode convention at each sample.
    pub fn modes(&self, params: &SpeciesParams) -> Vec<ModeAmplitudes> {
        self.alkali_mode(params)
            .into_iter()
            .zip(self.noble_mode(params))
            .map(|(a, b)| to_two_mode_frame(a, b))
            .collect()
    }

    /// Index of the sample at `t` (nearest).
    pub fn index_of(&self, t: f64) -> usize {
        match self.time.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => i,
            Err(i) => {
                if i == 0 {
                    0
                } else if i >= self.time.len() {
                    self.time.len() - 1
                } else if (self.time[i] - t).abs() < (t - self.time[i - 1]).abs() {
                    i
                } else {
                    i - 1
                }
            }
        }
    }
}

/// Two-mode system equivalent to the detailed model at time t and field b,
/// valid when the polarization changes slowly.
pub fn equivalent_two_mode(
    params: &SpeciesParams,
    pol: &EnsemblePolarization,
    rates: &RelaxationRates,
    b: f64,
    t: f64,
) -> Result<TwoModeSystem> {
    let state = pol.at(t);
    let (omega_a, omega_b) = precession_frequencies(params, &state, b)?;
    let j = crate::physics::coupling_rate_j(params, &state)?;
    let gamma = (rates.gamma_2() - pol.alkali.log_decay_rate(t) / angular(1.0) / 2.0).max(0.0);
    TwoModeSystem::new(omega_a, omega_b, gamma, j)
}

struct Rhs<'a> {
    params: &'a SpeciesParams,
    pol: &'a EnsemblePolarization,
    rates: &'a RelaxationRates,
    schedule: &'a FieldSchedule,
    mis: &'a Misalignment,
    segment: usize,
    t_seg0: f64,
    c_s: f64,
    c_k: f64,
}

impl OdeSystem<4> for Rhs<'_> {
    fn rhs(&self, t: f64, y: &[f64; 4], dy: &mut [f64; 4]) {
        let u = Complex64::new(y[0], y[1]);
        let v = Complex64::new(y[2], y[3]);
        let state = self.pol.at(t);
        let q = q_of(state.p_a);
        let seg = &self.schedule.segments[self.segment];
        let x = ((t - self.t_seg0) / seg.duration).clamp(0.0, 1.0);
        let bz = seg.bz_start + (seg.bz_end - seg.bz_start) * x;
        let b_minus = seg.transverse.eval(t) + self.mis.b_res_minus;
        let (j_a, j_b) = unidirectional_rates(self.params, &state).expect("polarization validated");
        let (w_a, w_b) = precession_frequencies(self.params, &state, bz).expect("polarization validated");
        let p = self.params;

        let du = (-I * w_a - self.rates.gamma_2()) * u - I * (p.n_a / (q * p.n_b)) * j_a * (self.c_s / self.c_k) * v
            + I * self.c_s * (p.g_e / q) * (p.atoms_a * state.p_a / 2.0) * b_minus;
        let dv = -I * (q * p.n_b / p.n_a) * j_b * (self.c_k / self.c_s) * u + (-I * w_b - self.rates.gamma_b) * v
            + I * self.c_k * p.g_b * (p.atoms_b * state.p_b / 2.0) * b_minus;
        let tau = angular(1.0);
        dy[0] = tau * du.re;
        dy[1] = tau * du.im;
        dy[2] = tau * dv.re;
        dy[3] = tau * dv.im;
    }

    fn max_step(&self, t: f64) -> f64 {
        self.schedule.max_step_in(self.segment, t)
    }
}

/// Output sample times: multiples of 1/rate within the schedule, plus every
/// segment boundary.
pub fn output_grid(schedule: &FieldSchedule, grid: &GridSpec) -> Vec<f64> {
    let dt = 1.0 / grid.sample_rate;
    let (start, end) = (schedule.start, schedule.end());
    let k0 = (start / dt - 1e-9).ceil() as i64;
    let k1 = (end / dt + 1e-9).floor() as i64;
    let mut ts: Vec<f64> = (k0..=k1).map(|k| k as f64 * dt).collect();
    ts.extend(schedule.boundaries());
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * dt);
    ts.retain(|&t| t >= start - 1e-12 && t <= end + 1e-12);
    ts
}

pub fn integrate(
    params: &SpeciesParams,
    pol: &EnsemblePolarization,
    rates: &RelaxationRates,
    schedule: &FieldSchedule,
    mis: &Misalignment,
    init: &BlochState,
    grid: &GridSpec,
) -> Result<SimOutput> {
    params.validate()?;
    rates.validate()?;
    schedule.validate()?;
    mis.validate()?;
    if !(grid.sample_rate > 0.0 && grid.rtol > 0.0) {
        return Err(invalid("grid", "sample rate and tolerance must be positive"));
    }
    let p_a0 = pol.alkali.initial();
    let c_s = (q_of(p_a0) / (params.atoms_a * p_a0.max(1e-3))).sqrt();
    let c_k = 1.0 / (params.atoms_b * pol.p_b.max(1e-3)).sqrt();
    let times = output_grid(schedule, grid);
    let tol = Tolerances { rtol: grid.rtol, atol: grid.rtol, ..Default::default() };

    let mut y = [
        init.s_minus.re * c_s,
        init.s_minus.im * c_s,
        init.k_minus.re * c_k,
        init.k_minus.im * c_k,
    ];
    let mut samples: Vec<(f64, [f64; 4])> = Vec::with_capacity(times.len());
    let bounds = schedule.boundaries();
    let mut stats = Stats::default();
    let mut next = 0;
    for seg in 0..schedule.segments.len() {
        let (t0, t1) = (bounds[seg], bounds[seg + 1]);
        let first = next;
        while next < times.len() && (times[next] <= t1 + 1e-12 || seg + 1 == schedule.segments.len()) {
            next += 1;
        }
        let mut outs: Vec<f64> = times[first..next].to_vec();
        if seg > 0 {
            // boundary sample belongs to the previous segment
            outs.retain(|&t| t > t0);
        }
        let rhs = Rhs { params, pol, rates, schedule, mis, segment: seg, t_seg0: t0, c_s, c_k };
        y = ode::integrate(&rhs, t0, y, t1, &outs, &tol, &mut stats, |t, s| samples.push((t, *s)))?;
    }

    let n = samples.len();
    let mut out = SimOutput {
        time: Vec::with_capacity(n),
        s_minus: Vec::with_capacity(n),
        k_minus: Vec::with_capacity(n),
        p_a: Vec::with_capacity(n),
        q: Vec::with_capacity(n),
        signal: Vec::new(),
        p_b: pol.p_b,
    };
    for (t, s) in samples {
        let p = pol.alkali.value(t);
        out.time.push(t);
        out.s_minus.push(Complex64::new(s[0], s[1]) / c_s);
        out.k_minus.push(Complex64::new(s[2], s[3]) / c_k);
        out.p_a.push(p);
        out.q.push(q_of(p));
    }
    out.signal = probe_signal(&out.s_minus, &out.p_a, p_a0.max(f64::MIN_POSITIVE), params, mis)?;
    Ok(out)
}
