//! Experimental field sequences: excitation pulse, exchange window,
//! decoupling ramp and magnetometer readout.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bloch_sim::{
    self, initial_state, FieldSchedule, GridSpec, Misalignment, Segment, SimOutput, Waveform, PULSE_SUPPORT,
};
use crate::error::{invalid, Error, Result};
use crate::physics::{
    angular, coupling_rate_j, detuning, precession_frequencies, q_of, EnsemblePolarization, PolarizationState,
    RelaxationRates, SpeciesParams,
};

/// Field search interval for [`solve_field_for_detuning`], in G.
pub const DEFAULT_FIELD_RANGE: (f64, f64) = (-1.0, 1.0);
/// Minimum number of noble-gas periods in the readout window.
pub const MIN_READOUT_PERIODS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseAxis {
    X,
    Y,
}

impl PulseAxis {
    /// Phase of B− = Bₓ − iB_y for a pulse along this axis.
    pub fn phase(self) -> Complex64 {
        match self {
            PulseAxis::X => Complex64::new(1.0, 0.0),
            PulseAxis::Y => Complex64::new(0.0, -1.0),
        }
    }

    pub fn other(self) -> Self {
        match self {
            PulseAxis::X => PulseAxis::Y,
            PulseAxis::Y => PulseAxis::X,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeProtocol {
    pub exchange_time: f64,
    pub pulse_axis: PulseAxis,
    pub pulse_amplitude: f64,
    pub pulse_width: f64,
    pub b_exchange: f64,
    pub b_readout: f64,
    pub ramp_duration: f64,
    pub readout_duration: f64,
}

impl ExchangeProtocol {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("exchange_time", self.exchange_time),
            ("ramp_duration", self.ramp_duration),
            ("readout_duration", self.readout_duration),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be a non-negative duration, got {v}")));
            }
        }
        if !(self.pulse_amplitude.is_finite() && self.b_exchange.is_finite() && self.b_readout.is_finite()) {
            return Err(invalid("fields", "must be finite"));
        }
        if self.pulse_amplitude != 0.0 && !(self.pulse_width > 0.0) {
            return Err(invalid("pulse_width", "must be positive for a nonzero pulse"));
        }
        if self.pulse_width < 0.0 {
            return Err(invalid("pulse_width", "must be non-negative"));
        }
        if self.exchange_time + self.ramp_duration + self.readout_duration <= 0.0 && self.pulse_width == 0.0 {
            return Err(invalid("protocol", "total duration is zero"));
        }
        Ok(())
    }

    /// Checks that the readout resolves the noble-gas precession.
    pub fn check_readout(&self, params: &SpeciesParams, pol: &EnsemblePolarization) -> Result<()> {
        let state = pol.at(self.exchange_time + self.ramp_duration);
        let (_, w_b) = precession_frequencies(params, &state, self.b_readout)?;
        let needed = MIN_READOUT_PERIODS / w_b.abs();
        if self.readout_duration < needed {
            return Err(invalid(
                "readout_duration",
                format!("{:.4} s is shorter than {MIN_READOUT_PERIODS} noble-gas periods ({needed:.4} s)", self.readout_duration),
            ));
        }
        Ok(())
    }

    /// Time before t = 0 at which the schedule starts.
    pub fn lead(&self) -> f64 {
        PULSE_SUPPORT * self.pulse_width
    }

    pub fn readout_start(&self) -> f64 {
        self.exchange_time + self.ramp_duration
    }

    pub fn end(&self) -> f64 {
        self.readout_start() + self.readout_duration
    }

    pub fn with_axis(&self, axis: PulseAxis) -> Self {
        ExchangeProtocol { pulse_axis: axis, ..*self }
    }

    pub fn background(&self) -> Self {
        ExchangeProtocol { pulse_amplitude: 0.0, ..*self }
    }
}

/// Pulse amplitude (G) of a Gaussian of the given width that tilts the alkali by θ.
pub fn pulse_amplitude_for_tilt(params: &SpeciesParams, p_a: f64, theta: f64, width: f64) -> f64 {
    theta * q_of(p_a) / (angular(params.g_e.abs()) * std::f64::consts::PI.sqrt() * width)
}

pub fn build_exchange_schedule(proto: &ExchangeProtocol) -> Result<FieldSchedule> {
    proto.validate()?;
    let lead = proto.lead();
    let pulse = if proto.pulse_amplitude == 0.0 {
        Waveform::Zero
    } else {
        Waveform::Gaussian { amplitude: proto.pulse_axis.phase() * proto.pulse_amplitude, center: 0.0, width: proto.pulse_width }
    };
    let mut segments = Vec::with_capacity(3);
    if proto.exchange_time + lead > 0.0 {
        segments.push(Segment::hold(proto.exchange_time + lead, proto.b_exchange, pulse));
    }
    if proto.ramp_duration > 0.0 {
        let tail = if proto.exchange_time < lead { pulse } else { Waveform::Zero };
        segments.push(Segment { duration: proto.ramp_duration, bz_start: proto.b_exchange, bz_end: proto.b_readout, transverse: tail });
    }
    if proto.readout_duration > 0.0 {
        let tail = if proto.readout_start() < lead { pulse } else { Waveform::Zero };
        segments.push(Segment::hold(proto.readout_duration, proto.b_readout, tail));
    }
    Ok(FieldSchedule { start: -lead, segments })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRun {
    pub protocol: ExchangeProtocol,
    pub output: SimOutput,
    pub boundaries: Vec<f64>,
    pub background: Option<SimOutput>,
    /// Probe signal with the background run subtracted when one was requested.
    pub signal: Vec<f64>,
}

impl ProtocolRun {
    /// Index range of the readout window.
    pub fn readout_range(&self) -> std::ops::Range<usize> {
        let t0 = self.protocol.readout_start();
        let first = self.output.time.partition_point(|&t| t < t0 - 1e-12);
        first..self.output.len()
    }

    /// (τ, signal) over the readout window, τ measured from the end of the ramp.
    pub fn readout_signal(&self) -> (Vec<f64>, Vec<f64>) {
        let r = self.readout_range();
        let t0 = self.protocol.readout_start();
        (self.output.time[r.clone()].iter().map(|t| t - t0).collect(), self.signal[r].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub grid: GridSpec,
    pub subtract_background: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { grid: GridSpec::default(), subtract_background: true }
    }
}

pub fn run_protocol(
    proto: &ExchangeProtocol,
    params: &SpeciesParams,
    pol: &EnsemblePolarization,
    rates: &RelaxationRates,
    mis: &Misalignment,
    opts: &RunOptions,
) -> Result<ProtocolRun> {
    let schedule = build_exchange_schedule(proto)?;
    let mut init = initial_state(params, &pol.at(0.0), mis)?;
    init.t = schedule.start;
    let output = bloch_sim::integrate(params, pol, rates, &schedule, mis, &init, &opts.grid)?;
    let background = if opts.subtract_background {
        let bg_schedule = build_exchange_schedule(&proto.background())?;
        Some(bloch_sim::integrate(params, pol, rates, &bg_schedule, mis, &init, &opts.grid)?)
    } else {
        None
    };
    let signal = match &background {
        Some(bg) => {
            if bg.time != output.time {
                return Err(Error::Alignment("background run grid differs from pulsed run".into()));
            }
            output.signal.iter().zip(&bg.signal).map(|(s, b)| s - b).collect()
        }
        None => output.signal.clone(),
    };
    Ok(ProtocolRun { protocol: *proto, output, boundaries: schedule.boundaries(), background, signal })
}

pub fn solve_field_for_detuning(params: &SpeciesParams, pol: &PolarizationState, target: f64) -> Result<f64> {
    solve_field_for_detuning_in(params, pol, target, DEFAULT_FIELD_RANGE)
}

/// Bisection on the axial field for Δ(B) = target, to 10⁻⁴ Hz.
pub fn solve_field_for_detuning_in(params: &SpeciesParams, pol: &PolarizationState, target: f64, range: (f64, f64)) -> Result<f64> {
    let f = |b: f64| detuning(params, pol, b).map(|d| d - target);
    let (mut lo, mut hi) = range;
    let (mut f_lo, f_hi) = (f(lo)?, f(hi)?);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::NoBracket { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid)?;
        if f_mid.abs() < 1e-4 || hi - lo < 1e-16 {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Axial field specification resolved against the ensemble state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSetting {
    Gauss(f64),
    Milligauss(f64),
    /// Detuning Δ = ω_a − ω_b in Hz.
    DeltaHz(f64),
    /// Detuning in units of the coupling rate J.
    DeltaOverJ(f64),
    /// Offset (mG) above the alkali compensation field −B_b→a.
    CompensationOffsetMg(f64),
}

impl FieldSetting {
    pub fn resolve(&self, params: &SpeciesParams, state: &PolarizationState) -> Result<f64> {
        match *self {
            FieldSetting::Gauss(b) => Ok(b),
            FieldSetting::Milligauss(b) => Ok(b * 1e-3),
            FieldSetting::DeltaHz(d) => solve_field_for_detuning(params, state, d),
            FieldSetting::DeltaOverJ(r) => {
                let j = coupling_rate_j(params, state)?;
                solve_field_for_detuning(params, state, r * j)
            }
            FieldSetting::CompensationOffsetMg(off) => {
                let (_, b_ba) = crate::physics::effective_fields(params, state)?;
                Ok(-b_ba + off * 1e-3)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PulseSetting {
    /// Peak amplitude in G.
    Amplitude(f64),
    Milligauss(f64),
    /// Alkali tilt angle in degrees.
    TiltDeg(f64),
}

/// Protocol with fields given as physical targets; resolved into an
/// [`ExchangeProtocol`] at a given parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub exchange_time: f64,
    #[serde(default = "default_axis")]
    pub pulse_axis: PulseAxis,
    pub pulse: PulseSetting,
    pub pulse_width: f64,
    pub b_exchange: FieldSetting,
    pub b_readout: FieldSetting,
    #[serde(default = "default_ramp")]
    pub ramp_duration: f64,
    #[serde(default = "default_readout")]
    pub readout_duration: f64,
}

fn default_axis() -> PulseAxis {
    PulseAxis::Y
}

pub const DEFAULT_RAMP: f64 = 100e-6;
pub const DEFAULT_READOUT: f64 = 80e-3;

fn default_ramp() -> f64 {
    DEFAULT_RAMP
}

fn default_readout() -> f64 {
    DEFAULT_READOUT
}

impl ProtocolSpec {
    /// Exchange field resolved at t = 0, readout field at the end of the exchange window.
    pub fn resolve(&self, params: &SpeciesParams, pol: &EnsemblePolarization) -> Result<ExchangeProtocol> {
        let s0 = pol.at(0.0);
        let amplitude = match self.pulse {
            PulseSetting::Amplitude(a) => a,
            PulseSetting::Milligauss(a) => a * 1e-3,
            PulseSetting::TiltDeg(deg) => {
                if !(self.pulse_width > 0.0) {
                    return Err(invalid("pulse_width", "must be positive"));
                }
                pulse_amplitude_for_tilt(params, s0.p_a, deg.to_radians(), self.pulse_width)
            }
        };
        let proto = ExchangeProtocol {
            exchange_time: self.exchange_time,
            pulse_axis: self.pulse_axis,
            pulse_amplitude: amplitude,
            pulse_width: self.pulse_width,
            b_exchange: self.b_exchange.resolve(params, &s0)?,
            b_readout: self.b_readout.resolve(params, &pol.at(self.exchange_time))?,
            ramp_duration: self.ramp_duration,
            readout_duration: self.readout_duration,
        };
        proto.validate()?;
        Ok(proto)
    }

    pub fn at_time(&self, t: f64) -> Self {
        ProtocolSpec { exchange_time: t, ..*self }
    }
}
