//! Self-check suites run by `spinex validate`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use spinex::bloch_sim::{self, equivalent_two_mode, from_two_mode_frame, BlochState, FieldSchedule, GridSpec, Misalignment, Segment, Waveform};
use spinex::fitting::{eval_readout_model, fit_readout, FitMask, FitOptions, ReadoutModel, DEFAULT_GAMMA_P_TILDE};
use spinex::physics::{EnsemblePolarization, RelaxationRates, SpeciesParams};
use spinex::two_mode::{propagate, ModeAmplitudes};

pub const ORACLE_LIMIT: f64 = 1e-6;
pub const CONSERVATION_LIMIT: f64 = 1e-8;
pub const ROUND_TRIP_RATE: f64 = 0.95;
const HOLD: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settings {
    pub grid: GridSpec,
    pub oracle_draws: usize,
    pub fit_draws: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub limit: f64,
    pub detail: String,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<18} measured {:.3e} limit {:.1e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.limit,
            self.detail
        )
    }
}

fn draw_rng(seed: u64, draw: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(draw as u64))
}

/// Random frozen-polarization system with both modes excited; relaxation
/// only when `relax` is set. The noble-gas decoherence stays zero since the
/// two-mode model carries a single damping rate.
fn random_case(rng: &mut ChaCha8Rng, relax: bool) -> (EnsemblePolarization, RelaxationRates, f64, ModeAmplitudes) {
    let pol = EnsemblePolarization::frozen(rng.random_range(0.4..0.99), rng.random_range(0.1..0.4)).unwrap();
    let rates = if relax {
        RelaxationRates::new(rng.random_range(0.0..15.0), rng.random_range(0.0..3.0), 0.0).unwrap()
    } else {
        RelaxationRates::none()
    };
    let b = rng.random_range(10.5e-3..12.5e-3);
    let mut c = || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 1e6;
    let init = ModeAmplitudes::new(c(), c());
    (pol, rates, b, init)
}

fn start_state(params: &SpeciesParams, pol: &EnsemblePolarization, m: &ModeAmplitudes) -> BlochState {
    let s = pol.at(0.0);
    let q = 2.0 + 4.0 / (1.0 + s.p_a * s.p_a);
    let (a, b) = from_two_mode_frame(m);
    BlochState { s_minus: a * (params.atoms_a * s.p_a / q).sqrt(), k_minus: b * (params.atoms_b * s.p_b).sqrt(), t: 0.0 }
}

fn free_run(
    params: &SpeciesParams,
    pol: &EnsemblePolarization,
    rates: &RelaxationRates,
    b: f64,
    m0: &ModeAmplitudes,
    grid: &GridSpec,
) -> spinex::Result<bloch_sim::SimOutput> {
    let schedule = FieldSchedule { start: 0.0, segments: vec![Segment::hold(HOLD, b, Waveform::Zero)] };
    bloch_sim::integrate(params, pol, rates, &schedule, &Misalignment::default(), &start_state(params, pol, m0), grid)
}

fn oracle_draw(seed: u64, draw: usize, relax: bool, grid: &GridSpec) -> spinex::Result<f64> {
    let params = SpeciesParams::potassium_helium();
    let (pol, rates, b, m0) = random_case(&mut draw_rng(seed, draw), relax);
    let out = free_run(&params, &pol, &rates, b, &m0, grid)?;
    let sys = equivalent_two_mode(&params, &pol, &rates, b, 0.0)?;
    let scale = m0.total().sqrt();
    let mut worst: f64 = 0.0;
    for (t, m) in out.time.iter().zip(out.modes(&params)) {
        let e = propagate(&sys, &m0, *t)?;
        worst = worst.max((e.a - m.a).norm() / scale).max((e.b - m.b).norm() / scale);
    }
    Ok(worst)
}

fn worst_of(name: &'static str, limit: f64, draws: usize, f: impl Fn(usize) -> spinex::Result<f64> + Sync + Send) -> SuiteResult {
    let results: Vec<spinex::Result<f64>> = (0..draws).into_par_iter().map(f).collect();
    let errors: Vec<String> = results.iter().filter_map(|r| r.as_ref().err().map(|e| e.to_string())).collect();
    let measured = results.iter().filter_map(|r| r.as_ref().ok()).fold(0.0f64, |m, v| m.max(*v));
    let passed = errors.is_empty() && measured < limit;
    let detail = match errors.first() {
        Some(e) => format!("{} of {draws} draws failed: {e}", errors.len()),
        None => format!("worst of {draws} draws"),
    };
    SuiteResult { name, passed, measured, limit, detail }
}

/// Detailed model against the two-mode closed form, no relaxation.
pub fn two_mode_oracle(s: &Settings) -> SuiteResult {
    worst_of("two_mode_oracle", ORACLE_LIMIT, s.oracle_draws, |d| oracle_draw(s.seed, d, false, &s.grid))
}

/// Same comparison with alkali and field-gradient relaxation mapped onto γ.
pub fn gamma_mapping(s: &Settings) -> SuiteResult {
    worst_of("gamma_mapping", ORACLE_LIMIT, s.oracle_draws, |d| oracle_draw(s.seed ^ 0x5a5a, d, true, &s.grid))
}

/// Drift of the weighted excitation number with every loss off, integrated
/// two decades tighter than the run grid.
pub fn conservation(s: &Settings) -> SuiteResult {
    let grid = GridSpec { rtol: s.grid.rtol * 1e-2, ..s.grid };
    worst_of("conservation", CONSERVATION_LIMIT, s.oracle_draws, |d| {
        let params = SpeciesParams::potassium_helium();
        let (pol, _, b, m0) = random_case(&mut draw_rng(s.seed ^ 0xc0c0, d), false);
        let out = free_run(&params, &pol, &RelaxationRates::none(), b, &m0, &grid)?;
        let n0 = m0.total();
        Ok(out.modes(&params).iter().fold(0.0f64, |w, m| w.max((m.total() / n0 - 1.0).abs())))
    })
}

fn random_model(rng: &mut ChaCha8Rng) -> ReadoutModel {
    let amp_a = rng.random_range(0.01..0.2);
    let amp_b = amp_a * rng.random_range(0.05..0.5);
    let pa = rng.random_range(0.0..std::f64::consts::TAU);
    let pb = rng.random_range(0.0..std::f64::consts::TAU);
    ReadoutModel {
        sigma_a: Complex64::from_polar(amp_a, pa),
        sigma_b: Complex64::from_polar(amp_b, pb),
        gamma_a: rng.random_range(3.0..20.0),
        gamma_b: rng.random_range(0.05..2.0),
        omega_0: rng.random_range(500.0..1500.0),
        omega_b: rng.random_range(30.0..60.0),
        p_a_t: rng.random_range(0.2..0.95),
        gamma_p_tilde: DEFAULT_GAMMA_P_TILDE,
    }
}

fn perturb(m: &ReadoutModel, rng: &mut ChaCha8Rng) -> ReadoutModel {
    let mut f = || 1.0 + rng.random_range(-0.2..0.2);
    ReadoutModel {
        sigma_a: Complex64::new(m.sigma_a.re * f(), m.sigma_a.im * f()),
        sigma_b: Complex64::new(m.sigma_b.re * f(), m.sigma_b.im * f()),
        gamma_a: m.gamma_a * f(),
        gamma_b: m.gamma_b * f(),
        omega_0: m.omega_0 * f(),
        omega_b: m.omega_b * f(),
        p_a_t: (m.p_a_t * f()).min(1.0),
        gamma_p_tilde: m.gamma_p_tilde,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Outcome {
    Recovered,
    Flagged,
    Silent,
}

/// Noiseless readout fits from ±20% perturbed guesses. A draw counts when all
/// parameters come back within 1e-4 relative; a wrong fit without a warning
/// fails the suite outright.
pub fn fit_round_trip(s: &Settings) -> SuiteResult {
    let tau: Vec<f64> = (0..1600).map(|i| i as f64 / 20e3).collect();
    let outcomes: Vec<Outcome> = (0..s.fit_draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = draw_rng(s.seed ^ 0xf1f1, d);
            let truth = random_model(&mut rng);
            let guess = perturb(&truth, &mut rng);
            let y = eval_readout_model(&truth, &tau);
            match fit_readout(&tau, &y, Some(&guess), DEFAULT_GAMMA_P_TILDE, &FitMask::none(), &FitOptions::default()) {
                Ok(fit) if fit.model.to_vec().iter().zip(truth.to_vec()).all(|(a, b)| (a - b).abs() <= 1e-4 * b.abs().max(1e-3)) => {
                    Outcome::Recovered
                }
                Ok(fit) if fit.converged && fit.warnings.is_empty() => Outcome::Silent,
                _ => Outcome::Flagged,
            }
        })
        .collect();
    let count = |o| outcomes.iter().filter(|&&x| x == o).count();
    let (ok, flagged, silent) = (count(Outcome::Recovered), count(Outcome::Flagged), count(Outcome::Silent));
    let rate = ok as f64 / s.fit_draws.max(1) as f64;
    SuiteResult {
        name: "fit_round_trip",
        passed: rate >= ROUND_TRIP_RATE && silent == 0,
        measured: rate,
        limit: ROUND_TRIP_RATE,
        detail: format!("{ok} recovered, {flagged} flagged, {silent} silent of {}", s.fit_draws),
    }
}

pub fn run_all(s: &Settings) -> Vec<SuiteResult> {
    vec![two_mode_oracle(s), gamma_mapping(s), conservation(s), fit_round_trip(s)]
}
