//! Measurements shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spinex::bloch_sim::{self, equivalent_two_mode, from_two_mode_frame, BlochState, FieldSchedule, GridSpec, Misalignment, Segment, Waveform};
use spinex::fitting::{
    eval_omega_a, eval_readout_model, fit_readout, FitMask, FitOptions, ReadoutModel, DEFAULT_GAMMA_P_TILDE,
};
use spinex::physics::{EnsemblePolarization, PolarizationDecayModel, RelaxationRates, SpeciesParams};
use spinex::pipeline::{exchange_scan, readout_seed, ScanOptions};
use spinex::presets::{load, Preset};
use spinex::sequence::run_protocol;
use spinex::two_mode::{propagate, ModeAmplitudes};

pub fn paper() -> Preset {
    load("paper_defaults").unwrap()
}

/// q|S−|²/(N_a p_a) at the start of the readout window, straight from the
/// simulated spin vectors.
pub fn direct_alkali_excitations(preset: &Preset, t: f64) -> f64 {
    let proto = preset.protocol().unwrap().at_time(t).resolve(&preset.species, &preset.polarization).unwrap();
    let run = run_protocol(&proto, &preset.species, &preset.polarization, &preset.rates, &preset.misalignment, &preset.run).unwrap();
    run.output.alkali_mode(&preset.species)[run.readout_range().start].norm_sqr()
}

/// Reconstructed n_a divided by the direct value at each t.
pub fn pipeline_ratios(preset: &Preset, t: &[f64]) -> Vec<f64> {
    let scan = exchange_scan(preset, t, &ScanOptions::default()).unwrap();
    scan.records.iter().map(|r| r.n_a_exc / direct_alkali_excitations(preset, r.t)).collect()
}

/// paper_defaults with all relaxation off and the alkali polarization held.
pub fn lossless_preset() -> Preset {
    let mut p = paper();
    p.polarization = EnsemblePolarization::frozen(p.polarization.alkali.initial(), p.polarization.p_b).unwrap();
    p.rates = RelaxationRates::none();
    p
}

/// Largest relative deviation of n_a + n_b from its mean, plus the number of
/// failed points.
pub fn total_spread(preset: &Preset, t: &[f64]) -> (f64, usize) {
    let scan = exchange_scan(preset, t, &ScanOptions::default()).unwrap();
    let tot: Vec<f64> = scan.records.iter().map(|r| r.total()).filter(|v| v.is_finite()).collect();
    let mean = tot.iter().sum::<f64>() / tot.len() as f64;
    (tot.iter().map(|v| (v / mean - 1.0).abs()).fold(0.0, f64::max), scan.failed.len())
}

pub fn lossless_times() -> Vec<f64> {
    (0..=20).map(|k| k as f64 * 2e-3).collect()
}

/// Random frozen-polarization system with both modes excited.
fn random_case(rng: &mut ChaCha8Rng) -> (EnsemblePolarization, RelaxationRates, f64, ModeAmplitudes) {
    let pol = EnsemblePolarization::frozen(rng.random_range(0.4..0.99), rng.random_range(0.1..0.4)).unwrap();
    let rates = RelaxationRates::new(rng.random_range(0.0..15.0), rng.random_range(0.0..3.0), 0.0).unwrap();
    let b = rng.random_range(10.5e-3..12.5e-3);
    let init = ModeAmplitudes::new(
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 1e6,
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 1e6,
    );
    (pol, rates, b, init)
}

fn start_state(params: &SpeciesParams, pol: &EnsemblePolarization, m: &ModeAmplitudes) -> BlochState {
    let s = pol.at(0.0);
    let q = 2.0 + 4.0 / (1.0 + s.p_a * s.p_a);
    let (a, b) = from_two_mode_frame(m);
    BlochState {
        s_minus: a * (params.atoms_a * s.p_a / q).sqrt(),
        k_minus: b * (params.atoms_b * s.p_b).sqrt(),
        t: 0.0,
    }
}

fn free_run(params: &SpeciesParams, pol: &EnsemblePolarization, rates: &RelaxationRates, b: f64, init: &BlochState, grid: &GridSpec) -> bloch_sim::SimOutput {
    let schedule = FieldSchedule { start: 0.0, segments: vec![Segment::hold(0.03, b, Waveform::Zero)] };
    bloch_sim::integrate(params, pol, rates, &schedule, &Misalignment::default(), init, grid).unwrap()
}

/// Worst relative |a|, |b| deviation between the detailed model and the
/// two-mode closed form over `draws` random frozen-polarization systems.
pub fn oracle_deviation(draws: usize, seed: u64, grid: &GridSpec) -> f64 {
    let params = SpeciesParams::potassium_helium();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let (pol, rates, b, m0) = random_case(&mut rng);
        let out = free_run(&params, &pol, &rates, b, &start_state(&params, &pol, &m0), grid);
        let sys = equivalent_two_mode(&params, &pol, &rates, b, 0.0).unwrap();
        let scale = m0.total().sqrt();
        for (t, m) in out.time.iter().zip(out.modes(&params)) {
            let e = propagate(&sys, &m0, *t).unwrap();
            worst = worst.max((e.a - m.a).norm() / scale).max((e.b - m.b).norm() / scale);
        }
    }
    worst
}

/// The 1e-8 conservation bound needs a tighter step tolerance than the default.
pub const CONSERVATION_GRID: GridSpec = GridSpec { sample_rate: 20e3, rtol: 1e-11 };

/// Worst relative drift of q|S−|²/(N_a p_a) + |K−|²/(N_b p_b) with all decay off.
pub fn weighted_excitation_drift(draws: usize, seed: u64) -> f64 {
    let params = SpeciesParams::potassium_helium();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let (pol, _, b, m0) = random_case(&mut rng);
        let out = free_run(&params, &pol, &RelaxationRates::none(), b, &start_state(&params, &pol, &m0), &CONSERVATION_GRID);
        let n0 = m0.total();
        for m in out.modes(&params) {
            worst = worst.max((m.total() / n0 - 1.0).abs());
        }
    }
    worst
}

/// Readout sampling grid: 80 ms at 20 kHz.
pub fn readout_grid() -> Vec<f64> {
    (0..1600).map(|i| i as f64 / 20e3).collect()
}

pub fn random_model(rng: &mut ChaCha8Rng) -> ReadoutModel {
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

pub fn perturb(m: &ReadoutModel, rng: &mut ChaCha8Rng) -> ReadoutModel {
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

pub struct RoundTrip {
    pub ok: usize,
    pub flagged: usize,
    /// Draws that came back wrong without a warning.
    pub silent: Vec<usize>,
}

/// Noiseless fits from ±20% perturbed guesses; success means every
/// parameter within 1e-4 relative.
pub fn round_trip(draws: usize, seed: u64) -> RoundTrip {
    let tau = readout_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = RoundTrip { ok: 0, flagged: 0, silent: Vec::new() };
    for draw in 0..draws {
        let truth = random_model(&mut rng);
        let guess = perturb(&truth, &mut rng);
        let y = eval_readout_model(&truth, &tau);
        match fit_readout(&tau, &y, Some(&guess), DEFAULT_GAMMA_P_TILDE, &FitMask::none(), &FitOptions::default()) {
            Ok(fit) => {
                let good = fit.model.to_vec().iter().zip(truth.to_vec()).all(|(a, b)| (a - b).abs() <= 1e-4 * b.abs().max(1e-3));
                if good {
                    out.ok += 1;
                } else if !fit.converged || !fit.warnings.is_empty() {
                    out.flagged += 1;
                } else {
                    out.silent.push(draw);
                }
            }
            Err(_) => out.flagged += 1,
        }
    }
    out
}

/// Readout signal shaped like the default sequence at exchange time t:
/// alkali line about 790 Hz above the noble-gas line, p_a(t) from the dark decay.
pub fn readout_like(t: f64, phase: f64) -> ReadoutModel {
    let p = spinex::physics::eval_polarization(&PolarizationDecayModel::potassium_dark_decay(), t).unwrap();
    let omega_a = 42.9 + 790.0;
    ReadoutModel {
        sigma_a: Complex64::from_polar(0.05, phase),
        sigma_b: Complex64::from_polar(0.005, 1.0 - phase),
        gamma_a: 7.3,
        gamma_b: 0.1,
        omega_0: omega_a / eval_omega_a(1.0, p, DEFAULT_GAMMA_P_TILDE, 0.0),
        omega_b: 42.9,
        p_a_t: p,
        gamma_p_tilde: DEFAULT_GAMMA_P_TILDE,
    }
}

pub const SENSITIVITY_TIMES: [f64; 4] = [2e-3, 6.5e-3, 11e-3, 16e-3];

/// Largest relative change of |σ_a| or |σ_b| when signals generated with
/// Γ̃_p = 8.6 Hz are fitted with Γ̃_p scaled by 0.5 and 1.5.
pub fn chirp_rate_sensitivity(times: &[f64]) -> f64 {
    let tau = readout_grid();
    let mut worst: f64 = 0.0;
    for (k, &t) in times.iter().enumerate() {
        let truth = readout_like(t, 0.7 * k as f64);
        let y = eval_readout_model(&truth, &tau);
        for scale in [0.5, 1.5] {
            let fit = fit_readout(&tau, &y, Some(&truth), DEFAULT_GAMMA_P_TILDE * scale, &FitMask::none(), &FitOptions::default()).unwrap();
            let da = fit.model.sigma_a.norm() / truth.sigma_a.norm() - 1.0;
            let db = fit.model.sigma_b.norm() / truth.sigma_b.norm() - 1.0;
            worst = worst.max(da.abs()).max(db.abs());
        }
    }
    worst
}

/// (fitted, injected) p_a at the readout start of exchange time t.
pub fn fitted_polarization(preset: &Preset, t: f64) -> (f64, f64) {
    let proto = preset.protocol().unwrap().at_time(t).resolve(&preset.species, &preset.polarization).unwrap();
    let run = run_protocol(&proto, &preset.species, &preset.polarization, &preset.rates, &preset.misalignment, &preset.run).unwrap();
    let (tau, signal) = run.readout_signal();
    let (seed, gpt, mask) = readout_seed(preset, &proto).unwrap();
    let fit = fit_readout(&tau, &signal, Some(&seed), gpt, &mask, &preset.fit.options()).unwrap();
    (fit.model.p_a_t, seed.p_a_t)
}
