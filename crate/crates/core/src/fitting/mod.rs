//! Readout-model fitting and multi-exponential polarization fits.
//!
//! Readout model, τ measured from the end of the decoupling ramp:
//! S̄ₓ(τ) = Re[σ_a·exp(iΦ(τ) − 2πγ_a τ) + σ_b·exp(2π(iω_b − γ_b)τ)],
//! Φ(τ) = 2π∫₀^τ ω_a, ω_a(τ) = 2ω₀ / (1 + 2/(1 + p²·exp(−2·2πΓ̃τ))).

mod decay;
mod guess;
pub mod lm;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::physics::angular;
use lm::{LeastSquares, LmOptions};

pub use decay::{fit_polarization_decay, DecayFit};
pub use guess::auto_guess;

pub const N_PARAMS: usize = 9;
pub const PARAM_NAMES: [&str; N_PARAMS] =
    ["re_sigma_a", "im_sigma_a", "re_sigma_b", "im_sigma_b", "gamma_a", "gamma_b", "omega_0", "omega_b", "p_a_t"];
/// Fewer than this many cycles of ω_a − ω_b in the window triggers a warning.
pub const MIN_SEPARATION_CYCLES: f64 = 3.0;
/// Residual-to-signal norm ratio above which a fit is flagged.
pub const POOR_FIT_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    ReSigmaA = 0,
    ImSigmaA = 1,
    ReSigmaB = 2,
    ImSigmaB = 3,
    GammaA = 4,
    GammaB = 5,
    Omega0 = 6,
    OmegaB = 7,
    PaT = 8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadoutModel {
    pub sigma_a: Complex64,
    pub sigma_b: Complex64,
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub omega_0: f64,
    pub omega_b: f64,
    pub p_a_t: f64,
    /// Fixed chirp rate, never fitted.
    pub gamma_p_tilde: f64,
}

/// Default chirp rate Γ̃_p in Hz.
pub const DEFAULT_GAMMA_P_TILDE: f64 = 8.6;

impl ReadoutModel {
    pub fn to_vec(&self) -> [f64; N_PARAMS] {
        [
            self.sigma_a.re,
            self.sigma_a.im,
            self.sigma_b.re,
            self.sigma_b.im,
            self.gamma_a,
            self.gamma_b,
            self.omega_0,
            self.omega_b,
            self.p_a_t,
        ]
    }

    pub fn from_vec(x: &[f64], gamma_p_tilde: f64) -> Self {
        ReadoutModel {
            sigma_a: Complex64::new(x[0], x[1]),
            sigma_b: Complex64::new(x[2], x[3]),
            gamma_a: x[4],
            gamma_b: x[5],
            omega_0: x[6],
            omega_b: x[7],
            p_a_t: x[8],
            gamma_p_tilde,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_a >= 0.0 && self.gamma_b >= 0.0) {
            return Err(invalid("gamma", "decay rates must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.p_a_t) {
            return Err(Error::Domain { what: "p_a_t", value: self.p_a_t });
        }
        if !(self.gamma_p_tilde >= 0.0) {
            return Err(invalid("gamma_p_tilde", "must be non-negative"));
        }
        Ok(())
    }

    /// Alkali frequency at the start of the readout window.
    pub fn omega_a_initial(&self) -> f64 {
        eval_omega_a(self.omega_0, self.p_a_t, self.gamma_p_tilde, 0.0)
    }
}

pub fn eval_omega_a(omega_0: f64, p_a_t: f64, gamma_p_tilde: f64, tau: f64) -> f64 {
    let x2 = p_a_t * p_a_t * (-2.0 * angular(gamma_p_tilde) * tau).exp();
    2.0 * omega_0 / (1.0 + 2.0 / (1.0 + x2))
}

/// expm1(2κτ)/κ, with the κ → 0 limit 2τ.
fn expm1_ratio(kappa: f64, tau: f64) -> f64 {
    if kappa == 0.0 {
        2.0 * tau
    } else {
        (2.0 * kappa * tau).exp_m1() / kappa
    }
}

/// ∫₀^τ ω_a(τ′)/ω₀ dτ′ (seconds) and its derivative with respect to p.
fn phase_factor(p: f64, gamma_p_tilde: f64, tau: f64) -> (f64, f64) {
    let kappa = angular(gamma_p_tilde);
    let d = 3.0 + p * p;
    // ∫ 2/(3 + p²e^{−2κτ}) = ln(1 + 3·expm1(2κτ)/(3 + p²)) / (3κ)
    let em = expm1_ratio(kappa, tau);
    let log_term = if kappa == 0.0 {
        2.0 * tau / d
    } else {
        (3.0 * kappa * em / d).ln_1p() / (3.0 * kappa)
    };
    let value = 2.0 * (tau - log_term);
    let denom = 3.0 * (2.0 * kappa * tau).exp() + p * p;
    let dvalue_dp = 4.0 * p * em / (denom * d);
    (value, dvalue_dp)
}

/// Φ(τ) in radians.
pub fn alkali_phase(omega_0: f64, p_a_t: f64, gamma_p_tilde: f64, tau: f64) -> f64 {
    angular(omega_0) * phase_factor(p_a_t, gamma_p_tilde, tau).0
}

pub fn eval_readout_model(model: &ReadoutModel, tau: &[f64]) -> Vec<f64> {
    tau.iter()
        .map(|&t| {
            let (phi1, _) = phase_factor(model.p_a_t, model.gamma_p_tilde, t);
            let a = Complex64::new(-angular(model.gamma_a) * t, angular(model.omega_0) * phi1).exp();
            let b = Complex64::new(-angular(model.gamma_b) * t, angular(model.omega_b) * t).exp();
            (model.sigma_a * a + model.sigma_b * b).re
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FitMask {
    pub fixed: [bool; N_PARAMS],
}

impl FitMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn fix(mut self, p: Param) -> Self {
        self.fixed[p as usize] = true;
        self
    }

    pub fn is_fixed(&self, p: Param) -> bool {
        self.fixed[p as usize]
    }

    pub fn n_free(&self) -> usize {
        self.fixed.iter().filter(|f| !**f).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Re-seed frequencies from the data before the local fit.
    pub refine_seed: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iter: 200, refine_seed: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: ReadoutModel,
    pub std_errors: [f64; N_PARAMS],
    /// Full covariance (zeros on fixed rows/columns).
    pub covariance: Vec<Vec<f64>>,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn covariance_of(&self, a: Param, b: Param) -> f64 {
        self.covariance[a as usize][b as usize]
    }
}

pub(crate) struct ReadoutProblem<'a> {
    pub tau: &'a [f64],
    pub signal: &'a [f64],
    pub gamma_p_tilde: f64,
}

impl LeastSquares for ReadoutProblem<'_> {
    fn n_params(&self) -> usize {
        N_PARAMS
    }

    fn n_residuals(&self) -> usize {
        self.tau.len()
    }

    fn param_name(&self, i: usize) -> String {
        PARAM_NAMES[i].to_string()
    }

    fn residuals(&self, x: &[f64], r: &mut [f64]) {
        let model = ReadoutModel::from_vec(x, self.gamma_p_tilde);
        for ((ri, v), y) in r.iter_mut().zip(eval_readout_model(&model, self.tau)).zip(self.signal) {
            *ri = v - y;
        }
    }

    fn jacobian(&self, x: &[f64], jac: &mut DMatrix<f64>) {
        let m = ReadoutModel::from_vec(x, self.gamma_p_tilde);
        let i = Complex64::new(0.0, 1.0);
        for (row, &t) in self.tau.iter().enumerate() {
            let (phi1, dphi1) = phase_factor(m.p_a_t, m.gamma_p_tilde, t);
            let ea = Complex64::new(-angular(m.gamma_a) * t, angular(m.omega_0) * phi1).exp();
            let eb = Complex64::new(-angular(m.gamma_b) * t, angular(m.omega_b) * t).exp();
            let sa = m.sigma_a * ea;
            let sb = m.sigma_b * eb;
            jac[(row, 0)] = ea.re;
            jac[(row, 1)] = -ea.im;
            jac[(row, 2)] = eb.re;
            jac[(row, 3)] = -eb.im;
            jac[(row, 4)] = -angular(t) * sa.re;
            jac[(row, 5)] = -angular(t) * sb.re;
            jac[(row, 6)] = (sa * i * angular(phi1)).re;
            jac[(row, 7)] = (sb * i * angular(t)).re;
            jac[(row, 8)] = (sa * i * angular(m.omega_0) * dphi1).re;
        }
    }

    fn project(&self, x: &mut [f64]) {
        x[4] = x[4].max(0.0);
        x[5] = x[5].max(0.0);
        x[8] = x[8].clamp(0.0, 1.0);
    }
}

/// Solves for the complex amplitudes (σ_a, σ_b) by linear least squares with
/// the nonlinear parameters of `model` held fixed. Returns the model and the
/// residual sum of squares.
pub(crate) fn linear_amplitudes(model: &ReadoutModel, tau: &[f64], signal: &[f64], mask: &FitMask) -> (ReadoutModel, f64) {
    let mut cols: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(tau.len())).collect();
    for &t in tau {
        let (phi1, _) = phase_factor(model.p_a_t, model.gamma_p_tilde, t);
        let ea = Complex64::new(-angular(model.gamma_a) * t, angular(model.omega_0) * phi1).exp();
        let eb = Complex64::new(-angular(model.gamma_b) * t, angular(model.omega_b) * t).exp();
        cols[0].push(ea.re);
        cols[1].push(-ea.im);
        cols[2].push(eb.re);
        cols[3].push(-eb.im);
    }
    let x0 = model.to_vec();
    let free: Vec<usize> = (0..4).filter(|&k| !mask.fixed[k]).collect();
    let mut y: Vec<f64> = signal.to_vec();
    for k in (0..4).filter(|k| mask.fixed[*k]) {
        for (yi, c) in y.iter_mut().zip(&cols[k]) {
            *yi -= x0[k] * c;
        }
    }
    let mut out = *model;
    if !free.is_empty() {
        let a = DMatrix::from_fn(tau.len(), free.len(), |r, c| cols[free[c]][r]);
        let b = nalgebra::DVector::from_column_slice(&y);
        if let Ok(sol) = a.clone().svd(true, true).solve(&b, 1e-12) {
            let mut x = x0;
            for (c, &k) in free.iter().enumerate() {
                x[k] = sol[c];
            }
            out = ReadoutModel::from_vec(&x, model.gamma_p_tilde);
        }
    }
    let r = rss(&out, tau, signal);
    (out, r)
}

fn rss(model: &ReadoutModel, tau: &[f64], signal: &[f64]) -> f64 {
    eval_readout_model(model, tau).iter().zip(signal).map(|(f, s)| (f - s).powi(2)).sum()
}

/// Least-squares fit of the readout model to `signal` sampled at `tau`.
/// Without a guess, one is generated from the signal spectrum.
pub fn fit_readout(
    tau: &[f64],
    signal: &[f64],
    init_guess: Option<&ReadoutModel>,
    gamma_p_tilde: f64,
    mask: &FitMask,
    opts: &FitOptions,
) -> Result<FitResult> {
    if tau.len() != signal.len() {
        return Err(Error::Alignment(format!("{} times vs {} samples", tau.len(), signal.len())));
    }
    if tau.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("tau", "grid must be strictly increasing"));
    }
    let n_free = mask.n_free();
    if tau.len() < 10 * n_free.max(1) {
        return Err(invalid("signal", format!("{} samples is fewer than 10× the {n_free} free parameters", tau.len())));
    }
    let seed = match init_guess {
        Some(g) => {
            let mut g = *g;
            g.gamma_p_tilde = gamma_p_tilde;
            g.p_a_t = g.p_a_t.clamp(0.0, 1.0);
            g.gamma_a = g.gamma_a.max(0.0);
            g.gamma_b = g.gamma_b.max(0.0);
            if opts.refine_seed {
                let r = guess::refine(&g, tau, signal, mask);
                if rss(&r, tau, signal) < rss(&g, tau, signal) {
                    r
                } else {
                    g
                }
            } else {
                g
            }
        }
        None => auto_guess(tau, signal, gamma_p_tilde, mask)?,
    };
    let problem = ReadoutProblem { tau, signal, gamma_p_tilde };
    let free: Vec<bool> = mask.fixed.iter().map(|f| !f).collect();
    let lm_opts = LmOptions { max_iter: opts.max_iter, ..Default::default() };
    let rep = lm::minimize(&problem, &seed.to_vec(), &free, &lm_opts)?;
    let model = ReadoutModel::from_vec(&rep.x, gamma_p_tilde);

    let mut covariance = vec![vec![0.0; N_PARAMS]; N_PARAMS];
    let mut std_errors = [0.0; N_PARAMS];
    let idx: Vec<usize> = (0..N_PARAMS).filter(|&i| free[i]).collect();
    if let Some(cov) = &rep.covariance {
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                covariance[i][j] = cov[(a, b)];
            }
            std_errors[i] = cov[(a, a)].max(0.0).sqrt();
        }
    }
    let mut warnings = Vec::new();
    let window = tau.last().unwrap() - tau[0];
    let cycles = (model.omega_a_initial() - model.omega_b).abs() * window;
    if cycles < MIN_SEPARATION_CYCLES {
        warnings.push(format!("alkali and noble-gas components separated by only {cycles:.2} cycles in the readout window"));
    }
    let y_norm = signal.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rep.residual_norm > POOR_FIT_FRACTION * y_norm {
        warnings.push(format!("residual is {:.0}% of the signal norm", 100.0 * rep.residual_norm / y_norm));
    }
    if !rep.converged {
        warnings.push(format!("not converged after {} iterations", rep.iterations));
    }
    Ok(FitResult {
        model,
        std_errors,
        covariance,
        residual_norm: rep.residual_norm,
        converged: rep.converged,
        iterations: rep.iterations,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ReadoutModel {
        ReadoutModel {
            sigma_a: Complex64::new(0.08, -0.03),
            sigma_b: Complex64::new(-0.004, 0.006),
            gamma_a: 9.0,
            gamma_b: 0.3,
            omega_0: 1020.0,
            omega_b: 42.9,
            p_a_t: 0.55,
            gamma_p_tilde: DEFAULT_GAMMA_P_TILDE,
        }
    }

    fn grid(n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 * dt).collect()
    }

    /// Adaptive Simpson quadrature (test-only oracle).
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
    }

    #[test]
    fn omega_a_limits() {
        assert!((eval_omega_a(800.0, 1.0, 8.6, 0.0) - 800.0).abs() < 1e-12);
        assert!((eval_omega_a(800.0, 0.9, 8.6, 10.0) - 800.0 * 2.0 / 3.0).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        for k in 0..100 {
            let w = eval_omega_a(800.0, 0.9, 8.6, k as f64 * 1e-3);
            assert!(w <= prev);
            prev = w;
        }
    }

    #[test]
    fn omega_a_matches_field_form() {
        // ω_a = −g_e·B/q(p(τ)) with p(τ) = p·exp(−2πΓ̃τ) and ω₀ = −g_e·B/4
        let (g_e, b, p, gt, tau) = (-2.8e6, 1.5e-3, 0.9, 8.6, 0.05);
        let p_tau = p * (-angular(gt) * tau).exp();
        let direct = -g_e * b / crate::physics::slowing_down_factor(p_tau).unwrap();
        let model = eval_omega_a(-g_e * b / 4.0, p, gt, tau);
        assert!((direct / model - 1.0).abs() < 1e-13);
    }

    #[test]
    fn closed_form_phase_matches_quadrature() {
        for &(p, gt) in &[(0.9, 8.6), (0.3, 20.0), (1.0, 0.0), (0.05, 1e-9)] {
            for &tau in &[1e-4, 0.01, 0.08, 0.3] {
                let q = simpson(&|s| eval_omega_a(1.0, p, gt, s), 0.0, tau, 1e-15);
                let c = phase_factor(p, gt, tau).0;
                assert!((c / q - 1.0).abs() < 1e-10, "p={p} Γ̃={gt} τ={tau}: {c} vs {q}");
            }
        }
    }

    #[test]
    fn phase_derivative_matches_difference() {
        let (p, gt, tau) = (0.6, 8.6, 0.04);
        let h = 1e-6;
        let fd = (phase_factor(p + h, gt, tau).0 - phase_factor(p - h, gt, tau).0) / (2.0 * h);
        assert!((phase_factor(p, gt, tau).1 / fd - 1.0).abs() < 1e-7);
    }

    #[test]
    fn model_special_cases() {
        let tau = grid(100, 1e-4);
        let mut m = model();
        m.sigma_b = Complex64::new(0.0, 0.0);
        m.gamma_p_tilde = 0.0;
        let w = m.omega_a_initial();
        for (t, v) in tau.iter().zip(eval_readout_model(&m, &tau)) {
            let e = (m.sigma_a * Complex64::new(-angular(m.gamma_a) * t, angular(w) * t).exp()).re;
            assert!((v - e).abs() < 1e-14);
        }
        let mut m = model();
        m.sigma_a = Complex64::new(0.0, 0.0);
        for (t, v) in tau.iter().zip(eval_readout_model(&m, &tau)) {
            let e = (m.sigma_b * Complex64::new(-angular(m.gamma_b) * t, angular(m.omega_b) * t).exp()).re;
            assert!((v - e).abs() < 1e-14);
        }
    }

    #[test]
    fn analytic_jacobian_matches_differences() {
        let tau = grid(200, 2e-4);
        let y = vec![0.0; tau.len()];
        let prob = ReadoutProblem { tau: &tau, signal: &y, gamma_p_tilde: 8.6 };
        let x = model().to_vec();
        let mut jac = DMatrix::zeros(tau.len(), N_PARAMS);
        prob.jacobian(&x, &mut jac);
        for k in 0..N_PARAMS {
            let h = 1e-6 * x[k].abs().max(1e-3);
            let (mut xp, mut xm) = (x, x);
            xp[k] += h;
            xm[k] -= h;
            let (mut rp, mut rm) = (vec![0.0; tau.len()], vec![0.0; tau.len()]);
            prob.residuals(&xp, &mut rp);
            prob.residuals(&xm, &mut rm);
            for row in (0..tau.len()).step_by(17) {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                assert!((jac[(row, k)] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{} row {row}", PARAM_NAMES[k]);
            }
        }
    }

    #[test]
    fn noiseless_fit_from_truth() {
        let tau = grid(1600, 5e-5);
        let truth = model();
        let y = eval_readout_model(&truth, &tau);
        let fit = fit_readout(&tau, &y, Some(&truth), 8.6, &FitMask::none(), &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations <= 2, "{} iterations", fit.iterations);
        for (a, b) in fit.model.to_vec().iter().zip(truth.to_vec()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn noiseless_fit_from_auto_guess() {
        let tau = grid(1600, 5e-5);
        let truth = model();
        let y = eval_readout_model(&truth, &tau);
        let fit = fit_readout(&tau, &y, None, 8.6, &FitMask::none(), &FitOptions::default()).unwrap();
        assert!(fit.converged);
        for (k, (a, b)) in fit.model.to_vec().iter().zip(truth.to_vec()).enumerate() {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3), "{}: {a} vs {b}", PARAM_NAMES[k]);
        }
    }

    #[test]
    fn separation_warning() {
        let tau = grid(400, 5e-5);
        let mut m = model();
        m.omega_0 = 60.0;
        m.omega_b = 42.0;
        m.gamma_p_tilde = 0.0;
        let y = eval_readout_model(&m, &tau);
        let mask = FitMask::none().fix(Param::PaT);
        let fit = fit_readout(&tau, &y, Some(&m), 0.0, &mask, &FitOptions { refine_seed: false, ..Default::default() }).unwrap();
        assert!(fit.warnings.iter().any(|w| w.contains("cycles")));
    }

    #[test]
    fn degenerate_fit_is_reported() {
        let tau = grid(800, 5e-5);
        let mut m = model();
        m.gamma_p_tilde = 0.0;
        let y = eval_readout_model(&m, &tau);
        let r = fit_readout(&tau, &y, Some(&m), 0.0, &FitMask::none(), &FitOptions { refine_seed: false, ..Default::default() });
        match r {
            Err(Error::RankDeficient { directions }) => {
                assert!(directions.iter().any(|d| d.contains("omega_0") && d.contains("p_a_t")), "{directions:?}");
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn too_short_signal_rejected() {
        let tau = grid(50, 1e-4);
        let y = eval_readout_model(&model(), &tau);
        assert!(fit_readout(&tau, &y, Some(&model()), 8.6, &FitMask::none(), &FitOptions::default()).is_err());
    }
}
