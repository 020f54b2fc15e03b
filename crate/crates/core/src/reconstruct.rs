//! Excitation numbers and complex mode amplitudes from fitted readout data.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fitting::{FitResult, Param};
use crate::physics::{q_of, SpeciesParams};

/// Below this p_a(t) the η scaling is refused.
pub const MIN_POLARIZATION: f64 = 0.01;
/// |Δ/J| below this makes the readout formulas invalid.
pub const REGIME_LIMIT: f64 = 5.0;
/// |Δ/J| below this produces a warning.
pub const REGIME_WARN: f64 = 10.0;

/// η(t) = N_a·q(p_a(t))·p_a(0)²/(4·p_a(t)).
pub fn eta_factor(params: &SpeciesParams, p_a_0: f64, p_a_t: f64) -> Result<f64> {
    if !(p_a_t >= MIN_POLARIZATION) {
        return Err(Error::Singularity("η(t) scaling at vanishing alkali polarization"));
    }
    if !(p_a_0 <= 1.0) {
        return Err(Error::Domain { what: "p_a_0", value: p_a_0 });
    }
    if p_a_t > p_a_0 * (1.0 + 1e-9) {
        return Err(invalid("p_a_t", format!("{p_a_t} exceeds the initial polarization {p_a_0}")));
    }
    Ok(params.atoms_a * q_of(p_a_t) * p_a_0 * p_a_0 / (4.0 * p_a_t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excitations {
    pub n_a: f64,
    pub n_b: f64,
    pub warning: Option<String>,
}

/// |⟨a⟩|² = η|σ_a+σ_b|², |⟨b⟩|² = η|(Δ/J)σ_b − (J/Δ)σ_a|², to order (J/Δ)².
pub fn excitations_from_fit(sigma_a: Complex64, sigma_b: Complex64, eta: f64, j_t: f64, delta_t: f64) -> Result<Excitations> {
    if !(j_t > 0.0) {
        return Err(Error::Singularity("excitation reconstruction at J = 0"));
    }
    let ratio = (delta_t / j_t).abs();
    if !(ratio >= REGIME_LIMIT) {
        return Err(Error::Regime { ratio, limit: REGIME_LIMIT });
    }
    let warning = (ratio < REGIME_WARN)
        .then(|| format!("|Δ/J| = {ratio:.2} < {REGIME_WARN}: (J/Δ)² truncation is {:.1}%", 100.0 / (ratio * ratio)));
    let r = delta_t / j_t;
    Ok(Excitations {
        n_a: eta * (sigma_a + sigma_b).norm_sqr(),
        n_b: eta * (sigma_b * r - sigma_a / r).norm_sqr(),
        warning,
    })
}

/// J(t) = √((p_a(t)/p_a(0))·(q₀/q(t)))·J₀ and Δ(t) = ω_a(t, τ=0) − ω_b.
pub fn time_dependent_j_delta(
    j_0: f64,
    p_a_0: f64,
    q_0: f64,
    p_a_t: f64,
    q_t: f64,
    omega_a_t: f64,
    omega_b: f64,
) -> Result<(f64, f64)> {
    if !(p_a_t > 0.0 && p_a_0 > 0.0) {
        return Err(Error::Domain { what: "p_a_t", value: p_a_t });
    }
    Ok(((p_a_t / p_a_0 * q_0 / q_t).sqrt() * j_0, omega_a_t - omega_b))
}

/// ⟨a⟩ = √η·(S̄ₓ − i·S̄_y) from the x- and y-pulse runs.
pub fn assemble_complex_a(sx: &[f64], sy: &[f64], eta: &[f64]) -> Result<Vec<Complex64>> {
    if sx.len() != sy.len() || sx.len() != eta.len() {
        return Err(Error::Alignment(format!("{} / {} / {} samples", sx.len(), sy.len(), eta.len())));
    }
    Ok(sx.iter().zip(sy).zip(eta).map(|((&x, &y), &e)| e.sqrt() * Complex64::new(x, -y)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationRecord {
    pub t: f64,
    pub n_a_exc: f64,
    pub n_b_exc: f64,
    pub a_complex: Option<Complex64>,
    pub sd_n_a: f64,
    pub sd_n_b: f64,
    /// Standard errors of (Re, Im) of `a_complex`.
    pub sd_a: Option<(f64, f64)>,
    pub p_a_t: f64,
    pub j_t: f64,
    pub delta_t: f64,
    pub warnings: Vec<String>,
}

impl ExcitationRecord {
    pub fn total(&self) -> f64 {
        self.n_a_exc + self.n_b_exc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionContext {
    pub p_a_0: f64,
    /// Coupling rate at t = 0, Hz.
    pub j_0: f64,
    /// Extra standard deviation on p_a(t) beyond the fit's own.
    #[serde(default)]
    pub p_a_sd: f64,
}

/// Inputs ordered (Re σ_a, Im σ_a, Re σ_b, Im σ_b, p_a(t)).
const N_IN: usize = 5;
const FIT_INDEX: [Param; N_IN] = [Param::ReSigmaA, Param::ImSigmaA, Param::ReSigmaB, Param::ImSigmaB, Param::PaT];

/// With a known p_a(t) the fit's own p_a variance is dropped.
fn input_covariance(fit: &FitResult, extra_p_sd: f64, known_p: bool) -> [[f64; N_IN]; N_IN] {
    let mut c = [[0.0; N_IN]; N_IN];
    for (i, a) in FIT_INDEX.iter().enumerate() {
        for (j, b) in FIT_INDEX.iter().enumerate() {
            if known_p && (i == 4 || j == 4) {
                continue;
            }
            c[i][j] = fit.covariance_of(*a, *b);
        }
    }
    c[4][4] += extra_p_sd * extra_p_sd;
    c
}

fn propagate<const M: usize>(f: &dyn Fn(&[f64; N_IN]) -> Result<[f64; M]>, x: &[f64; N_IN], cov: &[[f64; N_IN]; N_IN]) -> Result<[f64; M]> {
    let mut jac = [[0.0; N_IN]; M];
    for k in 0..N_IN {
        let h = 1e-6 * x[k].abs().max(1e-8);
        let (mut xp, mut xm) = (*x, *x);
        xp[k] += h;
        xm[k] -= h;
        let hi = f(&xp)?;
        let lo = f(&xm)?;
        for m in 0..M {
            jac[m][k] = (hi[m] - lo[m]) / (2.0 * h);
        }
    }
    let mut sd = [0.0; M];
    for m in 0..M {
        let mut v = 0.0;
        for i in 0..N_IN {
            for j in 0..N_IN {
                v += jac[m][i] * cov[i][j] * jac[m][j];
            }
        }
        sd[m] = v.max(0.0).sqrt();
    }
    Ok(sd)
}

fn counts(params: &SpeciesParams, ctx: &ReconstructionContext, fit: &FitResult, x: &[f64; N_IN]) -> Result<(Excitations, f64, f64)> {
    let p = x[4].min(ctx.p_a_0);
    let eta = eta_factor(params, ctx.p_a_0, p)?;
    let m = &fit.model;
    let (j_t, delta_t) =
        time_dependent_j_delta(ctx.j_0, ctx.p_a_0, q_of(ctx.p_a_0), p, q_of(p), m.omega_a_initial(), m.omega_b)?;
    let ex = excitations_from_fit(Complex64::new(x[0], x[1]), Complex64::new(x[2], x[3]), eta, j_t, delta_t)?;
    Ok((ex, j_t, delta_t))
}

fn inputs(fit: &FitResult, known_p: Option<f64>) -> [f64; N_IN] {
    let v = fit.model.to_vec();
    let mut x = [0.0; N_IN];
    for (k, p) in FIT_INDEX.iter().enumerate() {
        x[k] = v[*p as usize];
    }
    if let Some(p) = known_p {
        x[4] = p;
    }
    x
}

/// Excitation record from one readout fit; uncertainties by first-order
/// propagation of the fit covariance and the extra p_a uncertainty.
///
/// `known_p` replaces the fitted p_a(t) in η(t) and J(t) (a separately
/// measured or modelled polarization); Δ(t) still comes from the fit.
pub fn reconstruct_record(
    params: &SpeciesParams,
    ctx: &ReconstructionContext,
    t: f64,
    fit: &FitResult,
    known_p: Option<f64>,
) -> Result<ExcitationRecord> {
    let x = inputs(fit, known_p);
    let (ex, j_t, delta_t) = counts(params, ctx, fit, &x)?;
    let cov = input_covariance(fit, ctx.p_a_sd, known_p.is_some());
    let sd = propagate(
        &|x| {
            let (e, _, _) = counts(params, ctx, fit, x)?;
            Ok([e.n_a, e.n_b])
        },
        &x,
        &cov,
    )?;
    let mut warnings = fit.warnings.clone();
    warnings.extend(ex.warning);
    Ok(ExcitationRecord {
        t,
        n_a_exc: ex.n_a,
        n_b_exc: ex.n_b,
        a_complex: None,
        sd_n_a: sd[0],
        sd_n_b: sd[1],
        sd_a: None,
        p_a_t: x[4],
        j_t,
        delta_t,
        warnings,
    })
}

/// Record from an x/y pulse pair: counts from the x run and the complex
/// amplitude ⟨a⟩ = √η·(S̄ₓ(0) − i·S̄_y(0)) from both.
pub fn reconstruct_pair(
    params: &SpeciesParams,
    ctx: &ReconstructionContext,
    t: f64,
    fit_x: &FitResult,
    fit_y: &FitResult,
    known_p: Option<f64>,
) -> Result<ExcitationRecord> {
    let mut rec = reconstruct_record(params, ctx, t, fit_x, known_p)?;
    let s0 = |f: &FitResult| (f.model.sigma_a + f.model.sigma_b).re;
    let p = rec.p_a_t.min(ctx.p_a_0);
    let eta = eta_factor(params, ctx.p_a_0, p)?;
    let a = assemble_complex_a(&[s0(fit_x)], &[s0(fit_y)], &[eta])?[0];
    let sd = |f: &FitResult| {
        let x = inputs(f, Some(p));
        let cov = input_covariance(f, ctx.p_a_sd, known_p.is_some());
        propagate(
            &|x| {
                let e = eta_factor(params, ctx.p_a_0, x[4].min(ctx.p_a_0))?;
                Ok([e.sqrt() * (x[0] + x[2])])
            },
            &x,
            &cov,
        )
    };
    rec.a_complex = Some(a);
    rec.sd_a = Some((sd(fit_x)?[0], sd(fit_y)?[0]));
    for w in &fit_y.warnings {
        if !rec.warnings.contains(w) {
            rec.warnings.push(w.clone());
        }
    }
    Ok(rec)
}
