//! Ensemble parameters, polarization models and the scalar formulas shared by
//! every other module.
//!
//! Units: rates and frequencies in ordinary Hz, times in s, fields in G,
//! densities in cm⁻³. Larmor frequencies are reported positive for a positive
//! bias field (ω = −g·B with the negative gyromagnetic ratios of K and ³He).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Ordinary frequency (Hz) to angular frequency (rad/s). Every phase or decay
/// factor in the crate goes through this: `exp(i·angular(f)·t)`.
#[inline]
pub fn angular(f_hz: f64) -> f64 {
    std::f64::consts::TAU * f_hz
}

/// A collisional rate `zeta·n` (cm³/s × cm⁻³ = rad/s) expressed in Hz.
#[inline]
pub fn collision_rate_hz(zeta: f64, density: f64) -> f64 {
    zeta * density / std::f64::consts::TAU
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpeciesSpec", into = "SpeciesSpec")]
pub struct SpeciesParams {
    pub n_a: f64,
    pub n_b: f64,
    pub atoms_a: f64,
    pub atoms_b: f64,
    pub volume: f64,
    pub g_e: f64,
    pub g_b: f64,
    pub zeta_raw: f64,
    pub k_se: f64,
}

/// Serialized form: atom counts are derived from density and volume, and are
/// only checked when present.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesSpec {
    pub n_a: f64,
    pub n_b: f64,
    pub volume: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms_b: Option<f64>,
    pub g_e: f64,
    pub g_b: f64,
    pub zeta_raw: f64,
    pub k_se: f64,
}

impl TryFrom<SpeciesSpec> for SpeciesParams {
    type Error = Error;

    fn try_from(s: SpeciesSpec) -> Result<Self> {
        let p = SpeciesParams::new(s.n_a, s.n_b, s.volume, s.g_e, s.g_b, s.zeta_raw, s.k_se)?;
        for (name, given, derived) in [("atoms_a", s.atoms_a, p.atoms_a), ("atoms_b", s.atoms_b, p.atoms_b)] {
            if let Some(v) = given {
                if ((v - derived) / derived).abs() > 1e-12 {
                    return Err(invalid(name, format!("{v:e} is not density × volume = {derived:e}")));
                }
            }
        }
        Ok(p)
    }
}

impl From<SpeciesParams> for SpeciesSpec {
    fn from(p: SpeciesParams) -> Self {
        SpeciesSpec {
            n_a: p.n_a,
            n_b: p.n_b,
            volume: p.volume,
            atoms_a: None,
            atoms_b: None,
            g_e: p.g_e,
            g_b: p.g_b,
            zeta_raw: p.zeta_raw,
            k_se: p.k_se,
        }
    }
}

impl SpeciesParams {
    pub fn new(n_a: f64, n_b: f64, volume: f64, g_e: f64, g_b: f64, zeta_raw: f64, k_se: f64) -> Result<Self> {
        let p = SpeciesParams {
            n_a,
            n_b,
            atoms_a: n_a * volume,
            atoms_b: n_b * volume,
            volume,
            g_e,
            g_b,
            zeta_raw,
            k_se,
        };
        p.validate()?;
        Ok(p)
    }

    /// Potassium / helium-3 cell used throughout the examples and presets.
    pub fn potassium_helium() -> Self {
        SpeciesParams::new(4.9e14, 6.45e19, 8.6, -2.8e6, -3.24e3, 2e-14, 5.5e-20)
            .expect("built-in parameters are valid")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_a", self.n_a),
            ("n_b", self.n_b),
            ("volume", self.volume),
            ("atoms_a", self.atoms_a),
            ("atoms_b", self.atoms_b),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [("g_e", self.g_e), ("g_b", self.g_b), ("zeta_raw", self.zeta_raw), ("k_se", self.k_se)] {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        if self.zeta_raw < 0.0 || self.k_se < 0.0 {
            return Err(invalid("zeta_raw", "collision constants must be non-negative"));
        }
        for (name, n, count) in [("atoms_a", self.n_a, self.atoms_a), ("atoms_b", self.n_b, self.atoms_b)] {
            if ((n * self.volume - count) / count).abs() > 1e-12 {
                return Err(invalid(name, "atom count must equal density × volume"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarizationState {
    pub p_a: f64,
    pub p_b: f64,
}

impl PolarizationState {
    pub fn new(p_a: f64, p_b: f64) -> Result<Self> {
        check_unit("p_a", p_a)?;
        check_unit("p_b", p_b)?;
        Ok(PolarizationState { p_a, p_b })
    }
}

fn check_unit(what: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Domain { what, value: v })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpTerm {
    pub weight: f64,
    /// Plain decay rate in s⁻¹ (time constant 1/rate), not an ordinary-Hz rate.
    pub rate: f64,
}

/// Alkali polarization after the pump is switched off,
/// p_a(t) = Σ wᵢ·exp(−rᵢ·t), t measured from the excitation pulse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ExpTerm>", into = "Vec<ExpTerm>")]
pub struct PolarizationDecayModel {
    terms: Vec<ExpTerm>,
}

impl TryFrom<Vec<ExpTerm>> for PolarizationDecayModel {
    type Error = Error;
    fn try_from(terms: Vec<ExpTerm>) -> Result<Self> {
        PolarizationDecayModel::new(terms)
    }
}

impl From<PolarizationDecayModel> for Vec<ExpTerm> {
    fn from(m: PolarizationDecayModel) -> Self {
        m.terms
    }
}

impl PolarizationDecayModel {
    pub fn new(terms: Vec<ExpTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(invalid("terms", "at least one exponential term is required"));
        }
        let mut total = 0.0;
        for t in &terms {
            if !(t.weight >= 0.0 && t.weight.is_finite()) {
                return Err(invalid("weight", format!("must be non-negative, got {}", t.weight)));
            }
            if !(t.rate >= 0.0 && t.rate.is_finite()) {
                return Err(invalid("rate", format!("must be non-negative, got {}", t.rate)));
            }
            total += t.weight;
        }
        if total > 1.0 + 1e-12 {
            return Err(invalid("terms", format!("p_a(0) = {total} exceeds 1")));
        }
        Ok(PolarizationDecayModel { terms })
    }

    /// Constant polarization.
    pub fn frozen(p_a: f64) -> Result<Self> {
        Self::new(vec![ExpTerm { weight: p_a, rate: 0.0 }])
    }

    /// Double-exponential decay of the potassium polarization in the dark
    /// (9.1 ms and 102 ms time constants).
    pub fn potassium_dark_decay() -> Self {
        Self::new(vec![
            ExpTerm { weight: 0.61, rate: 1.0 / 9.1e-3 },
            ExpTerm { weight: 0.381, rate: 1.0 / 102e-3 },
        ])
        .expect("built-in model is valid")
    }

    pub fn terms(&self) -> &[ExpTerm] {
        &self.terms
    }

    pub fn initial(&self) -> f64 {
        self.terms.iter().map(|t| t.weight).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.terms.iter().all(|t| t.rate == 0.0 || t.weight == 0.0)
    }

    /// p_a(t) without the domain check; t < 0 is clamped to 0 (pre-pulse).
    pub(crate) fn value(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        self.terms.iter().map(|x| x.weight * (-x.rate * t).exp()).sum::<f64>().min(1.0)
    }

    /// −d ln p_a / dt in s⁻¹.
    pub fn log_decay_rate(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        let (mut p, mut dp) = (0.0, 0.0);
        for x in &self.terms {
            let e = x.weight * (-x.rate * t).exp();
            p += e;
            dp += x.rate * e;
        }
        if p > 0.0 {
            dp / p
        } else {
            0.0
        }
    }
}

/// Polarization history of both ensembles: decaying alkali, constant noble gas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePolarization {
    pub alkali: PolarizationDecayModel,
    pub p_b: f64,
}

impl EnsemblePolarization {
    pub fn new(alkali: PolarizationDecayModel, p_b: f64) -> Result<Self> {
        check_unit("p_b", p_b)?;
        Ok(EnsemblePolarization { alkali, p_b })
    }

    pub fn frozen(p_a: f64, p_b: f64) -> Result<Self> {
        Self::new(PolarizationDecayModel::frozen(p_a)?, p_b)
    }

    /// State at time t (pre-pulse times use the t = 0 value).
    pub fn at(&self, t: f64) -> PolarizationState {
        PolarizationState { p_a: self.alkali.value(t), p_b: self.p_b }
    }
}

pub fn eval_polarization(model: &PolarizationDecayModel, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Domain { what: "time", value: t });
    }
    Ok(model.value(t))
}

/// Relaxation rates in Hz. Γ₂ and γ are derived, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxationRates {
    pub gamma_p: f64,
    pub gamma_c: f64,
    #[serde(default)]
    pub gamma_b: f64,
}

impl RelaxationRates {
    pub fn new(gamma_p: f64, gamma_c: f64, gamma_b: f64) -> Result<Self> {
        let r = RelaxationRates { gamma_p, gamma_c, gamma_b };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma_p", self.gamma_p), ("gamma_c", self.gamma_c), ("gamma_b", self.gamma_b)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn none() -> Self {
        RelaxationRates { gamma_p: 0.0, gamma_c: 0.0, gamma_b: 0.0 }
    }

    pub fn gamma_2(&self) -> f64 {
        self.gamma_c + self.gamma_p
    }

    pub fn gamma(&self) -> f64 {
        self.gamma_c + self.gamma_p / 2.0
    }

    /// Rates with a prescribed excitation decoherence γ, keeping Γ_c.
    /// Fails if γ < Γ_c.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let gamma_p = 2.0 * (gamma - self.gamma_c);
        if gamma_p < -1e-12 {
            return Err(invalid("gamma", format!("{gamma} Hz is below gamma_c = {} Hz", self.gamma_c)));
        }
        RelaxationRates::new(gamma_p.max(0.0), self.gamma_c, self.gamma_b)
    }
}

pub fn slowing_down_factor(p_a: f64) -> Result<f64> {
    check_unit("p_a", p_a)?;
    Ok(q_of(p_a))
}

#[inline]
pub(crate) fn q_of(p_a: f64) -> f64 {
    2.0 + 4.0 / (1.0 + p_a * p_a)
}

/// ζ̃ = zeta_raw/√q (cm³/s).
pub fn zeta_tilde(params: &SpeciesParams, p_a: f64) -> Result<f64> {
    Ok(params.zeta_raw / slowing_down_factor(p_a)?.sqrt())
}

/// (J_a, J_b) in Hz.
pub fn unidirectional_rates(params: &SpeciesParams, pol: &PolarizationState) -> Result<(f64, f64)> {
    let q = slowing_down_factor(pol.p_a)?;
    check_unit("p_b", pol.p_b)?;
    let z = params.zeta_raw / q.sqrt();
    let j_a = q.sqrt() * collision_rate_hz(z, params.n_b) * pol.p_a / 2.0;
    let j_b = collision_rate_hz(z, params.n_a) * pol.p_b / (2.0 * q.sqrt());
    Ok((j_a, j_b))
}

/// Bi-directional coupling J = (ζ̃/2)·√(n_a p_a n_b p_b) in Hz.
pub fn coupling_rate_j(params: &SpeciesParams, pol: &PolarizationState) -> Result<f64> {
    let z = zeta_tilde(params, pol.p_a)?;
    check_unit("p_b", pol.p_b)?;
    Ok(collision_rate_hz(z, (params.n_a * pol.p_a * params.n_b * pol.p_b).sqrt()) / 2.0)
}

/// (B_a→b, B_b→a) in G: the equivalent field the alkali exerts on the noble
/// gas, and the one the noble gas exerts on the alkali.
pub fn effective_fields(params: &SpeciesParams, pol: &PolarizationState) -> Result<(f64, f64)> {
    let q = slowing_down_factor(pol.p_a)?;
    check_unit("p_b", pol.p_b)?;
    let z = params.zeta_raw / q.sqrt();
    let shift_b = q.sqrt() * collision_rate_hz(z, params.n_a) * pol.p_a / 2.0;
    let shift_a = collision_rate_hz(z, params.n_b) * pol.p_b / (2.0 * q.sqrt());
    Ok((shift_b / params.g_b, shift_a * q / params.g_e))
}

/// Larmor frequencies (ω_a, ω_b) in Hz at axial field `b` (G): each species
/// precesses in the applied field plus the other's equivalent field.
pub fn precession_frequencies(params: &SpeciesParams, pol: &PolarizationState, b: f64) -> Result<(f64, f64)> {
    let q = slowing_down_factor(pol.p_a)?;
    let (b_ab, b_ba) = effective_fields(params, pol)?;
    Ok((-params.g_e / q * (b + b_ba), -params.g_b * (b + b_ab)))
}

pub fn detuning(params: &SpeciesParams, pol: &PolarizationState, b: f64) -> Result<f64> {
    let (wa, wb) = precession_frequencies(params, pol, b)?;
    Ok(wa - wb)
}

/// Number of excitations |⟨a⟩|² = q·N_a·p_a·θ²/4 after tilting the alkali by θ (rad).
pub fn excitation_count_from_tilt(params: &SpeciesParams, pol: &PolarizationState, theta_a: f64) -> Result<f64> {
    let q = slowing_down_factor(pol.p_a)?;
    Ok(q * params.atoms_a * pol.p_a * theta_a * theta_a / 4.0)
}

/// Steady-state noble-gas polarization estimate p_b ≈ n_a·k_se·p_a(0)·T₁ (T₁ in s).
pub fn noble_gas_polarization_estimate(params: &SpeciesParams, p_a0: f64, t1_active: f64) -> f64 {
    params.n_a * params.k_se * p_a0 * t1_active
}

/// Ratio R_se/ω_a of the alkali spin-exchange rate to its precession
/// frequency; ≫ 1 is required for the slowing-down description.
pub fn serf_margin(r_se: f64, omega_a: f64) -> f64 {
    r_se / omega_a.abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper() -> SpeciesParams {
        SpeciesParams::potassium_helium()
    }

    #[test]
    fn slowing_down_endpoints() {
        assert_eq!(slowing_down_factor(1.0).unwrap(), 4.0);
        assert_eq!(slowing_down_factor(0.0).unwrap(), 6.0);
        assert!((slowing_down_factor(0.5).unwrap() - 5.2).abs() < 1e-15);
        assert!(slowing_down_factor(1.1).is_err());
        assert!(slowing_down_factor(-0.1).is_err());
    }

    #[test]
    fn coupling_at_cell_conditions() {
        let j = coupling_rate_j(&paper(), &PolarizationState::new(0.95, 0.32).unwrap()).unwrap();
        assert!((j - 78.0).abs() < 7.8, "J = {j}");
        let zero_a = coupling_rate_j(&paper(), &PolarizationState::new(0.0, 0.32).unwrap()).unwrap();
        let zero_b = coupling_rate_j(&paper(), &PolarizationState::new(0.95, 0.0).unwrap()).unwrap();
        assert_eq!(zero_a, 0.0);
        assert_eq!(zero_b, 0.0);
    }

    #[test]
    fn unidirectional_consistency() {
        let pol = PolarizationState::new(0.95, 0.32).unwrap();
        let (ja, jb) = unidirectional_rates(&paper(), &pol).unwrap();
        let j = coupling_rate_j(&paper(), &pol).unwrap();
        assert!(((ja * jb).sqrt() / j - 1.0).abs() < 1e-10);
        assert!(((ja * jb) / (78.0f64 * 78.0) - 1.0).abs() < 0.2);

        let mut doubled = paper();
        doubled.n_a *= 2.0;
        doubled.atoms_a *= 2.0;
        let (ja2, jb2) = unidirectional_rates(&doubled, &pol).unwrap();
        assert!((ja2 / ja - 1.0).abs() < 1e-14);
        assert!((jb2 / jb - 2.0).abs() < 1e-14);

        let (ja0, _) = unidirectional_rates(&paper(), &PolarizationState::new(0.0, 0.32).unwrap()).unwrap();
        assert_eq!(ja0, 0.0);
    }

    #[test]
    fn equivalent_fields() {
        let (b_ab, _) = effective_fields(&paper(), &PolarizationState::new(0.98, 0.32).unwrap()).unwrap();
        let (_, b_ba) = effective_fields(&paper(), &PolarizationState::new(0.98, 0.3).unwrap()).unwrap();
        assert!((b_ab / -0.24e-3 - 1.0).abs() < 0.15, "B_ab = {b_ab}");
        assert!((b_ba / -10.94e-3 - 1.0).abs() < 0.15, "B_ba = {b_ba}");
        let zero = effective_fields(&paper(), &PolarizationState::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(zero, (0.0, 0.0));
    }

    #[test]
    fn compensation_point() {
        let pol = PolarizationState::new(0.95, 0.32).unwrap();
        let (_, b_ba) = effective_fields(&paper(), &pol).unwrap();
        let (wa, _) = precession_frequencies(&paper(), &pol, -b_ba).unwrap();
        assert!(wa.abs() < 1e-9);
        let (wa0, _) = precession_frequencies(&paper(), &PolarizationState::new(0.95, 0.0).unwrap(), 0.0).unwrap();
        assert_eq!(wa0, 0.0);
    }

    #[test]
    fn noble_gas_frequency_at_readout_field() {
        // Readout: alkali detuned by ~1.5 mG above its compensation point.
        let pol = PolarizationState::new(0.95, 0.32).unwrap();
        let (_, b_ba) = effective_fields(&paper(), &pol).unwrap();
        let (_, wb) = precession_frequencies(&paper(), &pol, -b_ba + 1.5e-3).unwrap();
        assert!((wb / 42.9 - 1.0).abs() < 0.05, "omega_b = {wb}");
    }

    #[test]
    fn polarization_model() {
        let m = PolarizationDecayModel::potassium_dark_decay();
        assert!((eval_polarization(&m, 0.0).unwrap() - 0.991).abs() < 1e-15);
        let expected = 0.61 / std::f64::consts::E + 0.381 * (-9.1f64 / 102.0).exp();
        assert!((eval_polarization(&m, 9.1e-3).unwrap() - expected).abs() < 1e-14);
        assert!((expected - 0.573).abs() < 1e-3);
        assert!(eval_polarization(&m, 10.0).unwrap() < 1e-40);
        assert!(eval_polarization(&m, -1e-3).is_err());
        assert!(PolarizationDecayModel::new(vec![ExpTerm { weight: 0.7, rate: 1.0 }, ExpTerm { weight: 0.4, rate: 2.0 }]).is_err());
        assert!(PolarizationDecayModel::new(vec![ExpTerm { weight: 0.5, rate: -1.0 }]).is_err());
    }

    #[test]
    fn initial_pumping_rate_matches_gamma_p() {
        // −ṗ/p at t = 0 for the dark decay is the pumping rate Γ_p = 11.4 Hz.
        let m = PolarizationDecayModel::potassium_dark_decay();
        assert!((m.log_decay_rate(0.0) / std::f64::consts::TAU / 11.4 - 1.0).abs() < 0.01);
    }

    #[test]
    fn tilt_to_excitations() {
        let pol = PolarizationState::new(0.95, 0.32).unwrap();
        let n = |deg: f64| excitation_count_from_tilt(&paper(), &pol, deg.to_radians()).unwrap();
        assert!((n(9.8) / 12.1e13 - 1.0).abs() < 0.5 / 12.1 + 0.01);
        assert!((n(6.8) / 5.9e13 - 1.0).abs() < 0.4 / 5.9 + 0.01);
        assert_eq!(n(0.0), 0.0);
    }

    #[test]
    fn relaxation_identities() {
        let r = RelaxationRates::new(11.4, 1.6, 0.0).unwrap();
        assert!((r.gamma_2() - r.gamma_c - r.gamma_p).abs() < 1e-14);
        assert!((r.gamma() - r.gamma_c - r.gamma_p / 2.0).abs() < 1e-14);
        assert!((r.gamma() - 7.3).abs() < 1e-12);
        assert!((r.gamma_2() - 13.0).abs() < 1e-12);
        assert!(RelaxationRates::new(-1.0, 0.0, 0.0).is_err());
        assert!((r.with_gamma(20.0).unwrap().gamma() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn noble_gas_polarization_formula() {
        let p = noble_gas_polarization_estimate(&paper(), 0.991, 3.9 * 3600.0);
        assert!((p - 0.375).abs() < 0.01, "p_b = {p}");
    }

    #[test]
    fn params_validation_and_serde() {
        let p = paper();
        assert!((p.atoms_a / 4.2e15 - 1.0).abs() < 0.01);
        assert!((p.atoms_b / 5.5e20 - 1.0).abs() < 0.01);
        let s = serde_json::to_string(&p).unwrap();
        let back: SpeciesParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let bad = r#"{"n_a":4.9e14,"n_b":6.45e19,"volume":8.6,"atoms_a":4.2e15,"g_e":-2.8e6,"g_b":-3240,"zeta_raw":2e-14,"k_se":5.5e-20}"#;
        assert!(serde_json::from_str::<SpeciesParams>(bad).is_err());
        assert!(SpeciesParams::new(-1.0, 1.0, 1.0, -1.0, -1.0, 1e-14, 0.0).is_err());
    }
}
