//! Idealized two-coupled-modes dynamics ∂ₜ(a, b) = i·2π·M·(a, b) with
//! M = [[ω_a + iγ, −J], [−J, ω_b]].

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::physics::angular;

/// Relative eigenvalue separation below which the confluent (Jordan) form is used.
pub const DEGENERACY_TOL: f64 = 1e-9;
/// Half-width of the critical-damping band, relative to γ/2.
pub const CRITICAL_BAND: f64 = 0.05;
/// |Δ| above this multiple of J counts as detuned.
pub const DETUNED_RATIO: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoModeSystem {
    pub omega_a: f64,
    pub omega_b: f64,
    pub gamma: f64,
    pub j: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeAmplitudes {
    pub a: Complex64,
    pub b: Complex64,
}

impl ModeAmplitudes {
    pub fn new(a: Complex64, b: Complex64) -> Self {
        ModeAmplitudes { a, b }
    }

    pub fn total(&self) -> f64 {
        self.a.norm_sqr() + self.b.norm_sqr()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Strong,
    Critical,
    Overdamped,
    Detuned,
}

impl TwoModeSystem {
    pub fn new(omega_a: f64, omega_b: f64, gamma: f64, j: f64) -> Result<Self> {
        let s = TwoModeSystem { omega_a, omega_b, gamma, j };
        s.validate()?;
        Ok(s)
    }

    /// System with ω_b = 0 and ω_a = Δ.
    pub fn with_detuning(delta: f64, gamma: f64, j: f64) -> Result<Self> {
        Self::new(delta, 0.0, gamma, j)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(invalid("gamma", "must be non-negative"));
        }
        if !(self.j >= 0.0) {
            return Err(invalid("J", "must be non-negative"));
        }
        if !(self.omega_a.is_finite() && self.omega_b.is_finite() && self.gamma.is_finite() && self.j.is_finite()) {
            return Err(invalid("system", "entries must be finite"));
        }
        Ok(())
    }

    pub fn delta(&self) -> f64 {
        self.omega_a - self.omega_b
    }

    fn matrix(&self) -> [[Complex64; 2]; 2] {
        [
            [Complex64::new(self.omega_a, self.gamma), Complex64::new(-self.j, 0.0)],
            [Complex64::new(-self.j, 0.0), Complex64::new(self.omega_b, 0.0)],
        ]
    }
}

/// Eigenvalues of M in Hz, ordered by descending real part.
pub fn eigenvalues(sys: &TwoModeSystem) -> (Complex64, Complex64) {
    let mean = Complex64::new(sys.omega_a + sys.omega_b, sys.gamma) / 2.0;
    let half = Complex64::new(sys.delta(), sys.gamma) / 2.0;
    let root = (half * half + sys.j * sys.j).sqrt();
    let (l1, l2) = (mean + root, mean - root);
    if l1.re >= l2.re {
        (l1, l2)
    } else {
        (l2, l1)
    }
}

/// Exact solution at time t via spectral projectors of M.
pub fn propagate(sys: &TwoModeSystem, init: &ModeAmplitudes, t: f64) -> Result<ModeAmplitudes> {
    if !(t >= 0.0) {
        return Err(Error::Domain { what: "time", value: t });
    }
    let u = propagator(sys, t);
    Ok(ModeAmplitudes {
        a: u[0][0] * init.a + u[0][1] * init.b,
        b: u[1][0] * init.a + u[1][1] * init.b,
    })
}

/// exp(i·2π·M·t) as a 2×2 matrix.
pub fn propagator(sys: &TwoModeSystem, t: f64) -> [[Complex64; 2]; 2] {
    let m = sys.matrix();
    let (l1, l2) = eigenvalues(sys);
    let i2pt = Complex64::new(0.0, angular(t));
    let scale = l1.norm().max(l2.norm());
    let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
    if (l1 - l2).norm() <= DEGENERACY_TOL * scale || scale == 0.0 {
        // e^{iλt}(I + i·2π·(M − λI)t)
        let l = (l1 + l2) / 2.0;
        let e = (i2pt * l).exp();
        for r in 0..2 {
            for c in 0..2 {
                let id = if r == c { 1.0 } else { 0.0 };
                let n = m[r][c] - if r == c { l } else { Complex64::new(0.0, 0.0) };
                out[r][c] = e * (id + i2pt * n);
            }
        }
    } else {
        // Σₖ e^{iλₖt} Pₖ with P₁ = (M − λ₂)/(λ₁ − λ₂), P₂ = (M − λ₁)/(λ₂ − λ₁)
        let e1 = (i2pt * l1).exp();
        let e2 = (i2pt * l2).exp();
        let d = l1 - l2;
        for r in 0..2 {
            for c in 0..2 {
                let diag1 = if r == c { l2 } else { Complex64::new(0.0, 0.0) };
                let diag2 = if r == c { l1 } else { Complex64::new(0.0, 0.0) };
                out[r][c] = e1 * (m[r][c] - diag1) / d - e2 * (m[r][c] - diag2) / d;
            }
        }
    }
    out
}

/// Generalized exchange rate J̃ = √(J² + Δ²/4).
pub fn exchange_rate(sys: &TwoModeSystem) -> f64 {
    (sys.j * sys.j + sys.delta() * sys.delta() / 4.0).sqrt()
}

/// Approximate resonant transfer efficiency exp(−πγ/(2J)).
pub fn transfer_efficiency(sys: &TwoModeSystem) -> Result<f64> {
    if sys.j <= 0.0 {
        return Err(Error::Singularity("transfer efficiency at J = 0"));
    }
    Ok((-std::f64::consts::PI * sys.gamma / (2.0 * sys.j)).exp())
}

/// Period of one full exchange cycle, 1/Re(λ₁ − λ₂). Infinite when the
/// normal-mode frequencies coincide (critically damped or overdamped at Δ = 0).
pub fn exchange_period(sys: &TwoModeSystem) -> f64 {
    let (l1, l2) = eigenvalues(sys);
    1.0 / (l1 - l2).re.abs()
}

/// Fraction |a(T)|²/|a(0)|² left in mode a after one full exchange period,
/// starting from all excitations in a.
pub fn return_fraction(sys: &TwoModeSystem) -> Result<f64> {
    let period = exchange_period(sys);
    if !period.is_finite() {
        return Err(Error::Singularity("exchange period at J = 0"));
    }
    let init = ModeAmplitudes::new(Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0));
    Ok(propagate(sys, &init, period)?.a.norm_sqr())
}

pub fn classify_regime(sys: &TwoModeSystem) -> Regime {
    let critical = sys.gamma / 2.0;
    if critical > 0.0 && (sys.j - critical).abs() <= CRITICAL_BAND * critical {
        Regime::Critical
    } else if sys.j < critical {
        Regime::Overdamped
    } else if sys.delta().abs() > DETUNED_RATIO * sys.j {
        Regime::Detuned
    } else {
        Regime::Strong
    }
}
