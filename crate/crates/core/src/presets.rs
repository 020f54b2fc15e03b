//! Named run configurations shipped with the crate.
//!
//! A preset is a TOML table. `extends = "<name>"` pulls in another preset and
//! deep-merges the local keys over it, so variants only list what changes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bloch_sim::Misalignment;
use crate::error::{invalid, Error, Result};
use crate::fitting::{FitOptions, DEFAULT_GAMMA_P_TILDE};
use crate::physics::{EnsemblePolarization, RelaxationRates, SpeciesParams};
use crate::sequence::{FieldSetting, ProtocolSpec, RunOptions};
use crate::spectral::SweepSpec;

const SOURCES: [(&str, &str); 8] = [
    ("paper_defaults", include_str!("../presets/paper_defaults.toml")),
    ("fig2_exchange", include_str!("../presets/fig2_exchange.toml")),
    ("fig3a_strong", include_str!("../presets/fig3a_strong.toml")),
    ("fig3b_detuned", include_str!("../presets/fig3b_detuned.toml")),
    ("fig3c_overdamped", include_str!("../presets/fig3c_overdamped.toml")),
    ("fig4_sweep", include_str!("../presets/fig4_sweep.toml")),
    ("fig4_misaligned", include_str!("../presets/fig4_misaligned.toml")),
    ("detuning_monitor", include_str!("../presets/detuning_monitor.toml")),
];

const MAX_DEPTH: usize = 8;

/// Exchange times t_start, t_start + t_step, … up to t_stop inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    pub t_start: f64,
    pub t_stop: f64,
    pub t_step: f64,
}

impl ScanSpec {
    pub fn t_values(&self) -> Result<Vec<f64>> {
        if !(self.t_start >= 0.0 && self.t_stop >= self.t_start && self.t_step > 0.0) {
            return Err(invalid("scan", "need 0 ≤ t_start ≤ t_stop and t_step > 0"));
        }
        let n = ((self.t_stop - self.t_start) / self.t_step + 1e-9).floor() as usize;
        Ok((0..=n).map(|k| self.t_start + k as f64 * self.t_step).collect())
    }
}

/// Free-evolution traces of ⟨a(t)⟩ at fixed fields, pulse from `[protocol]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    pub duration: f64,
    pub fields: Vec<FieldSetting>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRange {
    pub b_min_mg: f64,
    pub b_max_mg: f64,
    pub points: usize,
    #[serde(default)]
    pub spectrum: SweepSpec,
}

impl SweepRange {
    /// Evenly spaced fields in G.
    pub fn fields(&self) -> Result<Vec<f64>> {
        if self.points < 2 || !(self.b_max_mg > self.b_min_mg) {
            return Err(invalid("sweep", "need at least two points and b_max_mg > b_min_mg"));
        }
        let n = self.points - 1;
        Ok((0..=n)
            .map(|k| (self.b_min_mg + (self.b_max_mg - self.b_min_mg) * k as f64 / n as f64) * 1e-3)
            .collect())
    }
}

/// Which p_a(t) scales the fitted amplitudes into excitation numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarizationSource {
    /// The preset's decay model evaluated at the readout start.
    #[default]
    Model,
    /// Each readout fit's own p_a(t).
    Fit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub gamma_p_tilde: f64,
    pub max_iter: usize,
    pub refine_seed: bool,
    pub polarization: PolarizationSource,
}

impl Default for FitSettings {
    fn default() -> Self {
        let o = FitOptions::default();
        FitSettings {
            gamma_p_tilde: DEFAULT_GAMMA_P_TILDE,
            max_iter: o.max_iter,
            refine_seed: o.refine_seed,
            polarization: PolarizationSource::default(),
        }
    }
}

impl FitSettings {
    pub fn options(&self) -> FitOptions {
        FitOptions { max_iter: self.max_iter, refine_seed: self.refine_seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub species: SpeciesParams,
    pub polarization: EnsemblePolarization,
    pub rates: RelaxationRates,
    #[serde(default)]
    pub misalignment: Misalignment,
    #[serde(default)]
    pub run: RunOptions,
    #[serde(default)]
    pub protocol: Option<ProtocolSpec>,
    #[serde(default)]
    pub scan: Option<ScanSpec>,
    #[serde(default)]
    pub trace: Option<TraceSpec>,
    #[serde(default)]
    pub sweep: Option<SweepRange>,
    #[serde(default)]
    pub fit: FitSettings,
}

pub fn names() -> Vec<&'static str> {
    SOURCES.iter().map(|s| s.0).collect()
}

/// Unresolved TOML source of a built-in preset.
pub fn source(name: &str) -> Result<&'static str> {
    SOURCES.iter().find(|s| s.0 == name).map(|s| s.1).ok_or_else(|| Error::UnknownPreset(name.into()))
}

/// Keys holding a one-variant table (`{ tilt_deg = 9.8 }`); these replace
/// rather than merge.
const VARIANT_KEYS: [&str; 3] = ["pulse", "b_exchange", "b_readout"];

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
pub fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) if !VARIANT_KEYS.contains(&k.as_str()) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::Parse(e.to_string()))
}

/// Follows `extends` chains (built-in presets only) and returns the merged table.
pub fn resolve_table(mut table: toml::Table) -> Result<toml::Table> {
    for _ in 0..MAX_DEPTH {
        let parent = match table.remove("extends") {
            None => return Ok(table),
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err(invalid("extends", "must be a preset name")),
        };
        let mut base = parse_table(source(&parent)?)?;
        merge(&mut base, table);
        table = base;
    }
    Err(invalid("extends", format!("chain deeper than {MAX_DEPTH}")))
}

impl Preset {
    pub fn from_table(table: toml::Table) -> Result<Preset> {
        let table = resolve_table(table)?;
        let p: Preset = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn from_toml_str(text: &str) -> Result<Preset> {
        Self::from_table(parse_table(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.species.validate()?;
        EnsemblePolarization::new(self.polarization.alkali.clone(), self.polarization.p_b)?;
        self.rates.validate()?;
        self.misalignment.validate()?;
        if let Some(proto) = &self.protocol {
            proto.resolve(&self.species, &self.polarization)?;
        }
        if let Some(scan) = &self.scan {
            scan.t_values()?;
        }
        if let Some(sweep) = &self.sweep {
            sweep.fields()?;
        }
        if let Some(trace) = &self.trace {
            if !(trace.duration > 0.0) || trace.fields.is_empty() {
                return Err(invalid("trace", "need a positive duration and at least one field"));
            }
            if self.protocol.is_none() {
                return Err(invalid("trace", "traces take their pulse from [protocol]"));
            }
        }
        if !(self.fit.gamma_p_tilde >= 0.0) {
            return Err(invalid("fit.gamma_p_tilde", "must be non-negative"));
        }
        Ok(())
    }

    pub fn protocol(&self) -> Result<&ProtocolSpec> {
        self.protocol.as_ref().ok_or_else(|| invalid("protocol", format!("preset `{}` has no [protocol]", self.name)))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("preset serializes");
        hex_digest(&json)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load(name: &str) -> Result<Preset> {
    Preset::from_toml_str(source(name)?)
}
