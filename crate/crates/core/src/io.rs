//! Plain-text outputs for plotting and signal ingestion.
//!
//! Tables are whitespace-separated columns under a `#` header block of
//! `key: value` lines; the last header line names the columns. Spectral maps
//! are a dense matrix plus a JSON axis document.

use std::io::{BufRead, Write};

use serde::Serialize;

use crate::bloch_sim::SimOutput;
use crate::error::{Error, Result};
use crate::pipeline::Trace;
use crate::reconstruct::ExcitationRecord;
use crate::spectral::{Branches, SpectralMap};

/// Ordered `key: value` metadata written above a table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Header(pub Vec<(String, String)>);

impl Header {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.0.push((key.to_string(), value.to_string().replace('\n', " ")));
        self
    }

    fn write(&self, w: &mut dyn Write, columns: &[&str]) -> Result<()> {
        for (k, v) in &self.0 {
            writeln!(w, "# {k}: {v}")?;
        }
        writeln!(w, "# {}", columns.join("\t"))?;
        Ok(())
    }
}

fn row(w: &mut dyn Write, values: &[f64]) -> Result<()> {
    let cells: Vec<String> = values.iter().map(|v| format!("{v:.10e}")).collect();
    writeln!(w, "{}", cells.join("\t"))?;
    Ok(())
}

pub const RECORD_COLUMNS: [&str; 13] =
    ["t", "n_a", "n_b", "sd_n_a", "sd_n_b", "p_a_t", "j_t", "delta_t", "re_a", "im_a", "sd_re_a", "sd_im_a", "flags"];

/// One row per exchange time. Missing complex amplitudes are NaN; `flags`
/// is the warning count, with the messages in trailing `# t: message` lines.
pub fn write_records(w: &mut dyn Write, header: &Header, records: &[ExcitationRecord]) -> Result<()> {
    header.write(w, &RECORD_COLUMNS)?;
    for r in records {
        let a = r.a_complex.map_or((f64::NAN, f64::NAN), |a| (a.re, a.im));
        let sd = r.sd_a.unwrap_or((f64::NAN, f64::NAN));
        row(
            w,
            &[r.t, r.n_a_exc, r.n_b_exc, r.sd_n_a, r.sd_n_b, r.p_a_t, r.j_t, r.delta_t, a.0, a.1, sd.0, sd.1, r.warnings.len() as f64],
        )?;
    }
    for r in records {
        for msg in &r.warnings {
            writeln!(w, "# warning t={:e}: {}", r.t, msg.replace('\n', " "))?;
        }
    }
    Ok(())
}

pub const SIM_COLUMNS: [&str; 8] = ["t", "re_s_minus", "im_s_minus", "re_k_minus", "im_k_minus", "p_a", "q", "signal"];

/// `signal` is the processed probe signal (background subtracted, noise added).
pub fn write_simulation(w: &mut dyn Write, header: &Header, out: &SimOutput, signal: &[f64]) -> Result<()> {
    if signal.len() != out.len() {
        return Err(Error::Alignment(format!("{} signal samples for {} time points", signal.len(), out.len())));
    }
    header.write(w, &SIM_COLUMNS)?;
    for i in 0..out.len() {
        let (s, k) = (out.s_minus[i], out.k_minus[i]);
        row(w, &[out.time[i], s.re, s.im, k.re, k.im, out.p_a[i], out.q[i], signal[i]])?;
    }
    Ok(())
}

/// Equal-length columns side by side.
pub fn write_columns(w: &mut dyn Write, header: &Header, names: &[&str], columns: &[&[f64]]) -> Result<()> {
    if names.len() != columns.len() {
        return Err(Error::Alignment(format!("{} names for {} columns", names.len(), columns.len())));
    }
    let n = columns.first().map_or(0, |c| c.len());
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::Alignment("columns differ in length".into()));
    }
    header.write(w, names)?;
    let mut values = vec![0.0; columns.len()];
    for i in 0..n {
        for (v, c) in values.iter_mut().zip(columns) {
            *v = c[i];
        }
        row(w, &values)?;
    }
    Ok(())
}

/// Two-column (τ, signal) table, readable by [`read_signal`].
pub fn write_signal(w: &mut dyn Write, header: &Header, tau: &[f64], y: &[f64]) -> Result<()> {
    write_columns(w, header, &["tau", "signal"], &[tau, y])
}

pub const TRACE_COLUMNS: [&str; 4] = ["t", "re_a", "im_a", "n_a"];

pub fn write_trace(w: &mut dyn Write, header: &Header, trace: &Trace) -> Result<()> {
    header.write(w, &TRACE_COLUMNS)?;
    for (t, a) in trace.t.iter().zip(&trace.a) {
        row(w, &[*t, a.re, a.im, a.norm_sqr()])?;
    }
    Ok(())
}

/// Dense matrix: one row per frequency, one column per detuning.
pub fn write_map_matrix(w: &mut dyn Write, header: &Header, map: &SpectralMap) -> Result<()> {
    let header = header.clone().with("rows", "omega_axis").with("columns", "delta_axis");
    header.write(w, &["amplitude"])?;
    for k in 0..map.omega_axis.len() {
        let values: Vec<f64> = map.amplitude.iter().map(|col| col[k]).collect();
        row(w, &values)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MapAxes<'a> {
    delta_axis: &'a [f64],
    omega_axis: &'a [f64],
    delta_over_j: Vec<f64>,
    omega_over_j: Vec<f64>,
    j_norm: f64,
    omega_b_shift: f64,
    fields: &'a [f64],
    failed: &'a [Option<String>],
    duration: f64,
    metadata: serde_json::Map<String, serde_json::Value>,
}

pub fn write_map_axes(w: &mut dyn Write, header: &Header, map: &SpectralMap) -> Result<()> {
    let metadata = header.0.iter().map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone()))).collect();
    let axes = MapAxes {
        delta_axis: &map.delta_axis,
        omega_axis: &map.omega_axis,
        delta_over_j: map.delta_normalized(),
        omega_over_j: map.omega_normalized(),
        j_norm: map.j_norm,
        omega_b_shift: map.omega_b_shift,
        fields: &map.fields,
        failed: &map.failed,
        duration: map.duration,
        metadata,
    };
    serde_json::to_writer_pretty(&mut *w, &axes).map_err(|e| Error::Io(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

pub const BRANCH_COLUMNS: [&str; 5] = ["delta", "lower_omega", "lower_amplitude", "upper_omega", "upper_amplitude"];

pub fn write_branches(w: &mut dyn Write, header: &Header, br: &Branches) -> Result<()> {
    header.write(w, &BRANCH_COLUMNS)?;
    let split = |p: &Option<crate::spectral::Peak>| p.map_or((f64::NAN, f64::NAN), |p| (p.omega, p.amplitude));
    for (c, d) in br.delta.iter().enumerate() {
        let (lo, hi) = (split(&br.lower[c]), split(&br.upper[c]));
        row(w, &[*d, lo.0, lo.1, hi.0, hi.1])?;
    }
    Ok(())
}

/// Reads a (τ, signal) table: two numeric columns, `#` comments and blank
/// lines ignored. τ must be strictly increasing.
pub fn read_signal(r: &mut dyn BufRead) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut tau, mut y) = (Vec::new(), Vec::new());
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let cells: Vec<&str> = body.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
        if cells.len() != 2 {
            return Err(Error::Parse(format!("line {}: expected 2 columns, found {}", n + 1, cells.len())));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("line {}: `{s}`: {e}", n + 1)));
        let (t, v) = (parse(cells[0])?, parse(cells[1])?);
        if !(t.is_finite() && v.is_finite()) {
            return Err(Error::Parse(format!("line {}: non-finite value", n + 1)));
        }
        if tau.last().is_some_and(|&last| t <= last) {
            return Err(Error::Parse(format!("line {}: τ is not strictly increasing", n + 1)));
        }
        tau.push(t);
        y.push(v);
    }
    if tau.is_empty() {
        return Err(Error::Parse("no samples".into()));
    }
    Ok((tau, y))
}

/// Numeric rows of a table written by this module, header skipped.
pub fn read_table(r: &mut dyn BufRead) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let row = body
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("line {}: `{s}`: {e}", n + 1))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn record(t: f64) -> ExcitationRecord {
        ExcitationRecord {
            t,
            n_a_exc: 1.5e14,
            n_b_exc: 2.0e12,
            a_complex: Some(Complex64::new(1e7, -2e6)),
            sd_n_a: 1e12,
            sd_n_b: 1e11,
            sd_a: Some((1e5, 2e5)),
            p_a_t: 0.9,
            j_t: 70.0,
            delta_t: 900.0,
            warnings: vec!["low\nsignal".into()],
        }
    }

    #[test]
    fn records_round_trip() {
        let mut buf = Vec::new();
        let h = Header::new().with("preset", "paper_defaults").with("digest", "abc");
        write_records(&mut buf, &h, &[record(0.0), record(1e-3)]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# preset: paper_defaults\n# digest: abc\n# t\tn_a"));
        assert!(text.contains("# warning t=1e-3: low signal"));
        let rows = read_table(&mut buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].len(), RECORD_COLUMNS.len());
        assert_eq!(rows[1][0], 1e-3);
        assert!((rows[0][1] / 1.5e14 - 1.0).abs() < 1e-10);
        assert_eq!(rows[0][12], 1.0);
    }

    #[test]
    fn signal_ingestion() {
        let text = "# tau signal\n0.0 1.0\n\n1e-3, -0.5  # comment\n2e-3\t0.25\n";
        let (t, y) = read_signal(&mut text.as_bytes()).unwrap();
        assert_eq!(t, vec![0.0, 1e-3, 2e-3]);
        assert_eq!(y, vec![1.0, -0.5, 0.25]);
        assert!(read_signal(&mut "0 1\n0 2\n".as_bytes()).is_err());
        assert!(read_signal(&mut "0 1 2\n".as_bytes()).is_err());
        assert!(read_signal(&mut "0 x\n".as_bytes()).is_err());
        assert!(read_signal(&mut "# nothing\n".as_bytes()).is_err());

        let mut buf = Vec::new();
        write_signal(&mut buf, &Header::new().with("seed", 7), &[0.0, 5e-5], &[0.125, -1.0 / 3.0]).unwrap();
        let (t, y) = read_signal(&mut buf.as_slice()).unwrap();
        assert_eq!(t, vec![0.0, 5e-5]);
        assert!((y[1] + 1.0 / 3.0).abs() < 1e-10);
        assert!(write_signal(&mut Vec::new(), &Header::new(), &[0.0], &[]).is_err());
    }

    #[test]
    fn map_files() {
        let map = crate::spectral::synthetic_map(40.0, 1.0, 40.0, &[-40.0, 0.0, 40.0], 65e-3, 4e3, 0.5, 100.0).unwrap();
        let mut m = Vec::new();
        write_map_matrix(&mut m, &Header::new(), &map).unwrap();
        let rows = read_table(&mut m.as_slice()).unwrap();
        assert_eq!(rows.len(), map.omega_axis.len());
        assert!(rows.iter().all(|r| r.len() == 3));
        let mut a = Vec::new();
        write_map_axes(&mut a, &Header::new().with("gap_hz", 80.0), &map).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
        assert_eq!(v["delta_axis"].as_array().unwrap().len(), 3);
        assert_eq!(v["metadata"]["gap_hz"], "80");
        assert_eq!(v["j_norm"], 40.0);
    }
}
