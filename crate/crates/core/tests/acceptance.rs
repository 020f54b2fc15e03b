//! Acceptance run: one line per criterion, then supplementary checks.
//! Exits nonzero on failure only when SPINEX_ACCEPTANCE_STRICT=1.

mod common;

use std::time::Instant;

use common::*;
use spinex::pipeline::{exchange_scan, regime_traces, sweep, ScanOptions};
use spinex::physics::{effective_fields, PolarizationState};
use spinex::presets::load;
use spinex::spectral::{extract_gap, mirror_branch_fraction};
use spinex::two_mode::{return_fraction, TwoModeSystem};

struct Report {
    passed: usize,
    failed: Vec<String>,
}

impl Report {
    fn check(&mut self, id: &str, title: &str, run: impl FnOnce() -> (bool, String)) {
        let start = Instant::now();
        let (ok, detail) = run();
        println!("{} [{id}] {title}: {detail}  ({:.1} s)", if ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
        if ok {
            self.passed += 1;
        } else {
            self.failed.push(id.to_string());
        }
    }
}

fn within(v: f64, target: f64, rel: f64) -> bool {
    (v / target - 1.0).abs() <= rel
}

fn revival_check(preset: &spinex::presets::Preset) -> (bool, String) {
    let t = preset.scan.unwrap().t_values().unwrap();
    let scan = exchange_scan(preset, &t, &ScanOptions::default()).unwrap();
    match scan.first_revival() {
        Some(r) => (
            within(r.t, 6.5e-3, 0.15) && (r.contrast - 0.75).abs() <= 0.10,
            format!(
                "revival at {:.2} ms (6.5 ms ± 15%), contrast {:.1}% (75 ± 10 pp), {} failed points",
                r.t * 1e3,
                r.contrast * 100.0,
                scan.failed.len()
            ),
        ),
        None => (false, format!("no revival found, {} failed points", scan.failed.len())),
    }
}

fn main() {
    let mut rep = Report { passed: 0, failed: Vec::new() };
    let total = Instant::now();

    rep.check("1", "exchange revival", || revival_check(&paper()));

    rep.check("2", "conservation with losses off", || {
        let (spread, failed) = total_spread(&lossless_preset(), &lossless_times());
        (spread < 0.02 && failed == 0, format!("max |n_a+n_b|/mean − 1 = {:.2}% (< 2%), {failed} failed points", spread * 100.0))
    });

    rep.check("3", "detuned decay rate", || {
        let tr = regime_traces(&load("fig3b_detuned").unwrap()).unwrap();
        match tr[0].envelope_rate() {
            Some(r) => ((r - 14.6).abs() <= 2.0, format!("envelope rate {r:.2} Hz (14.6 ± 2 Hz) at Δ = {:.1} Hz", tr[0].delta)),
            None => (false, "envelope never reached 1/e".into()),
        }
    });

    rep.check("4", "overdamped elongation", || {
        let tr = regime_traces(&load("fig3c_overdamped").unwrap()).unwrap();
        let (res, det) = if tr[0].delta.abs() < tr[1].delta.abs() { (&tr[0], &tr[1]) } else { (&tr[1], &tr[0]) };
        match (res.decay_time(0.01), det.decay_time(0.01)) {
            (Some(a), Some(b)) => (
                a / b > 1.3,
                format!("1% decay time resonant {:.2} ms / detuned {:.2} ms = {:.2} (> 1.3)", a * 1e3, b * 1e3, a / b),
            ),
            _ => (false, "a trace did not decay below 1%".into()),
        }
    });

    rep.check("5", "critical-damping return fraction", || {
        let sys = TwoModeSystem::with_detuning(0.0, 1.0, 0.78).unwrap();
        let f = return_fraction(&sys).unwrap();
        (f <= 0.01 && (f - 0.005).abs() <= 0.005, format!("{:.3}% returns after one period (≤ 1%, 0.5 ± 0.5 pp)", f * 100.0))
    });

    rep.check("6", "avoided-crossing gap and perpendicular branches", || {
        let map = sweep(&load("fig4_sweep").unwrap()).unwrap();
        let tilted = sweep(&load("fig4_misaligned").unwrap()).unwrap();
        let gap = extract_gap(&map);
        let (fa, fm) = (mirror_branch_fraction(&map), mirror_branch_fraction(&tilted));
        let j_gap = gap.as_ref().map(|g| g / 2.0).unwrap_or(f64::NAN);
        let ok = within(j_gap, 47.0, 0.15) && within(map.j_norm, 47.0, 0.15) && fa.is_some_and(|f| f <= 0.1) && fm.is_some_and(|f| f >= 0.5);
        (
            ok,
            format!(
                "gap/2 = {j_gap:.1} Hz, time-averaged J = {:.1} Hz (47 Hz ± 15%); perpendicular-branch fraction aligned {} (≤ 0.1), misaligned {} (≥ 0.5)",
                map.j_norm,
                fa.map_or("n/a".into(), |f| format!("{f:.2}")),
                fm.map_or("n/a".into(), |f| format!("{f:.2}")),
            ),
        )
    });

    rep.check("7", "effective fields", || {
        let (b_ab, b_ba) = effective_fields(&paper().species, &PolarizationState::new(0.98, 0.3).unwrap()).unwrap();
        (
            within(b_ab * 1e3, -0.24, 0.15) && within(b_ba * 1e3, -10.94, 0.15),
            format!("B_a→b = {:.3} mG (−0.24 ± 15%), B_b→a = {:.2} mG (−10.94 ± 15%)", b_ab * 1e3, b_ba * 1e3),
        )
    });

    rep.check("8", "fit round trip and chirp-rate insensitivity", || {
        let rt = round_trip(200, 2024);
        let sens = chirp_rate_sensitivity(&SENSITIVITY_TIMES);
        (
            rt.ok >= 190 && rt.silent.is_empty() && sens < 0.02,
            format!(
                "{}/200 recovered to 1e-4 (≥ 95%), {} flagged, {} silent; amplitude change under Γ̃_p ± 50% = {:.2}% (< 2%)",
                rt.ok,
                rt.flagged,
                rt.silent.len(),
                sens * 100.0
            ),
        )
    });

    rep.check("9", "two-mode oracle and excitation conservation", || {
        let dev = oracle_deviation(100, 9, &spinex::bloch_sim::GridSpec::default());
        let drift = weighted_excitation_drift(20, 10);
        (dev < 1e-6 && drift < 1e-8, format!("worst deviation over 100 draws {dev:.2e} (< 1e-6), weighted drift {drift:.2e} (< 1e-8)"))
    });

    println!("-- supplementary --");

    for ramp in [0.0, 500e-6] {
        rep.check(&format!("S-ramp-{:.0}us", ramp * 1e6), "revival with a different ramp", || {
            let mut p = paper();
            p.protocol.as_mut().unwrap().ramp_duration = ramp;
            revival_check(&p)
        });
    }

    rep.check("S-pipeline", "reconstructed/direct n_a", || {
        let times = [0.0, 5e-3, 11e-3, 20e-3, 30e-3];
        let ratios = pipeline_ratios(&paper(), &times);
        let text: Vec<String> = times.iter().zip(&ratios).map(|(t, r)| format!("{:.0} ms {r:.3}", t * 1e3)).collect();
        (ratios.iter().all(|r| (r - 1.0).abs() <= 0.05), format!("{} (each within 5%)", text.join(", ")))
    });

    rep.check("S-N0", "initial excitation count", || {
        let scan = exchange_scan(&paper(), &[0.0], &ScanOptions::default()).unwrap();
        let n0 = scan.records[0].total();
        ((n0 - 13.2e13).abs() <= 0.6e13, format!("N0 = {:.2}e13 ((13.2 ± 0.6)e13)", n0 / 1e13))
    });

    rep.check("S-pa", "fitted readout polarization at 11 ms", || {
        let (fit, injected) = fitted_polarization(&paper(), 11e-3);
        (within(fit, injected, 0.05), format!("fitted p_a {fit:.3} vs injected {injected:.3} (± 5%)"))
    });

    println!(
        "{} passed, {} failed{}  (total {:.1} s)",
        rep.passed,
        rep.failed.len(),
        if rep.failed.is_empty() { String::new() } else { format!(": {}", rep.failed.join(", ")) },
        total.elapsed().as_secs_f64()
    );
    if !rep.failed.is_empty() && std::env::var("SPINEX_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
