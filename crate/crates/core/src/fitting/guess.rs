//! Seeding for the readout fit: periodogram peaks, matched-filter scans over
//! the chirped alkali phase, and a log-envelope decay estimate.

use num_complex::Complex64;

use super::{linear_amplitudes, phase_factor, FitMask, Param, ReadoutModel};
use crate::error::{Error, Result};
use crate::physics::angular;

const P_GRID: usize = 20;
/// Scan step in units of 1/T.
const SCAN_STEP: f64 = 0.25;
const REFINE_SPAN: f64 = 0.3;

fn golden_max(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Grid search on [lo, hi] followed by golden refinement around the best cell.
fn scan_max(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> f64 {
    let n = (((hi - lo) / step).ceil() as usize).clamp(8, 20_000);
    let h = (hi - lo) / n as f64;
    let (mut best, mut best_v) = (lo, f64::NEG_INFINITY);
    for k in 0..=n {
        let x = lo + k as f64 * h;
        let v = f(x);
        if v > best_v {
            best = x;
            best_v = v;
        }
    }
    golden_max(f, (best - h).max(lo), (best + h).min(hi), 40)
}

/// |Σ y·w·e^{−iφ}|² for a decay weight w = e^{−2πγτ}.
fn matched_power(tau: &[f64], y: &[f64], gamma: f64, phase: impl Fn(usize, f64) -> f64) -> f64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for (k, (&t, &v)) in tau.iter().zip(y).enumerate() {
        let w = (-angular(gamma) * t).exp();
        let (s, c) = phase(k, t).sin_cos();
        acc += Complex64::new(c, -s) * (v * w);
    }
    acc.norm_sqr()
}

fn plain_power(tau: &[f64], y: &[f64], gamma: f64, f: f64) -> f64 {
    matched_power(tau, y, gamma, |_, t| angular(f) * t)
}

/// Decay-weighted mean of ω_a/ω₀ over the window.
fn mean_ratio(tau: &[f64], p: f64, gamma_p_tilde: f64, gamma_a: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &t in tau {
        let w = (-2.0 * angular(gamma_a) * t).exp();
        num += w * super::eval_omega_a(1.0, p, gamma_p_tilde, t);
        den += w;
    }
    num / den
}

/// Re-seeds ω₀ and p_a from a matched-filter scan, given an estimate of the
/// weighted-mean alkali frequency.
fn scan_alkali(m: &mut ReadoutModel, tau: &[f64], y: &[f64], mask: &FitMask, f_mean: f64) {
    let fix_w = mask.is_fixed(Param::Omega0);
    let fix_p = mask.is_fixed(Param::PaT);
    if fix_w && fix_p {
        return;
    }
    let window = tau.last().unwrap() - tau[0];
    let ps: Vec<f64> = if fix_p {
        vec![m.p_a_t]
    } else {
        let mut v: Vec<f64> = (1..=P_GRID).map(|k| k as f64 / P_GRID as f64).collect();
        v.push(m.p_a_t);
        v
    };
    let (mut best_p, mut best_w, mut best_v) = (m.p_a_t, m.omega_0, f64::NEG_INFINITY);
    for &p in &ps {
        let phi1: Vec<f64> = tau.iter().map(|&t| phase_factor(p, m.gamma_p_tilde, t).0).collect();
        let score = |w0: f64| matched_power(tau, y, m.gamma_a, |k, _| angular(w0) * phi1[k]);
        let w0 = if fix_w {
            m.omega_0
        } else {
            let r = mean_ratio(tau, p, m.gamma_p_tilde, m.gamma_a);
            let c = f_mean / r;
            let span = 3.0 / (window * r);
            scan_max(&score, (c - span).max(0.0), c + span, SCAN_STEP / (window * r))
        };
        let v = score(w0);
        if v > best_v {
            best_v = v;
            best_p = p;
            best_w = w0;
        }
    }
    m.p_a_t = best_p;
    m.omega_0 = best_w;
}

fn scan_noble(m: &mut ReadoutModel, tau: &[f64], y: &[f64], mask: &FitMask, lo: f64, hi: f64) {
    if mask.is_fixed(Param::OmegaB) {
        return;
    }
    // residual after removing the alkali component
    let mut alkali = *m;
    alkali.sigma_b = Complex64::new(0.0, 0.0);
    let resid: Vec<f64> = super::eval_readout_model(&alkali, tau).iter().zip(y).map(|(a, v)| v - a).collect();
    let window = tau.last().unwrap() - tau[0];
    m.omega_b = scan_max(&|f| plain_power(tau, &resid, m.gamma_b, f), lo.max(0.0), hi, SCAN_STEP / window);
}

fn amplitudes(m: &ReadoutModel, tau: &[f64], y: &[f64], mask: &FitMask) -> ReadoutModel {
    linear_amplitudes(m, tau, y, mask).0
}

/// Improves a supplied guess: re-locates both frequencies within ±30% and
/// re-solves the complex amplitudes.
pub(crate) fn refine(g: &ReadoutModel, tau: &[f64], y: &[f64], mask: &FitMask) -> ReadoutModel {
    let mut m = *g;
    let window = tau.last().unwrap() - tau[0];
    if !mask.is_fixed(Param::Omega0) || !mask.is_fixed(Param::PaT) {
        let r = mean_ratio(tau, m.p_a_t, m.gamma_p_tilde, m.gamma_a);
        let f0 = m.omega_0 * r;
        let f_mean = scan_max(
            &|f| plain_power(tau, y, m.gamma_a, f),
            f0 * (1.0 - REFINE_SPAN),
            f0 * (1.0 + REFINE_SPAN),
            SCAN_STEP / window,
        );
        scan_alkali(&mut m, tau, y, mask, f_mean);
    }
    m = amplitudes(&m, tau, y, mask);
    let wb = m.omega_b;
    scan_noble(&mut m, tau, y, mask, wb * (1.0 - REFINE_SPAN), wb * (1.0 + REFINE_SPAN));
    amplitudes(&m, tau, y, mask)
}

/// Damped log-envelope slope of the component near `f`, in Hz.
fn envelope_decay(tau: &[f64], y: &[f64], f: f64) -> f64 {
    let window = tau.last().unwrap() - tau[0];
    let chunk_t = (4.0 / f.max(1.0)).max(window / 40.0);
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let mut start = 0;
    while start < tau.len() {
        let mut end = start;
        while end < tau.len() && tau[end] - tau[start] < chunk_t {
            end += 1;
        }
        if end - start < 4 {
            break;
        }
        let seg_t = &tau[start..end];
        let seg_y = &y[start..end];
        let amp = plain_power(seg_t, seg_y, 0.0, f).sqrt() * 2.0 / (end - start) as f64;
        pts.push((0.5 * (seg_t[0] + seg_t[seg_t.len() - 1]), amp.max(1e-300).ln()));
        start = end;
    }
    if pts.len() < 3 {
        return 0.0;
    }
    let top = pts[0].1;
    let used: Vec<(f64, f64)> = pts.iter().copied().take_while(|p| p.1 > top - 2.0).collect();
    if used.len() < 3 {
        return 0.0;
    }
    let n = used.len() as f64;
    let mt = used.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = used.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = used.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    let sxx: f64 = used.iter().map(|p| (p.0 - mt).powi(2)).sum();
    (-sxy / sxx / angular(1.0)).max(0.0)
}

fn spectrum(tau: &[f64], y: &[f64], df: f64, nf: usize) -> Vec<f64> {
    (0..=nf).map(|k| plain_power(tau, y, 0.0, k as f64 * df)).collect()
}

/// Strongest local maximum at least `min_sep` bins away from `exclude`,
/// refined by parabolic interpolation.
fn strongest_peak(power: &[f64], df: f64, exclude: Option<(usize, usize)>) -> Option<(usize, f64)> {
    let k = (1..power.len() - 1)
        .filter(|&k| power[k] > power[k - 1] && power[k] >= power[k + 1])
        .filter(|&k| exclude.is_none_or(|(e, sep)| k.abs_diff(e) >= sep))
        .max_by(|&a, &b| power[a].total_cmp(&power[b]))?;
    let (a, b, c) = (power[k - 1], power[k], power[k + 1]);
    let d = a - 2.0 * b + c;
    let shift = if d != 0.0 { 0.5 * (a - c) / d } else { 0.0 };
    Some((k, (k as f64 + shift.clamp(-0.5, 0.5)) * df))
}

/// Chirped alkali component alone near the periodogram peak `f`.
fn alkali_only(tau: &[f64], y: &[f64], gamma_p_tilde: f64, mask: &FitMask, f: f64, df: f64) -> ReadoutModel {
    let mut m = ReadoutModel {
        sigma_a: Complex64::new(0.0, 0.0),
        sigma_b: Complex64::new(0.0, 0.0),
        gamma_a: envelope_decay(tau, y, f),
        gamma_b: 0.0,
        omega_0: f * 1.5,
        omega_b: 0.0,
        p_a_t: 0.5,
        gamma_p_tilde,
    };
    let f_mean = scan_max(&|x| plain_power(tau, y, m.gamma_a, x), f - 2.0 * df, f + 2.0 * df, df / 8.0);
    scan_alkali(&mut m, tau, y, mask, f_mean);
    let only_a = mask.fix(Param::ReSigmaB).fix(Param::ImSigmaB);
    amplitudes(&m, tau, y, &only_a)
}

/// Initial guess from the two dominant spectral lines. The strongest line is
/// fitted first; the second is the strongest line of the residual. The
/// higher-frequency line is taken as the alkali.
pub fn auto_guess(tau: &[f64], y: &[f64], gamma_p_tilde: f64, mask: &FitMask) -> Result<ReadoutModel> {
    let n = tau.len();
    let window = tau[n - 1] - tau[0];
    let f_nyq = 0.5 * (n - 1) as f64 / window;
    let df = SCAN_STEP / window;
    let nf = (f_nyq / df) as usize;
    let min_sep = (4.0 / SCAN_STEP) as usize;
    let no_peak = || Error::Parse("signal has no spectral peak".into());

    let (k1, f1) = strongest_peak(&spectrum(tau, y, df, nf), df, None).ok_or_else(no_peak)?;
    let first = alkali_only(tau, y, gamma_p_tilde, mask, f1, df);
    let resid: Vec<f64> = super::eval_readout_model(&first, tau).iter().zip(y).map(|(a, v)| v - a).collect();
    let f2 = strongest_peak(&spectrum(tau, &resid, df, nf), df, Some((k1, min_sep))).map_or(f1 / 20.0, |p| p.1);

    let (mut m, f_b) = if f2 > f1 { (alkali_only(tau, y, gamma_p_tilde, mask, f2, df), f1) } else { (first, f2) };
    m.omega_b = f_b;
    m = amplitudes(&m, tau, y, mask);
    scan_noble(&mut m, tau, y, mask, f_b - 4.0 * df, f_b + 4.0 * df);
    Ok(amplitudes(&m, tau, y, mask))
}
