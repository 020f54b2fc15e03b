//! Dormand–Prince 5(4) with dense output.

use crate::error::{Error, Result};

pub trait OdeSystem<const N: usize> {
    fn rhs(&self, t: f64, y: &[f64; N], dy: &mut [f64; N]);

    /// Largest step allowed when stepping from `t`.
    fn max_step(&self, _t: f64) -> f64 {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub rtol: f64,
    /// Absolute floor of the error scale, in state units.
    pub atol: f64,
    pub max_steps: usize,
    pub h_min: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { rtol: 1e-9, atol: 1e-9, max_steps: 5_000_000, h_min: 1e-14 }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Stats {
    pub accepted: usize,
    pub rejected: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Integrate from `t0` to `t1`, calling `observe(t, y)` at each requested
/// output time in `outputs` (sorted, within [t0, t1]). Returns the state at t1.
pub fn integrate<const N: usize, S: OdeSystem<N>>(
    sys: &S,
    t0: f64,
    y0: [f64; N],
    t1: f64,
    outputs: &[f64],
    tol: &Tolerances,
    stats: &mut Stats,
    mut observe: impl FnMut(f64, &[f64; N]),
) -> Result<[f64; N]> {
    let mut t = t0;
    let mut y = y0;
    let mut out_idx = 0;
    while out_idx < outputs.len() && outputs[out_idx] <= t0 {
        observe(outputs[out_idx], &y);
        out_idx += 1;
    }
    if t1 <= t0 {
        return Ok(y);
    }
    let span = t1 - t0;
    let mut k1 = [0.0; N];
    sys.rhs(t, &y, &mut k1);
    let mut h = initial_step(sys, t, &y, &k1, tol).min(span).min(sys.max_step(t));
    let mut steps = 0;
    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) = ([0.0; N], [0.0; N], [0.0; N], [0.0; N], [0.0; N], [0.0; N]);
    let mut tmp = [0.0; N];
    let mut y1 = [0.0; N];
    let mut last_rejected = false;

    while t < t1 {
        steps += 1;
        if steps > tol.max_steps {
            return Err(Error::Integration { t_last: t, reason: "maximum step count exceeded".into() });
        }
        h = h.min(sys.max_step(t));
        let remaining = t1 - t;
        if h >= remaining || remaining - h < 1e-12 * span {
            h = remaining;
        }
        if h < tol.h_min * span.max(1.0) && h < remaining {
            return Err(Error::Integration { t_last: t, reason: format!("step size {h:e} below minimum") });
        }

        for i in 0..N {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        sys.rhs(t + C2 * h, &tmp, &mut k2);
        for i in 0..N {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        sys.rhs(t + C3 * h, &tmp, &mut k3);
        for i in 0..N {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        sys.rhs(t + C4 * h, &tmp, &mut k4);
        for i in 0..N {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        sys.rhs(t + C5 * h, &tmp, &mut k5);
        for i in 0..N {
            tmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        sys.rhs(t + h, &tmp, &mut k6);
        for i in 0..N {
            y1[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        sys.rhs(t + h, &y1, &mut k7);

        // norm-wise scale, shared by all components
        let scale = tol.atol + tol.rtol * inf_norm(&y).max(inf_norm(&y1));
        let mut err = 0.0;
        for i in 0..N {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            err += (e / scale).powi(2);
        }
        let err = (err / N as f64).sqrt();
        if !err.is_finite() {
            return Err(Error::Integration { t_last: t, reason: "non-finite state".into() });
        }

        if err <= 1.0 {
            stats.accepted += 1;
            let t_new = t + h;
            while out_idx < outputs.len() && outputs[out_idx] <= t_new {
                let theta = ((outputs[out_idx] - t) / h).clamp(0.0, 1.0);
                let th1 = 1.0 - theta;
                for i in 0..N {
                    let r2 = y1[i] - y[i];
                    let r3 = h * k1[i] - r2;
                    let r4 = r2 - h * k7[i] - r3;
                    let r5 = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
                    tmp[i] = y[i] + theta * (r2 + th1 * (r3 + theta * (r4 + th1 * r5)));
                }
                observe(outputs[out_idx], &tmp);
                out_idx += 1;
            }
            t = if t1 - t_new < 1e-12 * span { t1 } else { t_new };
            y = y1;
            k1 = k7;
            let mut fac = 0.9 * err.max(1e-10).powf(-0.2);
            fac = fac.clamp(0.2, 5.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h *= fac;
            last_rejected = false;
        } else {
            stats.rejected += 1;
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            last_rejected = true;
        }
    }
    while out_idx < outputs.len() && outputs[out_idx] <= t1 + 1e-15 * t1.abs() {
        observe(outputs[out_idx], &y);
        out_idx += 1;
    }
    Ok(y)
}

fn inf_norm<const N: usize>(v: &[f64; N]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn initial_step<const N: usize, S: OdeSystem<N>>(sys: &S, t: f64, y: &[f64; N], f0: &[f64; N], tol: &Tolerances) -> f64 {
    let scale = tol.atol + tol.rtol * inf_norm(y);
    let d0 = inf_norm(y) / scale;
    let d1 = inf_norm(f0) / scale;
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let mut y1 = [0.0; N];
    for i in 0..N {
        y1[i] = y[i] + h0 * f0[i];
    }
    let mut f1 = [0.0; N];
    sys.rhs(t + h0, &y1, &mut f1);
    let mut d2 = 0.0f64;
    for i in 0..N {
        d2 = d2.max((f1[i] - f0[i]).abs());
    }
    let d2 = d2 / scale / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1)
}
