//! Levenberg–Marquardt with Marquardt diagonal scaling and box projection.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub trait LeastSquares {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn param_name(&self, i: usize) -> String;
    fn residuals(&self, x: &[f64], r: &mut [f64]);
    /// Full m×n Jacobian ∂rᵢ/∂xⱼ.
    fn jacobian(&self, x: &[f64], jac: &mut DMatrix<f64>);
    /// Maps x back into the feasible set.
    fn project(&self, _x: &mut [f64]) {}
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    pub xtol: f64,
    pub ftol: f64,
    /// Singular-value ratio below which the problem is rank deficient.
    pub rank_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions { max_iter: 200, xtol: 1e-10, ftol: 1e-12, rank_tol: 1e-12 }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub x: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Covariance of the free parameters (in `free` order), s²(JᵀJ)⁻¹.
    pub covariance: Option<DMatrix<f64>>,
    /// Residual norms after each accepted step.
    pub history: Vec<f64>,
}

pub fn minimize<P: LeastSquares>(problem: &P, x0: &[f64], free: &[bool], opts: &LmOptions) -> Result<LmReport> {
    let n_all = problem.n_params();
    let m = problem.n_residuals();
    assert_eq!(x0.len(), n_all);
    assert_eq!(free.len(), n_all);
    let idx: Vec<usize> = (0..n_all).filter(|&i| free[i]).collect();
    let n = idx.len();
    let mut x = x0.to_vec();
    problem.project(&mut x);
    let mut r = vec![0.0; m];
    problem.residuals(&x, &mut r);
    let mut cost = sq(&r);
    let mut history = vec![cost.sqrt()];
    if n == 0 {
        return Ok(LmReport { x, residual_norm: cost.sqrt(), iterations: 0, converged: true, covariance: None, history });
    }

    let mut full = DMatrix::zeros(m, n_all);
    let mut jac = DMatrix::zeros(m, n);
    let fill = |x: &[f64], full: &mut DMatrix<f64>, jac: &mut DMatrix<f64>| {
        problem.jacobian(x, full);
        for (k, &i) in idx.iter().enumerate() {
            jac.set_column(k, &full.column(i));
        }
    };
    fill(&x, &mut full, &mut jac);
    check_rank(problem, &jac, &idx, opts.rank_tol)?;

    let mut lambda = 1e-3;
    let mut nu = 2.0;
    let mut diag_max = DVector::<f64>::zeros(n);
    let mut converged = false;
    let mut iterations = 0;
    let mut x_new = x.clone();
    let mut r_new = vec![0.0; m];

    while iterations < opts.max_iter {
        iterations += 1;
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &rv;
        for k in 0..n {
            diag_max[k] = diag_max[k].max(jtj[(k, k)]).max(1e-300);
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += lambda * diag_max[k];
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    lambda *= nu;
                    nu *= 2.0;
                    continue;
                }
            };
            x_new.copy_from_slice(&x);
            for (k, &i) in idx.iter().enumerate() {
                x_new[i] += step[k];
            }
            problem.project(&mut x_new);
            problem.residuals(&x_new, &mut r_new);
            let cost_new = sq(&r_new);
            let actual = cost - cost_new;
            let mut dx = DVector::zeros(n);
            for (k, &i) in idx.iter().enumerate() {
                dx[k] = x_new[i] - x[i];
            }
            let predicted = -(2.0 * g.dot(&dx) + (&jac * &dx).norm_squared());
            if cost_new.is_finite() && actual >= 0.0 && (actual > 0.0 || cost_new == 0.0 || dx.norm() == 0.0) {
                let rho = if predicted > 0.0 { actual / predicted } else { 1.0 };
                lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                nu = 2.0;
                let scaled_step = dx.iter().zip(diag_max.iter()).map(|(d, s)| (d * s.sqrt()).powi(2)).sum::<f64>().sqrt();
                let scaled_x = idx
                    .iter()
                    .zip(diag_max.iter())
                    .map(|(&i, s)| (x_new[i] * s.sqrt()).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let small_step = scaled_step <= opts.xtol * scaled_x.max(1e-300);
                let small_change = actual <= opts.ftol * cost;
                x.copy_from_slice(&x_new);
                r.copy_from_slice(&r_new);
                cost = cost_new;
                history.push(cost.sqrt());
                fill(&x, &mut full, &mut jac);
                accepted = true;
                if small_step || small_change || cost == 0.0 {
                    converged = true;
                }
                break;
            }
            lambda *= nu;
            nu *= 2.0;
            if lambda > 1e30 {
                break;
            }
        }
        if converged {
            break;
        }
        if !accepted {
            // no decrease possible along any damped direction: stationary point
            converged = true;
            break;
        }
    }

    let dof = (m as f64 - n as f64).max(1.0);
    let s2 = cost / dof;
    let jtj = jac.transpose() * &jac;
    let covariance = jtj.try_inverse().map(|inv| inv * s2);
    Ok(LmReport { x, residual_norm: cost.sqrt(), iterations, converged, covariance, history })
}

fn sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn check_rank<P: LeastSquares>(problem: &P, jac: &DMatrix<f64>, idx: &[usize], tol: f64) -> Result<()> {
    let n = jac.ncols();
    let mut scaled = jac.clone();
    for k in 0..n {
        let norm = scaled.column(k).norm();
        if norm == 0.0 {
            return Err(Error::RankDeficient { directions: vec![problem.param_name(idx[k])] });
        }
        scaled.column_mut(k).scale_mut(1.0 / norm);
    }
    let svd = scaled.svd(false, true);
    let smax = svd.singular_values.max();
    let v_t = svd.v_t.as_ref().expect("requested V");
    let mut directions = Vec::new();
    for (s_idx, &s) in svd.singular_values.iter().enumerate() {
        if s <= tol * smax {
            let row = v_t.row(s_idx);
            let mut comps: Vec<(usize, f64)> = row.iter().enumerate().map(|(k, v)| (k, v.abs())).collect();
            comps.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let named: Vec<String> = comps
                .iter()
                .take_while(|(_, v)| *v > 0.1)
                .map(|(k, v)| format!("{}({:.2})", problem.param_name(idx[*k]), v))
                .collect();
            directions.push(named.join("+"));
        }
    }
    if directions.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient { directions })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Exponential {
        t: Vec<f64>,
        y: Vec<f64>,
    }

    impl LeastSquares for Exponential {
        fn n_params(&self) -> usize {
            2
        }
        fn n_residuals(&self) -> usize {
            self.t.len()
        }
        fn param_name(&self, i: usize) -> String {
            ["amplitude", "rate"][i].to_string()
        }
        fn residuals(&self, x: &[f64], r: &mut [f64]) {
            for ((ri, t), y) in r.iter_mut().zip(&self.t).zip(&self.y) {
                *ri = x[0] * (-x[1] * t).exp() - y;
            }
        }
        fn jacobian(&self, x: &[f64], jac: &mut DMatrix<f64>) {
            for (i, t) in self.t.iter().enumerate() {
                let e = (-x[1] * t).exp();
                jac[(i, 0)] = e;
                jac[(i, 1)] = -x[0] * t * e;
            }
        }
    }

    fn problem() -> Exponential {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let y = t.iter().map(|t| 2.5 * (-0.7 * t).exp()).collect();
        Exponential { t, y }
    }

    #[test]
    fn recovers_exponential() {
        let rep = minimize(&problem(), &[1.0, 2.0], &[true, true], &LmOptions::default()).unwrap();
        assert!(rep.converged);
        assert!((rep.x[0] - 2.5).abs() < 1e-9);
        assert!((rep.x[1] - 0.7).abs() < 1e-9);
        assert!(rep.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn masked_parameter_stays_fixed() {
        let rep = minimize(&problem(), &[1.0, 0.7], &[true, false], &LmOptions::default()).unwrap();
        assert_eq!(rep.x[1], 0.7);
        assert!((rep.x[0] - 2.5).abs() < 1e-9);
    }

    #[test]
    fn truth_terminates_quickly() {
        let rep = minimize(&problem(), &[2.5, 0.7], &[true, true], &LmOptions::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 2);
    }

    #[test]
    fn degenerate_direction_is_named() {
        struct Sum;
        impl LeastSquares for Sum {
            fn n_params(&self) -> usize {
                2
            }
            fn n_residuals(&self) -> usize {
                5
            }
            fn param_name(&self, i: usize) -> String {
                ["u", "v"][i].to_string()
            }
            fn residuals(&self, x: &[f64], r: &mut [f64]) {
                for (i, ri) in r.iter_mut().enumerate() {
                    *ri = (x[0] + x[1]) * i as f64 - 1.0;
                }
            }
            fn jacobian(&self, _x: &[f64], jac: &mut DMatrix<f64>) {
                for i in 0..5 {
                    jac[(i, 0)] = i as f64;
                    jac[(i, 1)] = i as f64;
                }
            }
        }
        match minimize(&Sum, &[0.0, 0.0], &[true, true], &LmOptions::default()) {
            Err(Error::RankDeficient { directions }) => {
                assert!(directions[0].contains('u') && directions[0].contains('v'));
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }
}
