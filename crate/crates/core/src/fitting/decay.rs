//! Multi-exponential fit of a recovered p_a(t) series.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lm::{self, LeastSquares, LmOptions};
use crate::error::{invalid, Error, Result};
use crate::physics::{ExpTerm, PolarizationDecayModel};

const RATE_CANDIDATES: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Terms ordered fastest first.
    pub model: PolarizationDecayModel,
    /// (weight, rate) standard errors, same order as the terms.
    pub std_errors: Vec<(f64, f64)>,
    pub residuals: Vec<f64>,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

struct MultiExp<'a> {
    t: &'a [f64],
    p: &'a [f64],
    n_terms: usize,
}

impl LeastSquares for MultiExp<'_> {
    fn n_params(&self) -> usize {
        2 * self.n_terms
    }

    fn n_residuals(&self) -> usize {
        self.t.len()
    }

    fn param_name(&self, i: usize) -> String {
        format!("{}_{}", if i.is_multiple_of(2) { "weight" } else { "rate" }, i / 2)
    }

    fn residuals(&self, x: &[f64], r: &mut [f64]) {
        for ((ri, &t), &p) in r.iter_mut().zip(self.t).zip(self.p) {
            *ri = x.chunks(2).map(|c| c[0] * (-c[1] * t).exp()).sum::<f64>() - p;
        }
    }

    fn jacobian(&self, x: &[f64], jac: &mut DMatrix<f64>) {
        for (row, &t) in self.t.iter().enumerate() {
            for (k, c) in x.chunks(2).enumerate() {
                let e = (-c[1] * t).exp();
                jac[(row, 2 * k)] = e;
                jac[(row, 2 * k + 1)] = -c[0] * t * e;
            }
        }
    }

    fn project(&self, x: &mut [f64]) {
        for v in x.iter_mut() {
            *v = v.max(0.0);
        }
        let total: f64 = x.iter().step_by(2).sum();
        if total > 1.0 {
            for w in x.iter_mut().step_by(2) {
                *w /= total;
            }
        }
    }
}

/// Weights by linear least squares for fixed rates; returns (weights, rss).
fn weights_for(t: &[f64], p: &[f64], rates: &[f64]) -> Option<(Vec<f64>, f64)> {
    let a = DMatrix::from_fn(t.len(), rates.len(), |i, k| (-rates[k] * t[i]).exp());
    let b = DVector::from_column_slice(p);
    let w = a.clone().svd(true, true).solve(&b, 1e-13).ok()?;
    if w.iter().any(|v| *v < 0.0) {
        return None;
    }
    let rss = (a * &w - b).norm_squared();
    Some((w.iter().copied().collect(), rss))
}

/// Greedy seed: add one rate at a time from a log-spaced candidate set.
fn seed(t: &[f64], p: &[f64], n_terms: usize) -> Vec<f64> {
    let span = t.last().unwrap() - t[0];
    let dt = t.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let (lo, hi) = (0.1 / span, 0.5 / dt);
    let cands: Vec<f64> =
        (0..RATE_CANDIDATES).map(|k| lo * (hi / lo).powf(k as f64 / (RATE_CANDIDATES - 1) as f64)).collect();
    let mut rates: Vec<f64> = Vec::new();
    for _ in 0..n_terms {
        let mut best: Option<(f64, f64)> = None;
        for &c in &cands {
            if rates.iter().any(|r| (r / c - 1.0).abs() < 1e-9) {
                continue;
            }
            let mut trial = rates.clone();
            trial.push(c);
            if let Some((_, rss)) = weights_for(t, p, &trial) {
                if best.is_none_or(|b| rss < b.1) {
                    best = Some((c, rss));
                }
            }
        }
        rates.push(best.map_or(cands[rates.len() % cands.len()], |b| b.0));
    }
    let w = weights_for(t, p, &rates).map_or_else(|| vec![p[0] / n_terms as f64; n_terms], |x| x.0);
    rates.iter().zip(w).flat_map(|(r, w)| [w, *r]).collect()
}

pub fn fit_polarization_decay(t: &[f64], p: &[f64], n_terms: usize) -> Result<DecayFit> {
    if t.len() != p.len() {
        return Err(Error::Alignment(format!("{} times vs {} samples", t.len(), p.len())));
    }
    if n_terms == 0 {
        return Err(invalid("n_terms", "at least one term is required"));
    }
    if t.len() < 2 * n_terms + 2 {
        return Err(invalid("samples", format!("{} samples is too few for {n_terms} terms", t.len())));
    }
    if t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("t", "sample times must be strictly increasing"));
    }
    let problem = MultiExp { t, p, n_terms };
    let x0 = seed(t, p, n_terms);
    let rep = lm::minimize(&problem, &x0, &vec![true; 2 * n_terms], &LmOptions::default())?;

    let mut order: Vec<usize> = (0..n_terms).collect();
    order.sort_by(|&a, &b| rep.x[2 * b + 1].total_cmp(&rep.x[2 * a + 1]));
    let terms: Vec<ExpTerm> = order.iter().map(|&k| ExpTerm { weight: rep.x[2 * k], rate: rep.x[2 * k + 1] }).collect();
    let std_errors = order
        .iter()
        .map(|&k| match &rep.covariance {
            Some(c) => (c[(2 * k, 2 * k)].max(0.0).sqrt(), c[(2 * k + 1, 2 * k + 1)].max(0.0).sqrt()),
            None => (f64::NAN, f64::NAN),
        })
        .collect();
    let mut residuals = vec![0.0; t.len()];
    problem.residuals(&rep.x, &mut residuals);
    Ok(DecayFit {
        model: PolarizationDecayModel::new(terms)?,
        std_errors,
        residuals,
        residual_norm: rep.residual_norm,
        converged: rep.converged,
        iterations: rep.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(n: usize, t_end: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 * t_end / (n - 1) as f64).collect()
    }

    #[test]
    fn recovers_double_exponential() {
        let truth = PolarizationDecayModel::potassium_dark_decay();
        let t = samples(60, 0.14);
        let p: Vec<f64> = t.iter().map(|&x| truth.value(x)).collect();
        let fit = fit_polarization_decay(&t, &p, 2).unwrap();
        assert!(fit.converged);
        for (a, b) in fit.model.terms().iter().zip(truth.terms()) {
            assert!((a.weight / b.weight - 1.0).abs() < 0.02, "{a:?} vs {b:?}");
            assert!((a.rate / b.rate - 1.0).abs() < 0.02, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn single_exponential_exact() {
        let t = samples(30, 0.1);
        let p: Vec<f64> = t.iter().map(|&x| 0.8 * (-25.0 * x).exp()).collect();
        let fit = fit_polarization_decay(&t, &p, 1).unwrap();
        let term = fit.model.terms()[0];
        assert!((term.weight - 0.8).abs() < 1e-9);
        assert!((term.rate - 25.0).abs() < 1e-7);
        assert!(fit.residual_norm < 1e-10);
    }

    #[test]
    fn fitted_model_non_increasing() {
        let t = samples(40, 0.14);
        let p: Vec<f64> = t.iter().map(|&x| 0.5 * (-80.0 * x).exp() + 0.4 * (-8.0 * x).exp() + 0.003 * (x * 300.0).sin()).collect();
        let fit = fit_polarization_decay(&t, &p, 2).unwrap();
        let v: Vec<f64> = t.iter().map(|&x| fit.model.value(x)).collect();
        assert!(v.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn too_few_samples() {
        let t = samples(5, 0.1);
        let p = vec![0.5; 5];
        assert!(fit_polarization_decay(&t, &p, 2).is_err());
    }
}
