//! Targeted maximum likelihood estimation of the ATT.
//!
//! The outcome is min-max scaled to `[0, 1]` and the initial predictions are
//! fluctuated on the logit scale along the ATT clever covariate
//! `H(1, X) = 1 / P(Z = 1)`, `H(0, X) = −ps / (P(Z = 1)(1 − ps))` by a
//! no-intercept logistic regression with offset. The plug-in ATT averages
//! the updated contrast over treated units, which makes the second term of
//! the efficient influence function vanish identically; the fluctuation
//! solves the first.

use crate::error::{Error, Result};
use crate::propensity::PsVector;
use crate::stats::{expit, logit, mean, normal_two_sided_p, sample_sd};

/// Initial scaled predictions are clamped into `[Q_CLAMP, 1 − Q_CLAMP]`.
pub const Q_CLAMP: f64 = 1e-4;
pub const MAX_TARGETING_ROUNDS: usize = 10;
/// Targeting stops once |mean EIF| (outcome units) drops below this.
pub const EIF_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TmleFit {
    pub att: f64,
    pub theoretical_se: f64,
    pub p_value: f64,
    /// One fluctuation parameter per targeting round.
    pub fluctuation_eps: Vec<f64>,
    /// Efficient influence function per analysed unit, in outcome units.
    pub eif_values: Vec<f64>,
    pub y_bounds: (f64, f64),
    pub converged: bool,
}

/// Root of `Σ hᵢ (yᵢ − expit(oᵢ + ε hᵢ))`, which is strictly decreasing in ε.
fn solve_fluctuation(y: &[f64], offset: &[f64], h: &[f64]) -> Option<f64> {
    let score = |eps: f64| -> (f64, f64) {
        let mut s = 0.0;
        let mut ds = 0.0;
        for i in 0..y.len() {
            let p = expit(offset[i] + eps * h[i]);
            s += h[i] * (y[i] - p);
            ds -= h[i] * h[i] * p * (1.0 - p);
        }
        (s, ds)
    };
    let tol = 1e-13 * y.len() as f64;
    let (s0, _) = score(0.0);
    if s0.abs() <= tol {
        return Some(0.0);
    }
    // bracket the root
    let dir = s0.signum();
    let mut step = 1e-3;
    let (mut lo, mut hi) = (0.0_f64, 0.0_f64);
    loop {
        let probe = dir * step;
        if score(probe).0.signum() != dir {
            if dir > 0.0 {
                hi = probe;
            } else {
                lo = probe;
            }
            break;
        }
        if dir > 0.0 {
            lo = probe;
        } else {
            hi = probe;
        }
        step *= 4.0;
        if step > 1e6 {
            return None;
        }
    }
    // safeguarded Newton inside [lo, hi]
    let mut eps = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (s, ds) = score(eps);
        if s.abs() <= tol {
            return Some(eps);
        }
        if s > 0.0 {
            lo = eps;
        } else {
            hi = eps;
        }
        let newton = if ds < 0.0 { eps - s / ds } else { f64::NAN };
        eps = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-15 * (1.0 + eps.abs()) {
            return Some(eps);
        }
    }
    Some(eps)
}

/// TMLE of the ATT from initial counterfactual predictions and (truncated)
/// propensity scores. Only units kept by the ps mask are analysed.
pub fn tmle_att(y: &[f64], z: &[u8], q1: &[f64], q0: &[f64], ps: &PsVector) -> Result<TmleFit> {
    let n_all = z.len();
    for len in [y.len(), q1.len(), q0.len(), ps.len()] {
        if len != n_all {
            return Err(Error::DimensionMismatch { expected: n_all, got: len });
        }
    }
    let idx: Vec<usize> = (0..n_all).filter(|&i| ps.kept[i]).collect();
    let n = idx.len();
    let n_treated = idx.iter().filter(|&&i| z[i] == 1).count();
    if n_treated == 0 || n_treated == n {
        return Err(Error::OneClass);
    }
    if idx.iter().any(|&i| !(ps.values[i] > 0.0 && ps.values[i] < 1.0)) {
        return Err(Error::DegeneratePs);
    }

    let y_min = idx.iter().map(|&i| y[i]).fold(f64::INFINITY, f64::min);
    let y_max = idx.iter().map(|&i| y[i]).fold(f64::NEG_INFINITY, f64::max);
    let range = y_max - y_min;
    if !(range > 0.0) {
        return Err(Error::FlatOutcome);
    }
    let scale = |v: f64| (v - y_min) / range;
    let ys: Vec<f64> = idx.iter().map(|&i| scale(y[i])).collect();
    let treated: Vec<bool> = idx.iter().map(|&i| z[i] == 1).collect();
    let init_logit = |v: f64| logit(scale(v).clamp(Q_CLAMP, 1.0 - Q_CLAMP));
    let mut l1: Vec<f64> = idx.iter().map(|&i| init_logit(q1[i])).collect();
    let mut l0: Vec<f64> = idx.iter().map(|&i| init_logit(q0[i])).collect();

    let p_treat = n_treated as f64 / n as f64;
    let h1 = 1.0 / p_treat;
    let h0: Vec<f64> = idx
        .iter()
        .map(|&i| -ps.values[i] / (p_treat * (1.0 - ps.values[i])))
        .collect();
    let h: Vec<f64> = (0..n).map(|k| if treated[k] { h1 } else { h0[k] }).collect();

    // mean of H (Y − Q_Z) in outcome units
    let residual_term = |l1: &[f64], l0: &[f64]| -> f64 {
        let s: f64 = (0..n)
            .map(|k| {
                let q = expit(if treated[k] { l1[k] } else { l0[k] });
                h[k] * (ys[k] - q)
            })
            .sum();
        range * s / n as f64
    };

    let mut fluctuation_eps = Vec::new();
    let mut converged = false;
    for _ in 0..MAX_TARGETING_ROUNDS {
        let offset: Vec<f64> = (0..n).map(|k| if treated[k] { l1[k] } else { l0[k] }).collect();
        let Some(eps) = solve_fluctuation(&ys, &offset, &h) else {
            break;
        };
        fluctuation_eps.push(eps);
        for k in 0..n {
            l1[k] += eps * h1;
            l0[k] += eps * h0[k];
        }
        if residual_term(&l1, &l0).abs() < EIF_TOL {
            converged = true;
            break;
        }
    }

    let contrast: Vec<f64> = (0..n).map(|k| expit(l1[k]) - expit(l0[k])).collect();
    let tau_scaled = (0..n).filter(|&k| treated[k]).map(|k| contrast[k]).sum::<f64>() / n_treated as f64;
    let eif_values: Vec<f64> = (0..n)
        .map(|k| {
            let qz = expit(if treated[k] { l1[k] } else { l0[k] });
            let mut d = h[k] * (ys[k] - qz);
            if treated[k] {
                d += (contrast[k] - tau_scaled) / p_treat;
            }
            range * d
        })
        .collect();
    let att = range * tau_scaled;
    let se = sample_sd(&eif_values) / (n as f64).sqrt();
    let converged = converged && mean(&eif_values).abs() < EIF_TOL;
    Ok(TmleFit {
        att,
        theoretical_se: se,
        p_value: if se > 0.0 { normal_two_sided_p(att / se) } else { f64::NAN },
        fluctuation_eps,
        eif_values,
        y_bounds: (y_min, y_max),
        converged,
    })
}
