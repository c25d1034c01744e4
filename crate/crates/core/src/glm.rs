//! Ordinary least squares and IRLS logistic regression.

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg::{weighted_gram, SpdMatrix};
use crate::stats::{expit, t_two_sided_p};

/// Any coefficient beyond this magnitude is treated as (quasi-)separation.
pub const SEPARATION_BOUND: f64 = 15.0;
/// Fitted probabilities are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-8;
const SCORE_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: Array1<f64>,
    pub coef_standard_errors: Array1<f64>,
    /// RSS / (n − p).
    pub residual_variance: f64,
    pub n: usize,
    pub p: usize,
}

impl OlsFit {
    pub fn predict(&self, design: ArrayView2<f64>) -> Result<Array1<f64>> {
        check_cols(design, self.p)?;
        Ok(design.dot(&self.coefficients))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldTest {
    pub t_statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coefficients: Array1<f64>,
    pub converged: bool,
    /// Set when a coefficient crossed [`SEPARATION_BOUND`] or the information
    /// matrix collapsed mid-iteration.
    pub separated: bool,
    pub n_iterations: usize,
    pub fitted_probabilities: Array1<f64>,
}

impl LogisticFit {
    pub fn predict(&self, design: ArrayView2<f64>) -> Result<Array1<f64>> {
        check_cols(design, self.coefficients.len())?;
        Ok(design.dot(&self.coefficients).mapv(clamped_expit))
    }
}

fn clamped_expit(eta: f64) -> f64 {
    expit(eta).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn check_cols(design: ArrayView2<f64>, p: usize) -> Result<()> {
    if design.ncols() != p {
        return Err(Error::DimensionMismatch { expected: p, got: design.ncols() });
    }
    Ok(())
}

fn check_shape(design: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<()> {
    let (n, p) = design.dim();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if n <= p {
        return Err(Error::InvalidInput(format!("need n > p, got n = {n}, p = {p}")));
    }
    Ok(())
}

pub fn fit_ols(design: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<OlsFit> {
    check_shape(design, y)?;
    let (n, p) = design.dim();
    let xtx = SpdMatrix::new(weighted_gram(design, None)).map_err(|_| Error::RankDeficient)?;
    let xty = design.t().dot(&y);
    let coefficients = xtx.solve(xty.view())?;
    let resid = &y - &design.dot(&coefficients);
    let rss: f64 = resid.iter().map(|r| r * r).sum();
    let residual_variance = rss / (n - p) as f64;
    let inv = xtx.inverse();
    let coef_standard_errors = inv.diag().mapv(|d| (residual_variance * d).max(0.0).sqrt());
    Ok(OlsFit {
        coefficients,
        coef_standard_errors,
        residual_variance,
        n,
        p,
    })
}

/// t-test of a single OLS coefficient against zero, Student-t with n − p df.
pub fn ols_wald_test(fit: &OlsFit, coef_index: usize) -> Result<WaldTest> {
    if coef_index >= fit.p {
        return Err(Error::InvalidInput(format!(
            "coefficient index {coef_index} out of range for p = {}",
            fit.p
        )));
    }
    let se = fit.coef_standard_errors[coef_index];
    if se == 0.0 {
        return Err(Error::ZeroSe);
    }
    let t = fit.coefficients[coef_index] / se;
    Ok(WaldTest {
        t_statistic: t,
        p_value: t_two_sided_p(t, (fit.n - fit.p) as f64),
    })
}

/// Bernoulli log-likelihood at `beta`.
pub fn logistic_log_likelihood(
    design: ArrayView2<f64>,
    y: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> f64 {
    design
        .dot(&beta)
        .iter()
        .zip(y.iter())
        .map(|(&eta, &yi)| {
            // log(1 + e^eta) without overflow
            let softplus = if eta > 0.0 {
                eta + (-eta).exp().ln_1p()
            } else {
                eta.exp().ln_1p()
            };
            yi * eta - softplus
        })
        .sum()
}

/// Gradient of [`logistic_log_likelihood`]: `Xᵀ (y − expit(X beta))`.
pub fn logistic_score(
    design: ArrayView2<f64>,
    y: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> Array1<f64> {
    let resid = &y - &design.dot(&beta).mapv(expit);
    design.t().dot(&resid)
}

/// IRLS maximum likelihood for a logistic model, started at zero.
///
/// Near-separation does not error: the fit stops with `converged = false`,
/// `separated = true` and probabilities clamped away from 0 and 1.
pub fn fit_logistic(
    design: ArrayView2<f64>,
    y: ArrayView1<f64>,
    max_iter: usize,
) -> Result<LogisticFit> {
    check_shape(design, y)?;
    if let Some((i, v)) = y.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
        return Err(Error::InvalidInput(format!("response {v} at {i} is not 0/1")));
    }
    let ones = y.sum();
    if ones == 0.0 || ones == y.len() as f64 {
        return Err(Error::OneClass);
    }

    let p = design.ncols();
    let mut beta = Array1::<f64>::zeros(p);
    let mut ll = logistic_log_likelihood(design, y, beta.view());
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;

    while iterations < max_iter {
        let mu = design.dot(&beta).mapv(expit);
        let score = design.t().dot(&(&y - &mu));
        if score.iter().all(|s| s.abs() < SCORE_TOL) {
            converged = true;
            break;
        }
        let w = mu.mapv(|m| m * (1.0 - m));
        let info = match SpdMatrix::new(weighted_gram(design, Some(w.view()))) {
            Ok(info) => info,
            Err(_) if iterations == 0 => return Err(Error::RankDeficient),
            Err(_) => {
                separated = true;
                break;
            }
        };
        let delta = info.solve(score.view())?;
        iterations += 1;

        // step halving keeps the likelihood monotone
        let mut step = 1.0;
        let mut candidate = &beta + &delta;
        let mut ll_new = logistic_log_likelihood(design, y, candidate.view());
        while ll_new < ll - 1e-12 * ll.abs().max(1.0) && step > 1e-6 {
            step *= 0.5;
            candidate = &beta + &(step * &delta);
            ll_new = logistic_log_likelihood(design, y, candidate.view());
        }
        let moved = (step * &delta).iter().fold(0.0_f64, |m, d| m.max(d.abs()));
        beta = candidate;
        ll = ll_new;

        if beta.iter().any(|b| b.abs() > SEPARATION_BOUND) {
            separated = true;
            break;
        }
        if moved < 1e-14 * (1.0 + beta.iter().fold(0.0_f64, |m, b| m.max(b.abs()))) {
            // numerically stationary; accept if the score is small in relative terms
            let score = logistic_score(design, y, beta.view());
            converged = score.iter().all(|s| s.abs() < 1e-6);
            break;
        }
    }

    let fitted_probabilities = design.dot(&beta).mapv(clamped_expit);
    Ok(LogisticFit {
        coefficients: beta,
        converged: converged && !separated,
        separated,
        n_iterations: iterations,
        fitted_probabilities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn exact_line() {
        let x = array![0.0, 1.0, 2.0, 3.0, 4.0];
        let mut design = Array2::ones((5, 2));
        design.column_mut(1).assign(&x);
        let y = x.mapv(|v| 3.0 + 2.0 * v);
        let fit = fit_ols(design.view(), y.view()).unwrap();
        assert!((fit.coefficients[0] - 3.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
        assert!(fit.residual_variance.abs() < 1e-20);
    }

    #[test]
    fn intercept_only_is_mean() {
        let y = array![1.0, 2.0, 6.0, 7.0];
        let fit = fit_ols(Array2::ones((4, 1)).view(), y.view()).unwrap();
        assert!((fit.coefficients[0] - 4.0).abs() < 1e-12);
        // RSS / (n - p) = (9 + 4 + 4 + 9) / 3
        assert!((fit.residual_variance - 26.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_design_is_rank_deficient() {
        let design = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        let y = array![1.0, 2.0, 3.0];
        assert_eq!(fit_ols(design.view(), y.view()).unwrap_err(), Error::RankDeficient);
    }

    fn fit_with(coef: f64, se: f64, n: usize) -> OlsFit {
        OlsFit {
            coefficients: array![coef],
            coef_standard_errors: array![se],
            residual_variance: 1.0,
            n,
            p: 1,
        }
    }

    #[test]
    fn wald_test_reference_values() {
        let w = ols_wald_test(&fit_with(0.0, 1.0, 30), 0).unwrap();
        assert_eq!(w.t_statistic, 0.0);
        assert!((w.p_value - 1.0).abs() < 1e-12);
        // large df approaches 2 (1 - Phi(1)) = 0.31731
        let w = ols_wald_test(&fit_with(0.7, 0.7, 1_000_001), 0).unwrap();
        assert!((w.p_value - 0.317_310_507_862_914).abs() < 1e-5);
        assert_eq!(ols_wald_test(&fit_with(1.0, 0.0, 10), 0), Err(Error::ZeroSe));
        assert!(ols_wald_test(&fit_with(1.0, 1.0, 10), 1).is_err());
    }

    #[test]
    fn balanced_intercept_only_logistic() {
        let y = array![1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let fit = fit_logistic(Array2::ones((6, 1)).view(), y.view(), 50).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients[0].abs() < 1e-12);
    }

    #[test]
    fn one_class_rejected() {
        let y = array![1.0, 1.0, 1.0];
        let design = array![[1.0, 0.1], [1.0, 0.5], [1.0, 0.9]];
        assert_eq!(fit_logistic(design.view(), y.view(), 50).unwrap_err(), Error::OneClass);
    }

    #[test]
    fn perfect_separation_flags_and_clamps() {
        let x = [-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0];
        let mut design = Array2::ones((8, 2));
        for (i, v) in x.iter().enumerate() {
            design[[i, 1]] = *v;
        }
        let y = array![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let fit = fit_logistic(design.view(), y.view(), 50).unwrap();
        assert!(!fit.converged);
        assert!(fit.separated);
        assert!(fit
            .fitted_probabilities
            .iter()
            .all(|&p| (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p)));
    }
}
