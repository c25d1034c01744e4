//! Ratio-of-sums IPW and AIPW estimators of the ATT.
//!
//! Both use the weight `W = ps / (Z·ps + (1 − Z)(1 − ps))`, i.e. 1 for treated
//! units and the odds `ps / (1 − ps)` for controls, and only read units kept
//! by the propensity mask. Standard errors come from the empirical variance
//! of each estimator's influence function, either with the propensity score
//! treated as known or, for a logistic score, with the stacked correction
//! for its estimation. p-values use the normal reference.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::glm::{fit_ols, OlsFit};
use crate::linalg::{weighted_gram, SpdMatrix};
use crate::propensity::PsVector;
use crate::rng::RngStream;
use crate::stats::normal_two_sided_p;
use crate::superlearner::{fit_superlearner, predict_ensemble, EnsembleFit, Family, DEFAULT_FOLDS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedAttEstimate {
    pub att: f64,
    pub theoretical_se: f64,
    pub p_value: f64,
    pub n_used: usize,
}

/// ATT weights for every unit (masking is the caller's concern).
pub fn att_weights(z: &[u8], ps: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(ps)
        .map(|(&zi, &p)| {
            let zf = f64::from(zi);
            p / (zf * p + (1.0 - zf) * (1.0 - p))
        })
        .collect()
}

fn check_lengths(n: usize, others: &[usize]) -> Result<()> {
    match others.iter().find(|&&m| m != n) {
        Some(&got) => Err(Error::DimensionMismatch { expected: n, got }),
        None => Ok(()),
    }
}

struct ArmSums {
    treated_w: f64,
    control_w: f64,
    n: usize,
}

fn arm_sums(z: &[u8], w: &[f64], kept: &[bool]) -> Result<ArmSums> {
    let mut s = ArmSums { treated_w: 0.0, control_w: 0.0, n: 0 };
    for i in 0..z.len() {
        if !kept[i] {
            continue;
        }
        s.n += 1;
        if z[i] == 1 {
            s.treated_w += w[i];
        } else {
            s.control_w += w[i];
        }
    }
    if s.treated_w == 0.0 || s.control_w == 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(s)
}

/// Influence values over kept units, normalised by the kept count, and the
/// gradient of the estimate in the logistic coefficients.
struct Influence {
    kept: Vec<usize>,
    psi: Vec<f64>,
    gradient: Option<Array1<f64>>,
}

fn ss_plain(inf: &Influence) -> f64 {
    inf.psi.iter().map(|v| v * v).sum()
}

/// `φᵢ = ψᵢ + D·B⁻¹·sᵢ` over all units, with `B` the logistic information,
/// `sᵢ` the per-unit score and `D` the gradient of the estimate.
fn ss_adjusted(inf: &Influence, z: &[u8], ps: &[f64], design: ArrayView2<f64>, gradient: &Array1<f64>) -> Result<f64> {
    let n_all = z.len();
    let scale = n_all as f64 / inf.kept.len() as f64;
    let info_w = Array1::from_iter(ps.iter().map(|&e| e * (1.0 - e)));
    let mut b = weighted_gram(design, Some(info_w.view()));
    b.mapv_inplace(|v| v / n_all as f64);
    let v = SpdMatrix::new(b)?.solve(gradient.view())?;
    let mut phi = vec![0.0; n_all];
    for (k, &i) in inf.kept.iter().enumerate() {
        phi[i] = inf.psi[k] * scale;
    }
    for (i, row) in design.rows().into_iter().enumerate() {
        phi[i] += (f64::from(z[i]) - ps[i]) * row.dot(&v);
    }
    // rescale so that `finish` divides by the kept count
    Ok(phi.iter().map(|v| v * v).sum::<f64>() / (scale * scale))
}

fn sum_of_squares(inf: &Influence, z: &[u8], ps: &[f64], design: Option<ArrayView2<f64>>) -> Result<f64> {
    match (design, &inf.gradient) {
        (Some(d), Some(g)) => ss_adjusted(inf, z, ps, d, g),
        _ => Ok(ss_plain(inf)),
    }
}

fn check_design(design: Option<ArrayView2<f64>>, n: usize) -> Result<()> {
    match design {
        Some(d) if d.nrows() != n => Err(Error::DimensionMismatch { expected: n, got: d.nrows() }),
        _ => Ok(()),
    }
}

fn finish(att: f64, influence_sq_sum: f64, n: usize) -> Result<WeightedAttEstimate> {
    let se = influence_sq_sum.sqrt() / n as f64;
    if se == 0.0 || !se.is_finite() {
        return Err(Error::ZeroSe);
    }
    Ok(WeightedAttEstimate {
        att,
        theoretical_se: se,
        p_value: normal_two_sided_p(att / se),
        n_used: n,
    })
}

/// Plug-in standard error with the propensity score treated as known.
pub fn ipw_att(y: &[f64], z: &[u8], ps: &PsVector) -> Result<WeightedAttEstimate> {
    ipw_impl(y, z, ps, None)
}

/// As [`ipw_att`], with the standard error corrected for a logistic
/// propensity score fitted on `design` (intercept column included).
pub fn ipw_att_logistic(y: &[f64], z: &[u8], ps: &PsVector, design: ArrayView2<f64>) -> Result<WeightedAttEstimate> {
    ipw_impl(y, z, ps, Some(design))
}

fn ipw_impl(y: &[f64], z: &[u8], ps: &PsVector, design: Option<ArrayView2<f64>>) -> Result<WeightedAttEstimate> {
    check_lengths(z.len(), &[y.len(), ps.len()])?;
    check_design(design, z.len())?;
    let w = att_weights(z, &ps.values);
    let sums = arm_sums(z, &w, &ps.kept)?;
    let (mut t_num, mut c_num) = (0.0, 0.0);
    for i in (0..z.len()).filter(|&i| ps.kept[i]) {
        if z[i] == 1 {
            t_num += w[i] * y[i];
        } else {
            c_num += w[i] * y[i];
        }
    }
    let mu1 = t_num / sums.treated_w;
    let mu0 = c_num / sums.control_w;
    let nf = sums.n as f64;
    let (t_mean_w, c_mean_w) = (sums.treated_w / nf, sums.control_w / nf);
    let kept: Vec<usize> = (0..z.len()).filter(|&i| ps.kept[i]).collect();
    let psi = kept
        .iter()
        .map(|&i| {
            if z[i] == 1 {
                w[i] * (y[i] - mu1) / t_mean_w
            } else {
                -w[i] * (y[i] - mu0) / c_mean_w
            }
        })
        .collect();
    // d mu0 / d beta, since d w / d beta = w x for controls
    let gradient = design.map(|d| {
        let mut g = Array1::zeros(d.ncols());
        for &i in kept.iter().filter(|&&i| z[i] == 0) {
            g.scaled_add(-w[i] * (y[i] - mu0) / sums.control_w, &d.row(i));
        }
        g
    });
    let inf = Influence { kept, psi, gradient };
    finish(mu1 - mu0, sum_of_squares(&inf, z, &ps.values, design)?, sums.n)
}

/// `Σps(q1 − q0)/Σps + ΣWZ(Y − q1)/ΣWZ − ΣW(1−Z)(Y − q0)/ΣW(1−Z)` over kept units.
pub fn aipw_att(
    y: &[f64],
    z: &[u8],
    ps: &PsVector,
    q1: &[f64],
    q0: &[f64],
) -> Result<WeightedAttEstimate> {
    aipw_impl(y, z, ps, q1, q0, None)
}

/// As [`aipw_att`], with the standard error corrected for a logistic
/// propensity score fitted on `design`. The outcome model is taken as fixed.
pub fn aipw_att_logistic(
    y: &[f64],
    z: &[u8],
    ps: &PsVector,
    q1: &[f64],
    q0: &[f64],
    design: ArrayView2<f64>,
) -> Result<WeightedAttEstimate> {
    aipw_impl(y, z, ps, q1, q0, Some(design))
}

fn aipw_impl(
    y: &[f64],
    z: &[u8],
    ps: &PsVector,
    q1: &[f64],
    q0: &[f64],
    design: Option<ArrayView2<f64>>,
) -> Result<WeightedAttEstimate> {
    check_lengths(z.len(), &[y.len(), ps.len(), q1.len(), q0.len()])?;
    check_design(design, z.len())?;
    let w = att_weights(z, &ps.values);
    let sums = arm_sums(z, &w, &ps.kept)?;
    let kept: Vec<usize> = (0..z.len()).filter(|&i| ps.kept[i]).collect();
    let (mut ps_sum, mut pred_num, mut t_num, mut c_num) = (0.0, 0.0, 0.0, 0.0);
    for &i in &kept {
        let p = ps.values[i];
        ps_sum += p;
        pred_num += p * (q1[i] - q0[i]);
        if z[i] == 1 {
            t_num += w[i] * (y[i] - q1[i]);
        } else {
            c_num += w[i] * (y[i] - q0[i]);
        }
    }
    let outcome_term = pred_num / ps_sum;
    let treated_resid = t_num / sums.treated_w;
    let control_resid = c_num / sums.control_w;
    let att = outcome_term + treated_resid - control_resid;

    let nf = sums.n as f64;
    let (ps_mean, t_mean_w, c_mean_w) = (ps_sum / nf, sums.treated_w / nf, sums.control_w / nf);
    let psi = kept
        .iter()
        .map(|&i| {
            let mut psi = ps.values[i] * (q1[i] - q0[i] - outcome_term) / ps_mean;
            if z[i] == 1 {
                psi += w[i] * (y[i] - q1[i] - treated_resid) / t_mean_w;
            } else {
                psi -= w[i] * (y[i] - q0[i] - control_resid) / c_mean_w;
            }
            psi
        })
        .collect();
    let gradient = design.map(|d| {
        let mut g = Array1::zeros(d.ncols());
        for &i in &kept {
            let e = ps.values[i];
            g.scaled_add(e * (1.0 - e) * (q1[i] - q0[i] - outcome_term) / ps_sum, &d.row(i));
            if z[i] == 0 {
                g.scaled_add(-w[i] * (y[i] - q0[i] - control_resid) / sums.control_w, &d.row(i));
            }
        }
        g
    });
    let inf = Influence { kept, psi, gradient };
    finish(att, sum_of_squares(&inf, z, &ps.values, design)?, sums.n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeMethod {
    Ols,
    Ensemble,
}

/// Regression of Y on (X, Z) used to predict both potential outcomes.
#[derive(Debug, Clone)]
pub enum OutcomeModel {
    Ols(OlsFit),
    Ensemble(EnsembleFit),
}

fn with_treatment(x: ArrayView2<f64>, z: impl Iterator<Item = f64>) -> Array2<f64> {
    let zcol = Array1::from_iter(z).insert_axis(Axis(1));
    concatenate![Axis(1), x, zcol]
}

fn with_intercept(features: Array2<f64>) -> Array2<f64> {
    let ones = Array2::ones((features.nrows(), 1));
    concatenate![Axis(1), ones, features]
}

impl OutcomeModel {
    pub fn fit(
        x: ArrayView2<f64>,
        y: &[f64],
        z: &[u8],
        method: OutcomeMethod,
        rng: &mut RngStream,
    ) -> Result<Self> {
        check_lengths(x.nrows(), &[y.len(), z.len()])?;
        let treated = z.iter().filter(|&&v| v == 1).count();
        if treated == 0 || treated == z.len() {
            return Err(Error::OneClass);
        }
        let features = with_treatment(x, z.iter().map(|&v| f64::from(v)));
        let y = Array1::from(y.to_vec());
        Ok(match method {
            OutcomeMethod::Ols => OutcomeModel::Ols(fit_ols(with_intercept(features).view(), y.view())?),
            OutcomeMethod::Ensemble => OutcomeModel::Ensemble(fit_superlearner(
                features.view(),
                y.view(),
                Family::Gaussian,
                DEFAULT_FOLDS,
                rng,
            )?),
        })
    }

    fn predict_at(&self, x: ArrayView2<f64>, z: f64) -> Result<Vec<f64>> {
        let features = with_treatment(x, std::iter::repeat_n(z, x.nrows()));
        let pred = match self {
            OutcomeModel::Ols(fit) => fit.predict(with_intercept(features).view())?,
            OutcomeModel::Ensemble(fit) => predict_ensemble(fit, features.view())?,
        };
        Ok(pred.to_vec())
    }

    /// Predictions with Z forced to 1 and to 0.
    pub fn counterfactuals(&self, x: ArrayView2<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.predict_at(x, 1.0)?, self.predict_at(x, 0.0)?))
    }

    pub fn converged(&self) -> bool {
        match self {
            OutcomeModel::Ols(_) => true,
            OutcomeModel::Ensemble(fit) => fit.all_converged(),
        }
    }
}

pub fn fit_outcome_models(
    x: ArrayView2<f64>,
    y: &[f64],
    z: &[u8],
    method: OutcomeMethod,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    OutcomeModel::fit(x, y, z, method, rng)?.counterfactuals(x)
}
