//! Propensity-score estimation, trimming and truncation.

use ndarray::{Array1, ArrayView2};

use crate::error::{Error, Result};
use crate::glm::fit_logistic;
use crate::rng::RngStream;
use crate::superlearner::{fit_superlearner, main_effects_design, predict_ensemble, Family, DEFAULT_FOLDS};

pub const DEFAULT_TRIM: f64 = 0.05;
const LOGISTIC_MAX_ITER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsSource {
    Logistic,
    Ensemble,
}

/// Estimated propensity scores with a mask of analysed units.
#[derive(Debug, Clone, PartialEq)]
pub struct PsVector {
    pub values: Vec<f64>,
    pub source: PsSource,
    pub kept: Vec<bool>,
    pub converged: bool,
    pub separated: bool,
}

impl PsVector {
    /// Wraps known propensity scores (all units kept).
    pub fn from_values(values: Vec<f64>, source: PsSource) -> Result<Self> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::InvalidProbability { index, value });
        }
        let kept = vec![true; values.len()];
        Ok(Self {
            values,
            source,
            kept,
            converged: true,
            separated: false,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_kept(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }
}

fn check_both_classes(z: &[u8]) -> Result<()> {
    let treated = z.iter().filter(|&&v| v == 1).count();
    if treated == 0 || treated == z.len() {
        return Err(Error::OneClass);
    }
    Ok(())
}

/// Fits P(Z = 1 | X) on the main effects of the supplied covariates.
pub fn estimate_ps(
    x: ArrayView2<f64>,
    z: &[u8],
    source: PsSource,
    rng: &mut RngStream,
) -> Result<PsVector> {
    if z.len() != x.nrows() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), got: z.len() });
    }
    check_both_classes(z)?;
    let y = Array1::from_iter(z.iter().map(|&v| f64::from(v)));
    let (values, converged, separated) = match source {
        PsSource::Logistic => {
            let fit = fit_logistic(main_effects_design(x).view(), y.view(), LOGISTIC_MAX_ITER)?;
            (fit.fitted_probabilities.to_vec(), fit.converged, fit.separated)
        }
        PsSource::Ensemble => {
            let fit = fit_superlearner(x, y.view(), Family::Binomial, DEFAULT_FOLDS, rng)?;
            let pred = predict_ensemble(&fit, x)?;
            (pred.to_vec(), fit.all_converged(), false)
        }
    };
    Ok(PsVector {
        kept: vec![true; values.len()],
        values,
        source,
        converged,
        separated,
    })
}

/// Drops units with ps outside `[delta, 1 − delta]`; values are untouched.
pub fn trim_ps(ps: &PsVector, z: &[u8], delta: f64) -> Result<PsVector> {
    if !(0.0..0.5).contains(&delta) {
        return Err(Error::InvalidInput(format!("trim threshold {delta} outside [0, 0.5)")));
    }
    if z.len() != ps.len() {
        return Err(Error::DimensionMismatch { expected: ps.len(), got: z.len() });
    }
    let kept: Vec<bool> = ps
        .kept
        .iter()
        .zip(&ps.values)
        .map(|(&k, &p)| k && p >= delta && p <= 1.0 - delta)
        .collect();
    let treated = kept.iter().zip(z).filter(|(&k, &zi)| k && zi == 1).count();
    let control = kept.iter().zip(z).filter(|(&k, &zi)| k && zi == 0).count();
    if treated == 0 || control == 0 {
        return Err(Error::AllTrimmed);
    }
    Ok(PsVector { kept, ..ps.clone() })
}

/// `5 / (√n · ln n)`.
pub fn truncation_bound(n: usize) -> f64 {
    let n = n as f64;
    5.0 / (n.sqrt() * n.ln())
}

/// Clamps every value into `[b, 1 − b]` with `b = truncation_bound(n)`.
pub fn truncate_ps(ps: &PsVector, n: usize) -> Result<PsVector> {
    let b = truncation_bound(n);
    if n < 2 || b >= 0.5 {
        return Err(Error::InvalidInput(format!(
            "truncation bound {b} for n = {n} is not below 0.5"
        )));
    }
    let values = ps.values.iter().map(|p| p.clamp(b, 1.0 - b)).collect();
    Ok(PsVector { values, ..ps.clone() })
}
