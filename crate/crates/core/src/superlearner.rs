//! Cross-validated stacking over a small library of parametric learners.
//!
//! Out-of-fold predictions of each learner form the level-one matrix; the
//! ensemble weights minimise squared error over the probability simplex and
//! are found exactly by enumerating supports (the library has a handful of
//! members). Learners are then refit on all rows.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::glm::{fit_logistic, fit_ols, LogisticFit, OlsFit, PROB_CLAMP};
use crate::linalg::{weighted_gram, SpdMatrix};
use crate::rng::RngStream;

pub const DEFAULT_FOLDS: usize = 10;
const LOGISTIC_MAX_ITER: usize = 50;
// exhaustive support search is 2^k
const MAX_LIBRARY: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Gaussian,
    Binomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LearnerKind {
    MeanOnly,
    GlmMainEffects,
    /// Main effects, squares of non-binary columns and all pairwise products.
    GlmDegree2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub family: Family,
}

pub fn default_library(family: Family) -> Vec<LearnerSpec> {
    [LearnerKind::MeanOnly, LearnerKind::GlmMainEffects, LearnerKind::GlmDegree2]
        .into_iter()
        .map(|kind| LearnerSpec { kind, family })
        .collect()
}

/// Columns whose values are all 0 or 1; their squares duplicate the column.
pub fn binary_columns(x: ArrayView2<f64>) -> Vec<bool> {
    x.columns()
        .into_iter()
        .map(|c| c.iter().all(|&v| v == 0.0 || v == 1.0))
        .collect()
}

pub fn main_effects_design(x: ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::ones((n, d + 1));
    out.slice_mut(ndarray::s![.., 1..]).assign(&x);
    out
}

/// Intercept, main effects, squares (skipping binary columns) and pairwise
/// interactions, in that order.
pub fn degree2_design(x: ArrayView2<f64>, binary: &[bool]) -> Array2<f64> {
    let (n, d) = x.dim();
    let squares: Vec<usize> = (0..d).filter(|&j| !binary[j]).collect();
    let width = 1 + d + squares.len() + d * (d - 1) / 2;
    let mut out = Array2::ones((n, width));
    let mut c = 1;
    for j in 0..d {
        out.column_mut(c).assign(&x.column(j));
        c += 1;
    }
    for &j in &squares {
        out.column_mut(c).assign(&x.column(j).mapv(|v| v * v));
        c += 1;
    }
    for i in 0..d {
        for j in i + 1..d {
            out.column_mut(c).assign(&(&x.column(i) * &x.column(j)));
            c += 1;
        }
    }
    out
}

#[derive(Debug, Clone)]
enum Model {
    Constant(f64),
    Ols(OlsFit),
    Logistic(LogisticFit),
}

/// A library member fitted to data.
#[derive(Debug, Clone)]
pub struct FittedLearner {
    pub spec: LearnerSpec,
    binary: Vec<bool>,
    model: Model,
}

impl FittedLearner {
    pub fn fit(
        spec: LearnerSpec,
        x: ArrayView2<f64>,
        y: ArrayView1<f64>,
        binary: &[bool],
    ) -> Result<Self> {
        let model = match spec.kind {
            LearnerKind::MeanOnly => {
                if spec.family == Family::Binomial {
                    let m = y.mean().unwrap_or(f64::NAN);
                    if m <= 0.0 || m >= 1.0 {
                        return Err(Error::OneClass);
                    }
                }
                Model::Constant(y.mean().ok_or(Error::InvalidInput("empty response".into()))?)
            }
            LearnerKind::GlmMainEffects | LearnerKind::GlmDegree2 => {
                let design = Self::design(spec.kind, x, binary);
                match spec.family {
                    Family::Gaussian => Model::Ols(fit_ols(design.view(), y)?),
                    Family::Binomial => {
                        Model::Logistic(fit_logistic(design.view(), y, LOGISTIC_MAX_ITER)?)
                    }
                }
            }
        };
        Ok(Self {
            spec,
            binary: binary.to_vec(),
            model,
        })
    }

    fn design(kind: LearnerKind, x: ArrayView2<f64>, binary: &[bool]) -> Array2<f64> {
        match kind {
            LearnerKind::GlmDegree2 => degree2_design(x, binary),
            _ => main_effects_design(x),
        }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.binary.len() {
            return Err(Error::DimensionMismatch {
                expected: self.binary.len(),
                got: x.ncols(),
            });
        }
        match &self.model {
            Model::Constant(c) => Ok(Array1::from_elem(x.nrows(), *c)),
            Model::Ols(fit) => fit.predict(Self::design(self.spec.kind, x, &self.binary).view()),
            Model::Logistic(fit) => {
                fit.predict(Self::design(self.spec.kind, x, &self.binary).view())
            }
        }
    }

    /// False when the underlying logistic fit hit its iteration cap or separated.
    pub fn converged(&self) -> bool {
        match &self.model {
            Model::Logistic(fit) => fit.converged,
            _ => true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleFit {
    pub family: Family,
    pub library: Vec<LearnerSpec>,
    /// `None` for learners that failed on some fold or on the full data.
    pub learner_fits: Vec<Option<FittedLearner>>,
    pub weights: Array1<f64>,
    /// Cross-validated mean squared error per learner (`inf` when excluded).
    pub cv_risks: Vec<f64>,
    /// Cross-validated mean squared error of the weighted combination.
    pub cv_objective: f64,
    pub fold_of: Vec<usize>,
    n_features: usize,
}

impl EnsembleFit {
    pub fn all_converged(&self) -> bool {
        self.learner_fits
            .iter()
            .zip(self.weights.iter())
            .all(|(f, &w)| w == 0.0 || f.as_ref().is_some_and(|f| f.converged()))
    }
}

fn assign_folds(n: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
    let perm = rng.permutation(n);
    let mut fold_of = vec![0; n];
    for (rank, &unit) in perm.iter().enumerate() {
        fold_of[unit] = rank % k;
    }
    fold_of
}

fn training_sets_have_both_classes(y: ArrayView1<f64>, fold_of: &[usize], k: usize) -> bool {
    (0..k).all(|f| {
        let (mut ones, mut zeros) = (0usize, 0usize);
        for (i, &fi) in fold_of.iter().enumerate() {
            if fi != f {
                if y[i] == 1.0 {
                    ones += 1;
                } else {
                    zeros += 1;
                }
            }
        }
        ones > 0 && zeros > 0
    })
}

pub fn fit_superlearner(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    family: Family,
    k_folds: usize,
    rng: &mut RngStream,
) -> Result<EnsembleFit> {
    fit_superlearner_with_library(x, y, family, &default_library(family), k_folds, rng)
}

pub fn fit_superlearner_with_library(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    family: Family,
    library: &[LearnerSpec],
    k_folds: usize,
    rng: &mut RngStream,
) -> Result<EnsembleFit> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if library.is_empty() || library.len() > MAX_LIBRARY {
        return Err(Error::InvalidInput(format!(
            "library size {} outside 1..={MAX_LIBRARY}",
            library.len()
        )));
    }
    if k_folds < 2 || n < 2 * k_folds {
        return Err(Error::InvalidInput(format!("need n >= 2k, got n = {n}, k = {k_folds}")));
    }
    if family == Family::Binomial {
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput("binomial response must be 0/1".into()));
        }
        let ones = y.sum();
        if ones == 0.0 || ones == n as f64 {
            return Err(Error::OneClass);
        }
    }

    let mut fold_of = assign_folds(n, k_folds, rng);
    if family == Family::Binomial && !training_sets_have_both_classes(y, &fold_of, k_folds) {
        fold_of = assign_folds(n, k_folds, rng);
        if !training_sets_have_both_classes(y, &fold_of, k_folds) {
            return Err(Error::OneClass);
        }
    }

    let binary = binary_columns(x);
    let mut level_one = Array2::<f64>::zeros((n, library.len()));
    let mut usable = vec![true; library.len()];
    for f in 0..k_folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let x_train = x.select(Axis(0), &train);
        let y_train = y.select(Axis(0), &train);
        let x_test = x.select(Axis(0), &test);
        for (l, spec) in library.iter().enumerate() {
            if !usable[l] {
                continue;
            }
            let pred = FittedLearner::fit(*spec, x_train.view(), y_train.view(), &binary)
                .and_then(|fit| fit.predict(x_test.view()));
            match pred {
                Ok(pred) => {
                    for (&i, &p) in test.iter().zip(pred.iter()) {
                        level_one[[i, l]] = p;
                    }
                }
                Err(_) => usable[l] = false,
            }
        }
    }

    let learner_fits: Vec<Option<FittedLearner>> = library
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            if usable[l] {
                FittedLearner::fit(*spec, x, y, &binary).ok()
            } else {
                None
            }
        })
        .collect();
    for (l, fit) in learner_fits.iter().enumerate() {
        usable[l] &= fit.is_some();
    }
    if !usable.iter().any(|&u| u) {
        return Err(Error::EmptyLibrary);
    }

    let cv_risks: Vec<f64> = (0..library.len())
        .map(|l| {
            if usable[l] {
                mse(level_one.column(l), y)
            } else {
                f64::INFINITY
            }
        })
        .collect();

    let cols: Vec<usize> = (0..library.len()).filter(|&l| usable[l]).collect();
    let sub = level_one.select(Axis(1), &cols);
    let sub_weights = simplex_least_squares(sub.view(), y)?;
    let mut weights = Array1::zeros(library.len());
    for (&l, &w) in cols.iter().zip(sub_weights.iter()) {
        weights[l] = w;
    }
    let cv_objective = mse(level_one.dot(&weights).view(), y);

    Ok(EnsembleFit {
        family,
        library: library.to_vec(),
        learner_fits,
        weights,
        cv_risks,
        cv_objective,
        fold_of,
        n_features: x.ncols(),
    })
}

fn mse(pred: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    pred.iter().zip(y.iter()).map(|(p, t)| (t - p).powi(2)).sum::<f64>() / y.len() as f64
}

/// Minimises `‖y − P a‖²` over `a ≥ 0, Σ a = 1`.
///
/// Every support is tried: on a support the equality-constrained problem is
/// solved by eliminating the last weight, and infeasible or singular supports
/// are skipped. Singletons are always feasible, so the result is never worse
/// than the best single column. Ties keep the first support in enumeration
/// order (by size, then by bitmask).
pub fn simplex_least_squares(p: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<Array1<f64>> {
    let (n, k) = p.dim();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if k == 0 || k > MAX_LIBRARY {
        return Err(Error::InvalidInput(format!("need 1..={MAX_LIBRARY} columns, got {k}")));
    }
    let mut masks: Vec<u32> = (1..(1u32 << k)).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));

    let mut best: Option<(f64, Array1<f64>)> = None;
    for mask in masks {
        let support: Vec<usize> = (0..k).filter(|j| mask & (1 << j) != 0).collect();
        let Some(a) = solve_on_support(p, y, &support) else {
            continue;
        };
        let mut full = Array1::zeros(k);
        for (&j, &w) in support.iter().zip(a.iter()) {
            full[j] = w;
        }
        let obj = mse(p.dot(&full).view(), y);
        let better = match &best {
            None => true,
            Some((b, _)) => obj < *b - 1e-15 * b.abs().max(1e-300),
        };
        if better {
            best = Some((obj, full));
        }
    }
    let (_, mut w) = best.expect("singletons are always feasible");
    let total = w.sum();
    w /= total;
    Ok(w)
}

fn solve_on_support(p: ArrayView2<f64>, y: ArrayView1<f64>, support: &[usize]) -> Option<Vec<f64>> {
    let s = support.len();
    let last = p.column(support[s - 1]);
    if s == 1 {
        return Some(vec![1.0]);
    }
    // a_last = 1 − Σ a_j; regress (y − p_last) on (p_j − p_last)
    let n = p.nrows();
    let mut d = Array2::<f64>::zeros((n, s - 1));
    for (c, &j) in support[..s - 1].iter().enumerate() {
        d.column_mut(c).assign(&(&p.column(j) - &last));
    }
    let r = &y - &last;
    let gram = SpdMatrix::new(weighted_gram(d.view(), None)).ok()?;
    let a = gram.solve(d.t().dot(&r).view()).ok()?;
    let a_last = 1.0 - a.sum();
    let mut out: Vec<f64> = a.to_vec();
    out.push(a_last);
    if out.iter().any(|&w| w <= 0.0) {
        return None;
    }
    Some(out)
}

pub fn predict_ensemble(fit: &EnsembleFit, x_new: ArrayView2<f64>) -> Result<Array1<f64>> {
    if x_new.ncols() != fit.n_features {
        return Err(Error::DimensionMismatch {
            expected: fit.n_features,
            got: x_new.ncols(),
        });
    }
    let mut out = Array1::zeros(x_new.nrows());
    for (learner, &w) in fit.learner_fits.iter().zip(fit.weights.iter()) {
        if w == 0.0 {
            continue;
        }
        let learner = learner.as_ref().expect("weighted learners are fitted");
        out.scaled_add(w, &learner.predict(x_new)?);
    }
    if fit.family == Family::Binomial {
        out.mapv_inplace(|p| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP));
    }
    Ok(out)
}
