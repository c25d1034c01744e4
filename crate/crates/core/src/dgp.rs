//! Simulated external-control studies.
//!
//! Covariates are independent standard normals; treatment follows a logistic
//! selection model whose intercept is calibrated numerically to a target
//! prevalence; the continuous outcome adds N(0, 2) noise (variance 2).

use std::fmt;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_stream_id, sample_bernoulli, RngStream};
use crate::stats::expit;

/// Covariates available to every estimator.
pub const N_OBSERVED: usize = 3;
pub const NOISE_VARIANCE: f64 = 2.0;
pub const EXPECTED_TREATED: f64 = 50.0;
pub const DEFAULT_CALIBRATION_DRAWS: usize = 1_000_000;
pub const DEFAULT_TRUTH_DRAWS: usize = 10_000_000;
pub const DEFAULT_PREVALENCES: [f64; 5] = [0.05, 0.10, 0.20, 0.33, 0.50];
const MAX_REDRAWS: u64 = 1000;
const INTERCEPT_BRACKET: (f64, f64) = (-20.0, 20.0);

/// Coefficients of the treatment-selection logit, intercept excluded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: u8,
    pub x1: f64,
    pub x2: f64,
    pub x1_sq: f64,
    pub x2_sq: f64,
    pub x1_x2: f64,
    pub x4: f64,
    pub x4_sq: f64,
}

impl ScenarioSpec {
    pub fn new(id: u8) -> Result<Self> {
        let base = ScenarioSpec {
            id,
            x1: 0.1,
            x2: 0.1,
            x1_sq: 0.05,
            x2_sq: 0.02,
            x1_x2: 0.02,
            x4: 0.0,
            x4_sq: 0.0,
        };
        match id {
            1 => Ok(base),
            // positivity violation
            2 => Ok(ScenarioSpec {
                x1: 1.25,
                x2: 1.0,
                x1_sq: 0.5,
                x2_sq: 0.5,
                x1_x2: 0.75,
                ..base
            }),
            // unmeasured confounder X4
            3 => Ok(ScenarioSpec {
                x4: 0.05,
                x4_sq: 0.02,
                ..base
            }),
            _ => Err(Error::InvalidInput(format!("unknown scenario {id}"))),
        }
    }

    pub fn includes_x4(&self) -> bool {
        self.id == 3
    }

    /// Columns drawn per unit: X1..X3, plus the hidden X4 in scenario 3.
    pub fn n_columns(&self) -> usize {
        if self.includes_x4() {
            N_OBSERVED + 1
        } else {
            N_OBSERVED
        }
    }

    /// Logit of the treatment probability minus the intercept.
    pub fn selection_score(&self, row: &[f64]) -> f64 {
        let (x1, x2) = (row[0], row[1]);
        let mut f = self.x1 * x1 + self.x2 * x2 + self.x1_sq * x1 * x1 + self.x2_sq * x2 * x2
            + self.x1_x2 * x1 * x2;
        if self.includes_x4() {
            let x4 = row[3];
            f += self.x4 * x4 + self.x4_sq * x4 * x4;
        }
        f
    }
}

/// Outcome model; `null_effect` removes every term that involves Z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettingSpec {
    pub id: u8,
    pub null_effect: bool,
}

impl SettingSpec {
    pub fn new(id: u8, null_effect: bool) -> Result<Self> {
        if !(1..=3).contains(&id) {
            return Err(Error::InvalidInput(format!("unknown setting {id}")));
        }
        Ok(Self { id, null_effect })
    }

    /// E[Y | X, Z] for a full covariate row (hidden columns included).
    pub fn outcome_mean(&self, row: &[f64], z: f64, includes_x4: bool) -> f64 {
        let (x1, x3) = (row[0], row[2]);
        let z = if self.null_effect { 0.0 } else { z };
        let mut y = z + 1.5 * x1 + 0.75 * x3;
        match self.id {
            2 => y += 1.75 * x1 * x1,
            3 => y += 1.5 * x1 * z,
            _ => {}
        }
        if includes_x4 {
            y += 5.0 * row[3];
        }
        y
    }
}

/// Treatment prevalence; 0.33 is read as exactly one third.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Prevalence(f64);

impl Prevalence {
    pub fn new(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidInput(format!("prevalence {p} outside (0, 1)")));
        }
        if (p - 0.33).abs() < 1e-9 {
            return Ok(Self(1.0 / 3.0));
        }
        Ok(Self(p))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Sample size with 50 expected treated units.
    pub fn sample_size(self) -> usize {
        (EXPECTED_TREATED / self.0).round() as usize
    }

    /// Stable integer key (parts per million).
    pub fn key(self) -> u64 {
        (self.0 * 1e6).round() as u64
    }
}

impl fmt::Display for Prevalence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if (self.0 - 1.0 / 3.0).abs() < 1e-12 {
            write!(f, "0.33")
        } else {
            write!(f, "{:.2}", self.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    Data = 1,
    EnsemblePs = 2,
    EnsembleOutcome = 3,
    Calibration = 4,
    Truth = 5,
    Diagnostic = 6,
}

/// One cell of the simulation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub scenario: u8,
    pub setting: u8,
    pub prevalence: Prevalence,
    pub null_effect: bool,
    pub n_reps: usize,
    pub master_seed: u64,
}

impl CellConfig {
    pub fn n(&self) -> usize {
        self.prevalence.sample_size()
    }

    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        ScenarioSpec::new(self.scenario)
    }

    pub fn setting_spec(&self) -> Result<SettingSpec> {
        SettingSpec::new(self.setting, self.null_effect)
    }

    /// File-name friendly identifier, e.g. `s1_set2_p0.20_effect`.
    pub fn id(&self) -> String {
        format!(
            "s{}_set{}_p{}_{}",
            self.scenario,
            self.setting,
            self.prevalence,
            if self.null_effect { "null" } else { "effect" }
        )
    }

    pub fn stream(&self, replicate: usize, purpose: StreamPurpose, attempt: u64) -> RngStream {
        let id = derive_stream_id(&[
            u64::from(self.scenario),
            u64::from(self.setting),
            self.prevalence.key(),
            u64::from(self.null_effect),
            replicate as u64,
            purpose as u64,
            attempt,
        ]);
        RngStream::new(self.master_seed, id)
    }
}

/// One simulated trial. Column 3 (X4) is present but hidden in scenario 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    pub z: Vec<u8>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, z: Vec<u8>, y: Vec<f64>) -> Result<Self> {
        if x.ncols() < N_OBSERVED || z.len() != x.nrows() || y.len() != x.nrows() {
            return Err(Error::InvalidInput("inconsistent dataset shapes".into()));
        }
        Ok(Self { x, z, y })
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    /// The covariates estimators may use (X1..X3).
    pub fn observed(&self) -> ArrayView2<'_, f64> {
        self.x.slice(s![.., ..N_OBSERVED])
    }

    pub fn hidden_columns(&self) -> std::ops::Range<usize> {
        N_OBSERVED..self.x.ncols()
    }

    /// Every generated column, hidden ones included. Oracle use only.
    pub fn all_columns(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn n_treated(&self) -> usize {
        self.z.iter().filter(|&&v| v == 1).count()
    }
}

/// Draws X, then Z, then the outcome noise, all from `rng` in that order.
pub fn generate_dataset(
    n: usize,
    scenario: &ScenarioSpec,
    setting: &SettingSpec,
    intercept: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    let d = scenario.n_columns();
    let x = Array2::from_shape_simple_fn((n, d), || rng.std_normal());
    let p: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| expit(intercept + scenario.selection_score(r.as_slice().expect("row-major"))))
        .collect();
    let z = sample_bernoulli(rng, &p)?;
    let treated = z.iter().filter(|&&v| v == 1).count();
    let sd = NOISE_VARIANCE.sqrt();
    let y = x
        .rows()
        .into_iter()
        .zip(&z)
        .map(|(r, &zi)| {
            let row = r.as_slice().expect("row-major");
            setting.outcome_mean(row, f64::from(zi), scenario.includes_x4()) + sd * rng.std_normal()
        })
        .collect();
    if treated < 2 || n - treated < 2 {
        return Err(Error::DegenerateDraw { treated, control: n - treated });
    }
    Dataset::new(x, z, y)
}

/// Generates replicate `replicate` of a cell, moving to the next substream
/// whenever a draw is degenerate. Returns the dataset and the redraw count.
pub fn generate_replicate(cfg: &CellConfig, intercept: f64, replicate: usize) -> Result<(Dataset, u64)> {
    let scenario = cfg.scenario_spec()?;
    let setting = cfg.setting_spec()?;
    for attempt in 0..MAX_REDRAWS {
        let mut rng = cfg.stream(replicate, StreamPurpose::Data, attempt);
        match generate_dataset(cfg.n(), &scenario, &setting, intercept, &mut rng) {
            Ok(ds) => return Ok((ds, attempt)),
            Err(Error::DegenerateDraw { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateDraw { treated: 0, control: 0 })
}

fn oracle_stream(seed: u64, purpose: StreamPurpose, scenario: u8, prevalence: Prevalence) -> RngStream {
    RngStream::new(
        seed,
        derive_stream_id(&[purpose as u64, u64::from(scenario), prevalence.key()]),
    )
}

fn draw_row(rng: &mut RngStream, buf: &mut [f64]) {
    for v in buf.iter_mut() {
        *v = rng.std_normal();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterceptCalibration {
    pub intercept: f64,
    /// Delta-method Monte Carlo standard error of the intercept.
    pub standard_error: f64,
    pub oracle_n: usize,
}

/// Bisection on the intercept so that the Monte Carlo mean of
/// `expit(α₀ + f(X))` over `oracle_n` fixed covariate draws hits `prevalence`.
pub fn calibrate_intercept(
    scenario: &ScenarioSpec,
    prevalence: f64,
    oracle_n: usize,
    rng: &mut RngStream,
) -> Result<InterceptCalibration> {
    if !(prevalence > 0.0 && prevalence < 1.0) || oracle_n < 2 {
        return Err(Error::InvalidInput(format!(
            "prevalence {prevalence} / oracle_n {oracle_n} invalid"
        )));
    }
    let mut row = vec![0.0; scenario.n_columns()];
    let scores: Vec<f64> = (0..oracle_n)
        .map(|_| {
            draw_row(rng, &mut row);
            scenario.selection_score(&row)
        })
        .collect();
    let mean_p = |a: f64| scores.par_iter().map(|&f| expit(a + f)).sum::<f64>() / oracle_n as f64;

    let (mut lo, mut hi) = INTERCEPT_BRACKET;
    if mean_p(lo) > prevalence || mean_p(hi) < prevalence {
        return Err(Error::BracketFailure { lo, hi, target: prevalence });
    }
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < prevalence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let intercept = 0.5 * (lo + hi);
    let achieved = mean_p(intercept);
    debug_assert!((achieved - prevalence).abs() < 1e-3);

    let nf = oracle_n as f64;
    let (var_p, slope) = scores
        .iter()
        .map(|&f| {
            let p = expit(intercept + f);
            ((p - achieved).powi(2), p * (1.0 - p))
        })
        .fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    let standard_error = (var_p / (nf - 1.0) / nf).sqrt() / (slope / nf);
    Ok(InterceptCalibration {
        intercept,
        standard_error,
        oracle_n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthEstimate {
    pub value: f64,
    pub standard_error: f64,
}

/// True ATT: 1 in settings 1 and 2 (0 under the null); in setting 3,
/// `1 + 1.5·E[X1 | Z = 1]` estimated as `Σ X1·p(X) / Σ p(X)` over
/// `oracle_n` covariate draws.
pub fn true_att(
    scenario: &ScenarioSpec,
    setting: &SettingSpec,
    intercept: f64,
    oracle_n: usize,
    rng: &mut RngStream,
) -> TruthEstimate {
    if setting.null_effect {
        return TruthEstimate { value: 0.0, standard_error: 0.0 };
    }
    if setting.id != 3 {
        return TruthEstimate { value: 1.0, standard_error: 0.0 };
    }
    let mut row = vec![0.0; scenario.n_columns()];
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..oracle_n {
        draw_row(rng, &mut row);
        let p = expit(intercept + scenario.selection_score(&row));
        let a = row[0] * p;
        sa += a;
        sb += p;
        saa += a * a;
        sbb += p * p;
        sab += a * p;
    }
    let nf = oracle_n as f64;
    let (ma, mb) = (sa / nf, sb / nf);
    let ratio = ma / mb;
    let var_a = saa / nf - ma * ma;
    let var_b = sbb / nf - mb * mb;
    let cov_ab = sab / nf - ma * mb;
    let var_ratio = (var_a - 2.0 * ratio * cov_ab + ratio * ratio * var_b) / (nf * mb * mb);
    TruthEstimate {
        value: 1.0 + 1.5 * ratio,
        standard_error: 1.5 * var_ratio.max(0.0).sqrt(),
    }
}

/// Calibrated intercept and setting-3 truth for one (scenario, prevalence).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoldenRow {
    pub scenario: u8,
    pub prevalence: f64,
    pub n: usize,
    pub intercept: f64,
    pub intercept_se: f64,
    pub intercept_oracle_n: usize,
    pub setting3_truth: f64,
    pub setting3_truth_se: f64,
    pub truth_oracle_n: usize,
    pub oracle_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenTable {
    pub rows: Vec<GoldenRow>,
}

const BUILTIN_GOLDEN: &str = include_str!("../data/golden_constants.csv");

impl GoldenTable {
    /// Constants shipped with the crate (10⁷-draw oracles).
    pub fn builtin() -> Self {
        Self::from_csv(BUILTIN_GOLDEN).expect("bundled golden table parses")
    }

    /// Computes every (scenario, prevalence) entry; entries run in parallel
    /// on independent oracle streams.
    pub fn compute(
        scenarios: &[u8],
        prevalences: &[Prevalence],
        oracle_seed: u64,
        intercept_oracle_n: usize,
        truth_oracle_n: usize,
    ) -> Result<Self> {
        let keys: Vec<(u8, Prevalence)> = scenarios
            .iter()
            .flat_map(|&s| prevalences.iter().map(move |&p| (s, p)))
            .collect();
        let rows = keys
            .par_iter()
            .map(|&(s, p)| {
                let spec = ScenarioSpec::new(s)?;
                let mut rng = oracle_stream(oracle_seed, StreamPurpose::Calibration, s, p);
                let cal = calibrate_intercept(&spec, p.value(), intercept_oracle_n, &mut rng)?;
                let mut rng = oracle_stream(oracle_seed, StreamPurpose::Truth, s, p);
                let truth = true_att(&spec, &SettingSpec::new(3, false)?, cal.intercept, truth_oracle_n, &mut rng);
                Ok(GoldenRow {
                    scenario: s,
                    prevalence: p.value(),
                    n: p.sample_size(),
                    intercept: cal.intercept,
                    intercept_se: cal.standard_error,
                    intercept_oracle_n,
                    setting3_truth: truth.value,
                    setting3_truth_se: truth.standard_error,
                    truth_oracle_n,
                    oracle_seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    pub fn lookup(&self, scenario: u8, prevalence: Prevalence) -> Option<&GoldenRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && Prevalence(r.prevalence).key() == prevalence.key())
    }

    /// Truth for a cell, or `None` when the table lacks its entry.
    pub fn truth(&self, cfg: &CellConfig) -> Option<f64> {
        if cfg.null_effect {
            return Some(0.0);
        }
        match cfg.setting {
            3 => self.lookup(cfg.scenario, cfg.prevalence).map(|r| r.setting3_truth),
            _ => Some(1.0),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<Vec<GoldenRow>, _>>()?;
        Ok(Self { rows })
    }
}
