//! Replicate runner, per-cell aggregation and the grid driver.

mod metrics;
mod store;

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{aggregate_cell, aggregate_method, CellMetrics, MethodMetrics};
pub use store::{CellEntry, GridSummary, Manifest, ResultStore, SCHEMA_VERSION};

use crate::dgp::{generate_replicate, CellConfig, Dataset, GoldenTable, StreamPurpose};
use crate::error::{Error, Result};
use crate::glm::{fit_ols, ols_wald_test};
use crate::matching::{cem_att, cem_match, matched_att, mdm_match, psm_match, MatchRatio, MatchedAttEstimate};
use crate::propensity::{estimate_ps, trim_ps, truncate_ps, PsSource, PsVector, DEFAULT_TRIM};
use crate::tmle::tmle_att;
use crate::superlearner::main_effects_design;
use crate::weighting::{aipw_att, aipw_att_logistic, ipw_att_logistic, OutcomeMethod, OutcomeModel, WeightedAttEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Lr,
    Cem2,
    Cem5,
    Mdm,
    Psm,
    Psm12,
    Ipw,
    Aipw,
    AipwSl,
    TmleSl,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Lr,
        Method::Cem2,
        Method::Cem5,
        Method::Mdm,
        Method::Psm,
        Method::Psm12,
        Method::Ipw,
        Method::Aipw,
        Method::AipwSl,
        Method::TmleSl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lr => "LR",
            Method::Cem2 => "CEM2",
            Method::Cem5 => "CEM5",
            Method::Mdm => "MDM",
            Method::Psm => "PSM",
            Method::Psm12 => "PSM_1:2",
            Method::Ipw => "IPW",
            Method::Aipw => "AIPW",
            Method::AipwSl => "AIPW_SL",
            Method::TmleSl => "TMLE_SL",
        }
    }

    fn uses_logistic_ps(self) -> bool {
        matches!(self, Method::Mdm | Method::Psm | Method::Psm12 | Method::Ipw | Method::Aipw)
    }

    fn uses_ensemble(self) -> bool {
        matches!(self, Method::AipwSl | Method::TmleSl)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidInput(format!("unknown method {s:?}")))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecordFlags {
    pub nonconverged: bool,
    pub trimmed: bool,
    pub redrawn: bool,
    pub failed: bool,
}

impl fmt::Display for RecordFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            (self.nonconverged, "nonconverged"),
            (self.trimmed, "trimmed"),
            (self.redrawn, "redrawn"),
            (self.failed, "failed"),
        ];
        let set: Vec<&str> = names.iter().filter(|(on, _)| *on).map(|(_, n)| *n).collect();
        f.write_str(&set.join("|"))
    }
}

impl FromStr for RecordFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut flags = RecordFlags::default();
        for part in s.split('|').filter(|p| !p.is_empty()) {
            match part {
                "nonconverged" => flags.nonconverged = true,
                "trimmed" => flags.trimmed = true,
                "redrawn" => flags.redrawn = true,
                "failed" => flags.failed = true,
                other => return Err(Error::Store(format!("unknown flag {other:?}"))),
            }
        }
        Ok(flags)
    }
}

/// One method applied to one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRecord {
    pub method: Method,
    pub replicate: usize,
    pub att: f64,
    pub theoretical_se: f64,
    pub p_value: f64,
    pub n_discarded: usize,
    pub n_treated: usize,
    pub flags: RecordFlags,
    /// Error message for failed records, empty otherwise.
    pub detail: String,
}

impl EstimateRecord {
    pub fn is_valid(&self) -> bool {
        !self.flags.failed && self.att.is_finite()
    }

    fn failure(method: Method, replicate: usize, n_treated: usize, err: &Error) -> Self {
        Self {
            method,
            replicate,
            att: f64::NAN,
            theoretical_se: f64::NAN,
            p_value: f64::NAN,
            n_discarded: 0,
            n_treated,
            flags: RecordFlags { failed: true, ..Default::default() },
            detail: err.to_string(),
        }
    }
}

struct Estimate {
    att: f64,
    se: f64,
    p: f64,
    n_discarded: usize,
    nonconverged: bool,
    trimmed: bool,
}

impl Estimate {
    fn matched(m: MatchedAttEstimate, ps: &PsVector) -> Self {
        Self {
            att: m.att,
            se: m.theoretical_se,
            p: m.p_value,
            n_discarded: m.n_discarded,
            nonconverged: !ps.converged,
            trimmed: false,
        }
    }

    fn weighted(w: WeightedAttEstimate, ps: &PsVector, n: usize, nonconverged: bool) -> Self {
        Self {
            att: w.att,
            se: w.theoretical_se,
            p: w.p_value,
            n_discarded: n - w.n_used,
            nonconverged,
            trimmed: ps.n_kept() < n,
        }
    }
}

fn rows(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

fn linear_regression(data: &Dataset) -> Result<Estimate> {
    let x = data.observed();
    let n = data.n();
    let z = Array1::from_iter(data.z.iter().map(|&v| f64::from(v))).insert_axis(Axis(1));
    let design = concatenate![Axis(1), Array2::ones((n, 1)), x, z];
    let fit = fit_ols(design.view(), Array1::from(data.y.clone()).view())?;
    let idx = design.ncols() - 1;
    let test = ols_wald_test(&fit, idx)?;
    Ok(Estimate {
        att: fit.coefficients[idx],
        se: fit.coef_standard_errors[idx],
        p: test.p_value,
        n_discarded: 0,
        nonconverged: false,
        trimmed: false,
    })
}

/// AIPW with a trimmed logistic PS and an OLS outcome model fitted on the
/// units that survive trimming. The SE accounts for the PS fit.
fn aipw_ols(data: &Dataset, trimmed: &PsVector, cfg: &CellConfig, replicate: usize) -> Result<Estimate> {
    let kept: Vec<usize> = (0..data.n()).filter(|&i| trimmed.kept[i]).collect();
    let x = data.observed();
    let mut rng = cfg.stream(replicate, StreamPurpose::EnsembleOutcome, 0);
    let model = OutcomeModel::fit(
        rows(x, &kept).view(),
        &pick(&data.y, &kept),
        &pick(&data.z, &kept),
        OutcomeMethod::Ols,
        &mut rng,
    )?;
    let (q1, q0) = model.counterfactuals(x)?;
    let design = main_effects_design(x);
    let w = aipw_att_logistic(&data.y, &data.z, trimmed, &q1, &q0, design.view())?;
    Ok(Estimate::weighted(w, trimmed, data.n(), !trimmed.converged))
}

struct EnsembleInputs {
    ps: PsVector,
    q1: Vec<f64>,
    q0: Vec<f64>,
    converged: bool,
}

fn ensemble_inputs(data: &Dataset, cfg: &CellConfig, replicate: usize) -> Result<EnsembleInputs> {
    let x = data.observed();
    let mut ps_rng = cfg.stream(replicate, StreamPurpose::EnsemblePs, 0);
    let raw = estimate_ps(x, &data.z, PsSource::Ensemble, &mut ps_rng)?;
    let ps = truncate_ps(&raw, data.n())?;
    let mut q_rng = cfg.stream(replicate, StreamPurpose::EnsembleOutcome, 0);
    let model = OutcomeModel::fit(x, &data.y, &data.z, OutcomeMethod::Ensemble, &mut q_rng)?;
    let (q1, q0) = model.counterfactuals(x)?;
    Ok(EnsembleInputs {
        converged: ps.converged && model.converged(),
        ps,
        q1,
        q0,
    })
}

/// Applies the requested methods to one generated dataset. Never fails:
/// estimator errors become records flagged `failed`.
pub fn estimate_all(
    data: &Dataset,
    cfg: &CellConfig,
    replicate: usize,
    methods: &[Method],
) -> Vec<EstimateRecord> {
    let x = data.observed();
    let z = &data.z;
    let n = data.n();
    let logistic = methods.iter().any(|m| m.uses_logistic_ps()).then(|| {
        let mut unused = cfg.stream(replicate, StreamPurpose::EnsemblePs, 1);
        estimate_ps(x, z, PsSource::Logistic, &mut unused)
    });
    let trimmed = methods
        .iter()
        .any(|m| matches!(m, Method::Ipw | Method::Aipw))
        .then(|| match &logistic {
            Some(Ok(ps)) => trim_ps(ps, z, DEFAULT_TRIM),
            Some(Err(e)) => Err(e.clone()),
            None => unreachable!(),
        });
    let ensemble = methods
        .iter()
        .any(|m| m.uses_ensemble())
        .then(|| ensemble_inputs(data, cfg, replicate));

    let logistic_ps = || logistic.clone().expect("logistic ps requested");
    let trimmed_ps = || trimmed.clone().expect("trimmed ps requested");
    let ens = || ensemble.as_ref().expect("ensemble requested").as_ref().map_err(Clone::clone);

    methods
        .iter()
        .map(|&method| {
            let result: Result<Estimate> = match method {
                Method::Lr => linear_regression(data),
                Method::Cem2 | Method::Cem5 => {
                    let bins = if method == Method::Cem2 { 2 } else { 5 };
                    cem_match(x, z, bins).and_then(|s| cem_att(&data.y, z, &s)).map(|m| Estimate {
                        att: m.att,
                        se: m.theoretical_se,
                        p: m.p_value,
                        n_discarded: m.n_discarded,
                        nonconverged: false,
                        trimmed: false,
                    })
                }
                Method::Mdm => logistic_ps().and_then(|ps| {
                    let set = mdm_match(x, z, &ps)?;
                    Ok(Estimate::matched(matched_att(&data.y, &set)?, &ps))
                }),
                Method::Psm | Method::Psm12 => logistic_ps().and_then(|ps| {
                    let ratio = if method == Method::Psm { MatchRatio::One } else { MatchRatio::Two };
                    let set = psm_match(&ps, z, ratio)?;
                    Ok(Estimate::matched(matched_att(&data.y, &set)?, &ps))
                }),
                Method::Ipw => trimmed_ps().and_then(|ps| {
                    let w = ipw_att_logistic(&data.y, z, &ps, main_effects_design(x).view())?;
                    Ok(Estimate::weighted(w, &ps, n, !ps.converged))
                }),
                Method::Aipw => trimmed_ps().and_then(|ps| aipw_ols(data, &ps, cfg, replicate)),
                Method::AipwSl => ens().and_then(|e| {
                    let w = aipw_att(&data.y, z, &e.ps, &e.q1, &e.q0)?;
                    Ok(Estimate::weighted(w, &e.ps, n, !e.converged))
                }),
                Method::TmleSl => ens().and_then(|e| {
                    let t = tmle_att(&data.y, z, &e.q1, &e.q0, &e.ps)?;
                    Ok(Estimate {
                        att: t.att,
                        se: t.theoretical_se,
                        p: t.p_value,
                        n_discarded: 0,
                        nonconverged: !(e.converged && t.converged),
                        trimmed: false,
                    })
                }),
            };
            let n_treated = data.n_treated();
            match result {
                Ok(e) => EstimateRecord {
                    method,
                    replicate,
                    att: e.att,
                    theoretical_se: e.se,
                    p_value: e.p,
                    n_discarded: e.n_discarded,
                    n_treated,
                    flags: RecordFlags {
                        nonconverged: e.nonconverged,
                        trimmed: e.trimmed,
                        ..Default::default()
                    },
                    detail: String::new(),
                },
                Err(err) => EstimateRecord::failure(method, replicate, n_treated, &err),
            }
        })
        .collect()
}

/// Generates replicate `replicate` of `cfg` and runs `methods` on it.
pub fn run_replicate(
    cfg: &CellConfig,
    intercept: f64,
    replicate: usize,
    methods: &[Method],
) -> Vec<EstimateRecord> {
    match generate_replicate(cfg, intercept, replicate) {
        Ok((data, redraws)) => {
            let mut records = estimate_all(&data, cfg, replicate, methods);
            if redraws > 0 {
                records.iter_mut().for_each(|r| r.flags.redrawn = true);
            }
            records
        }
        Err(err) => methods
            .iter()
            .map(|&m| {
                let mut r = EstimateRecord::failure(m, replicate, 0, &err);
                r.flags.redrawn = true;
                r
            })
            .collect(),
    }
}

/// All replicates of one cell, replicate-major, in deterministic order.
/// Replicates run on the current rayon pool.
pub fn run_cell(cfg: &CellConfig, intercept: f64, methods: &[Method]) -> Vec<EstimateRecord> {
    (0..cfg.n_reps)
        .into_par_iter()
        .map(|r| run_replicate(cfg, intercept, r, methods))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Intercept and true ATT of a cell, from the table when present and by
/// on-the-fly calibration otherwise.
pub fn cell_constants(cfg: &CellConfig, golden: &GoldenTable) -> Result<(f64, f64)> {
    if let Some(row) = golden.lookup(cfg.scenario, cfg.prevalence) {
        let truth = golden.truth(cfg).expect("row present");
        return Ok((row.intercept, truth));
    }
    let seed = golden.rows.first().map_or(0, |r| r.oracle_seed);
    let table = GoldenTable::compute(
        &[cfg.scenario],
        &[cfg.prevalence],
        seed,
        crate::dgp::DEFAULT_CALIBRATION_DRAWS,
        crate::dgp::DEFAULT_CALIBRATION_DRAWS,
    )?;
    let row = table.rows[0];
    Ok((row.intercept, table.truth(cfg).expect("row present")))
}

#[derive(Debug, Clone)]
pub struct GridOptions {
    pub parallelism: usize,
    pub methods: Vec<Method>,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            parallelism: 1,
            methods: Method::ALL.to_vec(),
        }
    }
}

/// Runs every cell into `store`, skipping cells the manifest already marks
/// complete. The store contents do not depend on `parallelism`.
pub fn run_grid(
    grid: &[CellConfig],
    golden: &GoldenTable,
    store: &ResultStore,
    options: &GridOptions,
) -> Result<GridSummary> {
    if options.parallelism == 0 {
        return Err(Error::InvalidInput("parallelism must be at least 1".into()));
    }
    if options.methods.is_empty() {
        return Err(Error::InvalidInput("empty method list".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism)
        .build()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut manifest = store.open_manifest(grid, &options.methods)?;
    let mut summary = GridSummary::default();
    for cfg in grid {
        let id = cfg.id();
        if manifest.is_complete(&id) && store.has_records(&id) {
            summary.skipped += 1;
            continue;
        }
        let constants = pool.install(|| cell_constants(cfg, golden));
        let (intercept, truth) = match constants {
            Ok(c) => c,
            Err(e) => {
                summary.failed.push((id, e.to_string()));
                continue;
            }
        };
        let records = pool.install(|| run_cell(cfg, intercept, &options.methods));
        summary.failed_records += records.iter().filter(|r| r.flags.failed).count();
        store.write_records(&id, &records)?;
        manifest.mark_complete(cfg, intercept, truth);
        store.write_manifest(&manifest)?;
        summary.completed += 1;
    }
    store.write_cell_metrics(&manifest)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::Prevalence;

    fn cell(null_effect: bool) -> CellConfig {
        CellConfig {
            scenario: 1,
            setting: 1,
            prevalence: Prevalence::new(0.5).unwrap(),
            null_effect,
            n_reps: 3,
            master_seed: 2024,
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("PSM_1:3".parse::<Method>().is_err());
    }

    #[test]
    fn flags_round_trip() {
        let f = RecordFlags { trimmed: true, failed: true, ..Default::default() };
        assert_eq!(f.to_string(), "trimmed|failed");
        assert_eq!(f.to_string().parse::<RecordFlags>().unwrap(), f);
        assert_eq!("".parse::<RecordFlags>().unwrap(), RecordFlags::default());
    }

    #[test]
    fn ten_records_per_replicate_and_deterministic() {
        let a = run_replicate(&cell(false), 0.0, 1, &Method::ALL);
        assert_eq!(a.len(), 10);
        let b = run_replicate(&cell(false), 0.0, 1, &Method::ALL);
        let key = |r: &[EstimateRecord]| format!("{r:?}");
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn psm_discards_match_the_match_set() {
        let cfg = cell(false);
        let (data, _) = generate_replicate(&cfg, 0.0, 0).unwrap();
        let mut rng = cfg.stream(0, StreamPurpose::EnsemblePs, 1);
        let ps = estimate_ps(data.observed(), &data.z, PsSource::Logistic, &mut rng).unwrap();
        let set = psm_match(&ps, &data.z, MatchRatio::One).unwrap();
        let rec = &estimate_all(&data, &cfg, 0, &[Method::Psm])[0];
        assert_eq!(rec.n_discarded, set.discarded_treated.len());
    }

    #[test]
    fn method_subset_is_respected() {
        let recs = run_cell(&cell(true), 0.0, &[Method::Psm, Method::Ipw]);
        assert_eq!(recs.len(), 6);
        assert!(recs.iter().all(|r| matches!(r.method, Method::Psm | Method::Ipw)));
    }
}
