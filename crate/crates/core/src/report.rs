//! Summary tables recomputed from the raw records of a result store.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{aggregate_cell, CellEntry, EstimateRecord, Method, MethodMetrics, ResultStore};

/// One method in one (scenario, setting, prevalence) design point, with the
/// type-I rate taken from the matching null cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub scenario: u8,
    pub setting: u8,
    pub prevalence: f64,
    pub n: usize,
    pub method: Method,
    pub truth: f64,
    pub n_valid: usize,
    pub bias: f64,
    pub empirical_sd: f64,
    pub avg_theoretical_sd: f64,
    pub mse: f64,
    pub type1_rate: f64,
    pub failure_rate: f64,
    pub null_failure_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

type DesignKey = (u8, u8, u64);

fn key(c: &CellEntry) -> DesignKey {
    (c.scenario, c.setting, (c.prevalence * 1e6).round() as u64)
}

fn metrics_by_method(records: &[EstimateRecord], cell: &CellEntry) -> Result<BTreeMap<Method, MethodMetrics>> {
    let truth = cell.truth.ok_or_else(|| Error::Store(format!("cell {} has no truth", cell.id)))?;
    let methods: Vec<Method> = {
        let mut m: Vec<Method> = records.iter().map(|r| r.method).collect();
        m.sort();
        m.dedup();
        m
    };
    let mut out = BTreeMap::new();
    for m in methods {
        let subset: Vec<EstimateRecord> = records.iter().filter(|r| r.method == m).cloned().collect();
        let metrics = match aggregate_cell(&subset, truth, cell.null_effect) {
            Ok(c) => c.methods.into_iter().next().expect("one method"),
            Err(Error::InsufficientReplicates { valid, .. }) => MethodMetrics {
                method: m,
                n_records: subset.len(),
                n_valid: valid,
                bias: f64::NAN,
                empirical_sd: f64::NAN,
                avg_theoretical_sd: f64::NAN,
                mse: f64::NAN,
                type1_rate: f64::NAN,
                failure_rate: (subset.len() - valid) as f64 / subset.len() as f64,
                mean_discarded: f64::NAN,
                nonconverged_rate: f64::NAN,
            },
            Err(e) => return Err(e),
        };
        out.insert(m, metrics);
    }
    Ok(out)
}

/// Reads every completed cell and joins effect cells with their null cells.
/// A store without completed cells is an error.
pub fn build_report(store: &ResultStore) -> Result<Report> {
    let manifest = store
        .read_manifest()?
        .ok_or_else(|| Error::Store(format!("no cells: {} has no manifest", store.root().display())))?;
    let cells: Vec<&CellEntry> = manifest.completed().collect();
    if cells.is_empty() {
        return Err(Error::Store("no cells: the result store holds no completed cells".into()));
    }
    let mut designs: BTreeMap<DesignKey, (Option<&CellEntry>, Option<&CellEntry>)> = BTreeMap::new();
    for c in cells {
        let slot = designs.entry(key(c)).or_default();
        if c.null_effect {
            slot.1 = Some(c);
        } else {
            slot.0 = Some(c);
        }
    }
    let mut rows = Vec::new();
    for (effect, null) in designs.into_values() {
        let load = |c: Option<&CellEntry>| -> Result<BTreeMap<Method, MethodMetrics>> {
            match c {
                Some(c) => metrics_by_method(&store.read_records(&c.id)?, c),
                None => Ok(BTreeMap::new()),
            }
        };
        let em = load(effect)?;
        let nm = load(null)?;
        let any = effect.or(null).expect("one side present");
        let mut methods: Vec<Method> = em.keys().chain(nm.keys()).copied().collect();
        methods.sort();
        methods.dedup();
        for m in methods {
            let e = em.get(&m);
            let nl = nm.get(&m);
            let pick = |f: fn(&MethodMetrics) -> f64| e.map_or(f64::NAN, f);
            rows.push(ReportRow {
                scenario: any.scenario,
                setting: any.setting,
                prevalence: any.prevalence,
                n: any.n,
                method: m,
                truth: effect.and_then(|c| c.truth).unwrap_or(f64::NAN),
                n_valid: e.map_or(0, |x| x.n_valid),
                bias: pick(|x| x.bias),
                empirical_sd: pick(|x| x.empirical_sd),
                avg_theoretical_sd: pick(|x| x.avg_theoretical_sd),
                mse: pick(|x| x.mse),
                type1_rate: nl.map_or(f64::NAN, |x| x.type1_rate),
                failure_rate: pick(|x| x.failure_rate),
                null_failure_rate: nl.map_or(f64::NAN, |x| x.failure_rate),
            });
        }
    }
    Ok(Report { rows })
}

impl Report {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }

    /// Fixed-width text, one block per design point.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let mut current: Option<(u8, u8, u64)> = None;
        for r in &self.rows {
            let k = (r.scenario, r.setting, (r.prevalence * 1e6).round() as u64);
            if current != Some(k) {
                current = Some(k);
                let _ = writeln!(
                    out,
                    "\nscenario {} setting {} prevalence {:.2} (n = {}, truth = {:.4})",
                    r.scenario, r.setting, r.prevalence, r.n, r.truth
                );
                let _ = writeln!(
                    out,
                    "{:<8} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8}",
                    "method", "bias", "emp_sd", "avg_se", "mse", "type1", "fail"
                );
            }
            let _ = writeln!(
                out,
                "{:<8} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>8.3} {:>8.3}",
                r.method.as_str(),
                r.bias,
                r.empirical_sd,
                r.avg_theoretical_sd,
                r.mse,
                r.type1_rate,
                r.failure_rate
            );
        }
        out
    }
}
