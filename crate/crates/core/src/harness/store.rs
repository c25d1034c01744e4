use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::aggregate_cell_lenient;
use super::{EstimateRecord, Method};
use crate::dgp::{CellConfig, Prevalence};
use crate::error::{Error, Result};

/// Bumped whenever a CSV or manifest column changes.
pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const CELL_METRICS: &str = "cell_metrics.csv";
const RECORDS_DIR: &str = "records";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub id: String,
    pub scenario: u8,
    pub setting: u8,
    pub prevalence: f64,
    pub null_effect: bool,
    pub n: usize,
    pub n_reps: usize,
    pub master_seed: u64,
    pub intercept: Option<f64>,
    pub truth: Option<f64>,
    pub complete: bool,
    pub records_file: String,
}

impl CellEntry {
    fn new(cfg: &CellConfig) -> Self {
        let id = cfg.id();
        Self {
            records_file: format!("{RECORDS_DIR}/{id}.csv"),
            id,
            scenario: cfg.scenario,
            setting: cfg.setting,
            prevalence: cfg.prevalence.value(),
            null_effect: cfg.null_effect,
            n: cfg.n(),
            n_reps: cfg.n_reps,
            master_seed: cfg.master_seed,
            intercept: None,
            truth: None,
            complete: false,
        }
    }

    pub fn config(&self) -> Result<CellConfig> {
        Ok(CellConfig {
            scenario: self.scenario,
            setting: self.setting,
            prevalence: Prevalence::new(self.prevalence)?,
            null_effect: self.null_effect,
            n_reps: self.n_reps,
            master_seed: self.master_seed,
        })
    }

    fn same_design(&self, other: &CellEntry) -> bool {
        self.id == other.id
            && self.n_reps == other.n_reps
            && self.master_seed == other.master_seed
    }
}

/// Run description; contains nothing that depends on wall time, paths or
/// thread count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub crate_version: String,
    pub methods: Vec<Method>,
    pub decisions: BTreeMap<String, String>,
    pub cells: Vec<CellEntry>,
}

fn default_decisions() -> BTreeMap<String, String> {
    [
        ("mse_convention", "mean squared error over valid replicates"),
        ("failed_records", "excluded from metric denominators; see failure_rate"),
        ("null_cells", "independent substreams from effect cells"),
        ("type1_level", "0.05"),
        ("ps_trim", "0.05, logistic ps not refitted after trimming"),
        ("aipw_outcome_sample", "units kept after trimming"),
        ("ensemble_ps", "truncated at 5/(sqrt(n) ln n)"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

impl Manifest {
    fn new(methods: &[Method]) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            methods: methods.to_vec(),
            decisions: default_decisions(),
            cells: Vec::new(),
        }
    }

    pub fn is_complete(&self, id: &str) -> bool {
        self.cells.iter().any(|c| c.id == id && c.complete)
    }

    pub fn mark_complete(&mut self, cfg: &CellConfig, intercept: f64, truth: f64) {
        let id = cfg.id();
        if let Some(c) = self.cells.iter_mut().find(|c| c.id == id) {
            c.intercept = Some(intercept);
            c.truth = Some(truth);
            c.complete = true;
        }
    }

    pub fn completed(&self) -> impl Iterator<Item = &CellEntry> {
        self.cells.iter().filter(|c| c.complete)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridSummary {
    pub completed: usize,
    pub skipped: usize,
    pub failed_records: usize,
    /// Cells that could not be run, with the reason.
    pub failed: Vec<(String, String)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordRow {
    method: Method,
    replicate: usize,
    att: f64,
    se: f64,
    p: f64,
    n_discarded: usize,
    n_treated: usize,
    flags: String,
    detail: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsRow {
    cell_id: String,
    scenario: u8,
    setting: u8,
    prevalence: f64,
    null_effect: bool,
    n: usize,
    truth: f64,
    method: Method,
    n_records: usize,
    n_valid: usize,
    bias: f64,
    empirical_sd: f64,
    avg_theoretical_sd: f64,
    mse: f64,
    type1_rate: f64,
    failure_rate: f64,
    mean_discarded: f64,
    nonconverged_rate: f64,
}

/// Directory-backed result store: `manifest.json`, `cell_metrics.csv` and
/// one `records/<cell>.csv` per cell.
#[derive(Debug, Clone)]
pub struct ResultStore {
    root: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl ResultStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn records_path(&self, id: &str) -> PathBuf {
        self.root.join(RECORDS_DIR).join(format!("{id}.csv"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST)
    }

    pub fn cell_metrics_path(&self) -> PathBuf {
        self.root.join(CELL_METRICS)
    }

    pub fn has_records(&self, id: &str) -> bool {
        self.records_path(id).is_file()
    }

    pub fn read_manifest(&self) -> Result<Option<Manifest>> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(None);
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Store(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        Ok(Some(manifest))
    }

    /// Loads the manifest if present and checks that it describes the same
    /// design; otherwise starts a fresh one. Cells are listed in grid order.
    pub fn open_manifest(&self, grid: &[CellConfig], methods: &[Method]) -> Result<Manifest> {
        fs::create_dir_all(self.root.join(RECORDS_DIR))?;
        let previous = self.read_manifest()?;
        let mut manifest = Manifest::new(methods);
        if let Some(prev) = &previous {
            if prev.methods != methods {
                return Err(Error::Store("existing store was run with a different method list".into()));
            }
        }
        for cfg in grid {
            let mut entry = CellEntry::new(cfg);
            if let Some(old) = previous.as_ref().and_then(|p| p.cells.iter().find(|c| c.id == entry.id)) {
                if !old.same_design(&entry) {
                    return Err(Error::Store(format!(
                        "cell {} exists with a different seed or replicate count",
                        entry.id
                    )));
                }
                entry = old.clone();
            }
            if !manifest.cells.iter().any(|c| c.id == entry.id) {
                manifest.cells.push(entry);
            }
        }
        if let Some(prev) = previous {
            for old in prev.cells {
                if !manifest.cells.iter().any(|c| c.id == old.id) {
                    manifest.cells.push(old);
                }
            }
        }
        self.write_manifest(&manifest)?;
        Ok(manifest)
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<()> {
        let mut text = serde_json::to_string_pretty(manifest)?;
        text.push('\n');
        write_atomic(&self.manifest_path(), text.as_bytes())
    }

    pub fn write_records(&self, id: &str, records: &[EstimateRecord]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in records {
            w.serialize(RecordRow {
                method: r.method,
                replicate: r.replicate,
                att: r.att,
                se: r.theoretical_se,
                p: r.p_value,
                n_discarded: r.n_discarded,
                n_treated: r.n_treated,
                flags: r.flags.to_string(),
                detail: r.detail.clone(),
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        fs::create_dir_all(self.root.join(RECORDS_DIR))?;
        write_atomic(&self.records_path(id), &bytes)
    }

    pub fn read_records(&self, id: &str) -> Result<Vec<EstimateRecord>> {
        let mut r = csv::Reader::from_path(self.records_path(id))?;
        r.deserialize::<RecordRow>()
            .map(|row| {
                let row = row?;
                Ok(EstimateRecord {
                    method: row.method,
                    replicate: row.replicate,
                    att: row.att,
                    theoretical_se: row.se,
                    p_value: row.p,
                    n_discarded: row.n_discarded,
                    n_treated: row.n_treated,
                    flags: row.flags.parse()?,
                    detail: row.detail,
                })
            })
            .collect()
    }

    /// Rewrites `cell_metrics.csv` from the records of every completed cell.
    pub fn write_cell_metrics(&self, manifest: &Manifest) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for cell in manifest.completed() {
            let truth = cell
                .truth
                .ok_or_else(|| Error::Store(format!("cell {} has no truth", cell.id)))?;
            let records = self.read_records(&cell.id)?;
            for m in aggregate_cell_lenient(&records, truth, cell.null_effect).methods {
                w.serialize(MetricsRow {
                    cell_id: cell.id.clone(),
                    scenario: cell.scenario,
                    setting: cell.setting,
                    prevalence: cell.prevalence,
                    null_effect: cell.null_effect,
                    n: cell.n,
                    truth,
                    method: m.method,
                    n_records: m.n_records,
                    n_valid: m.n_valid,
                    bias: m.bias,
                    empirical_sd: m.empirical_sd,
                    avg_theoretical_sd: m.avg_theoretical_sd,
                    mse: m.mse,
                    type1_rate: m.type1_rate,
                    failure_rate: m.failure_rate,
                    mean_discarded: m.mean_discarded,
                    nonconverged_rate: m.nonconverged_rate,
                })?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        write_atomic(&self.cell_metrics_path(), &bytes)
    }
}
