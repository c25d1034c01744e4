use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use attbench_core::dgp::{CellConfig, Prevalence, DEFAULT_PREVALENCES};
use attbench_core::harness::Method;
use serde::Deserialize;

pub const DEFAULT_OUTPUT_DIR: &str = "attbench-results";
pub const DEFAULT_REPS: usize = 200;
pub const DEFAULT_SEED: u64 = 20_240_101;
pub const DEFAULT_ORACLE_SEED: u64 = 7_350_001;
pub const SMOKE_REPS: usize = 20;

/// Contents of the `--config` TOML file. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub scenarios: Option<Vec<u8>>,
    pub settings: Option<Vec<u8>>,
    pub prevalences: Option<Vec<f64>>,
    pub n_reps: Option<usize>,
    pub master_seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub methods: Option<Vec<String>>,
    pub null_cells: Option<bool>,
    pub effect_cells: Option<bool>,
    pub golden: Option<PathBuf>,
    pub oracle_seed: Option<u64>,
    pub calibration_draws: Option<usize>,
    pub truth_draws: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenarios: Vec<u8>,
    pub settings: Vec<u8>,
    pub prevalences: Vec<Prevalence>,
    pub n_reps: usize,
    pub master_seed: u64,
    pub parallelism: usize,
    pub output_dir: PathBuf,
    pub methods: Vec<Method>,
    pub effect_cells: bool,
    pub null_cells: bool,
}

impl RunConfig {
    /// Effect cells first, then null cells, each in scenario, setting,
    /// prevalence order.
    pub fn grid(&self) -> Vec<CellConfig> {
        let mut flags = Vec::new();
        if self.effect_cells {
            flags.push(false);
        }
        if self.null_cells {
            flags.push(true);
        }
        let mut cells = Vec::new();
        for null_effect in flags {
            for &scenario in &self.scenarios {
                for &setting in &self.settings {
                    for &prevalence in &self.prevalences {
                        cells.push(CellConfig {
                            scenario,
                            setting,
                            prevalence,
                            null_effect,
                            n_reps: self.n_reps,
                            master_seed: self.master_seed,
                        });
                    }
                }
            }
        }
        cells
    }
}

pub fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    let mut methods = names
        .iter()
        .map(|s| s.parse::<Method>().map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    methods.sort();
    methods.dedup();
    if methods.is_empty() {
        bail!("method list is empty");
    }
    Ok(methods)
}

pub fn parse_prevalences(values: &[f64]) -> Result<Vec<Prevalence>> {
    values.iter().map(|&p| Prevalence::new(p).map_err(anyhow::Error::from)).collect()
}

pub fn check_ids(label: &str, ids: &[u8]) -> Result<()> {
    if ids.is_empty() {
        bail!("no {label}s selected");
    }
    if let Some(bad) = ids.iter().find(|&&i| !(1..=3).contains(&i)) {
        bail!("{label} {bad} does not exist (expected 1, 2 or 3)");
    }
    Ok(())
}

pub fn default_prevalences() -> Vec<f64> {
    DEFAULT_PREVALENCES.to_vec()
}
