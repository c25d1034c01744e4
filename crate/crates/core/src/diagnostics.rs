//! Positivity diagnostics: histograms of propensity scores on [0, 1].

use serde::Serialize;

use crate::dgp::{generate_dataset, Prevalence, ScenarioSpec, SettingSpec, StreamPurpose};
use crate::error::{Error, Result};
use crate::propensity::{estimate_ps, PsSource};
use crate::rng::{derive_stream_id, RngStream};
use crate::stats::expit;

/// Scores below this or above its complement count as tail mass.
pub const TAIL_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistogramSource {
    /// Treatment probabilities of the generating model.
    True,
    Logistic,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub treated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsHistogram {
    pub bins: Vec<HistogramBin>,
    /// Fraction of scores in `[0, 0.05) ∪ (0.95, 1]`.
    pub tail_mass: f64,
}

impl PsHistogram {
    /// Equal-width bins; the last bin is closed on the right.
    pub fn from_scores(ps: &[f64], z: &[u8], n_bins: usize) -> Result<Self> {
        if n_bins == 0 || ps.len() != z.len() || ps.is_empty() {
            return Err(Error::InvalidInput("histogram needs bins and matching, non-empty inputs".into()));
        }
        let width = 1.0 / n_bins as f64;
        let mut bins: Vec<HistogramBin> = (0..n_bins)
            .map(|b| HistogramBin {
                lower: b as f64 * width,
                upper: if b + 1 == n_bins { 1.0 } else { (b + 1) as f64 * width },
                count: 0,
                treated: 0,
            })
            .collect();
        let mut tail = 0usize;
        for (i, &p) in ps.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidProbability { index: i, value: p });
            }
            let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
            bins[b].count += 1;
            bins[b].treated += usize::from(z[i] == 1);
            tail += usize::from(p < TAIL_THRESHOLD || p > 1.0 - TAIL_THRESHOLD);
        }
        Ok(Self {
            bins,
            tail_mass: tail as f64 / ps.len() as f64,
        })
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for b in &self.bins {
            w.serialize(b)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

/// Simulates one population of size `n` and bins its propensity scores.
pub fn ps_histogram(
    scenario: u8,
    prevalence: Prevalence,
    intercept: f64,
    n: usize,
    seed: u64,
    n_bins: usize,
    source: HistogramSource,
) -> Result<PsHistogram> {
    let spec = ScenarioSpec::new(scenario)?;
    let setting = SettingSpec::new(1, false)?;
    let stream = derive_stream_id(&[StreamPurpose::Diagnostic as u64, u64::from(scenario), prevalence.key()]);
    let mut rng = RngStream::new(seed, stream);
    let data = generate_dataset(n, &spec, &setting, intercept, &mut rng)?;
    let ps = match source {
        HistogramSource::True => data
            .all_columns()
            .rows()
            .into_iter()
            .map(|r| expit(intercept + spec.selection_score(r.as_slice().expect("row-major"))))
            .collect(),
        HistogramSource::Logistic => estimate_ps(data.observed(), &data.z, PsSource::Logistic, &mut rng)?.values,
        HistogramSource::Ensemble => estimate_ps(data.observed(), &data.z, PsSource::Ensemble, &mut rng)?.values,
    };
    PsHistogram::from_scores(&ps, &data.z, n_bins)
}
