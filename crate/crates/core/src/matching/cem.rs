use std::collections::BTreeMap;

use ndarray::ArrayView2;

use super::{paired_estimate, MatchedAttEstimate};
use crate::error::{Error, Result};

/// Coarsened strata: per-covariate equal-width bins between min and max.
#[derive(Debug, Clone, PartialEq)]
pub struct CemStrata {
    pub n_bins: usize,
    /// `n_bins + 1` edges per covariate.
    pub bin_edges: Vec<Vec<f64>>,
    pub signature: Vec<Vec<usize>>,
    /// True iff the unit's stratum holds at least one treated and one control.
    pub retained: Vec<bool>,
}

impl CemStrata {
    pub fn n_retained_treated(&self, z: &[u8]) -> usize {
        self.retained.iter().zip(z).filter(|(&r, &zi)| r && zi == 1).count()
    }
}

fn bin_index(v: f64, min: f64, width: f64, n_bins: usize) -> usize {
    let raw = ((v - min) / width).floor();
    if raw <= 0.0 {
        0
    } else {
        (raw as usize).min(n_bins - 1)
    }
}

pub fn cem_match(x: ArrayView2<f64>, z: &[u8], n_bins: usize) -> Result<CemStrata> {
    let (n, d) = x.dim();
    if z.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: z.len() });
    }
    if n_bins == 0 {
        return Err(Error::InvalidInput("n_bins must be positive".into()));
    }
    let mut bin_edges = Vec::with_capacity(d);
    let mut signature = vec![Vec::with_capacity(d); n];
    for (j, col) in x.columns().into_iter().enumerate() {
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            return Err(Error::Degenerate { column: j });
        }
        let width = (max - min) / n_bins as f64;
        bin_edges.push((0..=n_bins).map(|k| min + k as f64 * width).collect());
        for (i, &v) in col.iter().enumerate() {
            signature[i].push(bin_index(v, min, width, n_bins));
        }
    }
    let mut counts: BTreeMap<&[usize], (usize, usize)> = BTreeMap::new();
    for (sig, &zi) in signature.iter().zip(z) {
        let e = counts.entry(sig.as_slice()).or_default();
        if zi == 1 {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    let retained = signature
        .iter()
        .map(|s| {
            let (t, c) = counts[s.as_slice()];
            t > 0 && c > 0
        })
        .collect();
    Ok(CemStrata {
        n_bins,
        bin_edges,
        signature,
        retained,
    })
}

/// Each retained treated unit against the mean control outcome of its stratum.
pub fn cem_att(y: &[f64], z: &[u8], strata: &CemStrata) -> Result<MatchedAttEstimate> {
    if y.len() != z.len() || strata.signature.len() != z.len() {
        return Err(Error::DimensionMismatch { expected: z.len(), got: y.len() });
    }
    let mut control_sums: BTreeMap<&[usize], (f64, usize)> = BTreeMap::new();
    for i in 0..z.len() {
        if z[i] == 0 && strata.retained[i] {
            let e = control_sums.entry(strata.signature[i].as_slice()).or_default();
            e.0 += y[i];
            e.1 += 1;
        }
    }
    let mut diffs = Vec::new();
    let mut discarded = 0;
    for i in 0..z.len() {
        if z[i] != 1 {
            continue;
        }
        if !strata.retained[i] {
            discarded += 1;
            continue;
        }
        let (s, c) = control_sums[strata.signature[i].as_slice()];
        diffs.push(y[i] - s / c as f64);
    }
    paired_estimate(&diffs, discarded)
}
