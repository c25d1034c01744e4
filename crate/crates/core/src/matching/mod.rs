//! Matching estimators: greedy nearest-neighbour matching on the propensity
//! score or Mahalanobis distance, coarsened exact matching, and the
//! matched-pairs ATT with its paired-t standard error.

mod cem;
mod greedy;

pub use cem::{cem_att, cem_match, CemStrata};
pub use greedy::{logit_caliper, mahalanobis_distance, mdm_match, psm_match, CALIPER_SD_MULTIPLE};

use crate::error::{Error, Result};
use crate::stats::{mean, sample_sd, t_two_sided_p};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchRatio {
    One = 1,
    Two = 2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchedPair {
    pub treated: usize,
    pub controls: Vec<usize>,
}

/// Treated units with their matched controls (without replacement).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchSet {
    pub pairs: Vec<MatchedPair>,
    pub discarded_treated: Vec<usize>,
    pub ratio: MatchRatio,
}

impl MatchSet {
    /// Checks the structural invariants against the treatment vector.
    pub fn validate(&self, z: &[u8]) -> Result<()> {
        let mut control_seen = vec![false; z.len()];
        let mut treated_seen = vec![false; z.len()];
        for pair in &self.pairs {
            if z.get(pair.treated) != Some(&1) || treated_seen[pair.treated] {
                return Err(Error::InvalidInput(format!("bad treated unit {}", pair.treated)));
            }
            treated_seen[pair.treated] = true;
            if pair.controls.is_empty() || pair.controls.len() > self.ratio as usize {
                return Err(Error::InvalidInput(format!(
                    "treated {} holds {} controls",
                    pair.treated,
                    pair.controls.len()
                )));
            }
            for &c in &pair.controls {
                if z.get(c) != Some(&0) || control_seen[c] {
                    return Err(Error::InvalidInput(format!("control {c} reused or not a control")));
                }
                control_seen[c] = true;
            }
        }
        for &t in &self.discarded_treated {
            if z.get(t) != Some(&1) || treated_seen[t] {
                return Err(Error::InvalidInput(format!("bad discarded unit {t}")));
            }
            treated_seen[t] = true;
        }
        let all_treated = z.iter().enumerate().all(|(i, &zi)| zi == 0 || treated_seen[i]);
        if !all_treated {
            return Err(Error::InvalidInput("a treated unit is missing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedAttEstimate {
    pub att: f64,
    pub theoretical_se: f64,
    pub n_pairs: usize,
    pub p_value: f64,
    pub n_discarded: usize,
}

/// Paired-t summary of per-treated differences.
pub(crate) fn paired_estimate(diffs: &[f64], n_discarded: usize) -> Result<MatchedAttEstimate> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::TooFewPairs(n));
    }
    let att = mean(diffs);
    let sd = sample_sd(diffs);
    if sd == 0.0 {
        return Err(Error::ZeroVariance { att });
    }
    let se = sd / (n as f64).sqrt();
    Ok(MatchedAttEstimate {
        att,
        theoretical_se: se,
        n_pairs: n,
        p_value: t_two_sided_p(att / se, (n - 1) as f64),
        n_discarded,
    })
}

/// Mean over pairs of `Y_treated − mean(Y_controls)`.
pub fn matched_att(y: &[f64], matches: &MatchSet) -> Result<MatchedAttEstimate> {
    let diffs: Vec<f64> = matches
        .pairs
        .iter()
        .map(|pair| {
            let yc = pair.controls.iter().map(|&c| y[c]).sum::<f64>() / pair.controls.len() as f64;
            y[pair.treated] - yc
        })
        .collect();
    paired_estimate(&diffs, matches.discarded_treated.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[(usize, &[usize])]) -> MatchSet {
        MatchSet {
            pairs: pairs
                .iter()
                .map(|(t, c)| MatchedPair { treated: *t, controls: c.to_vec() })
                .collect(),
            discarded_treated: vec![],
            ratio: MatchRatio::Two,
        }
    }

    #[test]
    fn constant_differences_have_zero_variance() {
        let y = [2.0, 1.0, 3.0, 2.0];
        let m = set(&[(0, &[1]), (2, &[3])]);
        assert_eq!(matched_att(&y, &m).unwrap_err(), Error::ZeroVariance { att: 1.0 });
    }

    #[test]
    fn textbook_paired_t() {
        let y = [1.0, 1.0, 3.0, 1.0];
        let est = matched_att(&y, &set(&[(0, &[1]), (2, &[3])])).unwrap();
        assert_eq!(est.att, 1.0);
        assert!((est.theoretical_se - 1.0).abs() < 1e-12);
        assert!((est.p_value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ratio_two_averages_controls() {
        // treated 4 vs controls (1, 3) gives d = 2; second pair d = 0
        let y = [4.0, 1.0, 3.0, 5.0, 5.0];
        let est = matched_att(&y, &set(&[(0, &[1, 2]), (3, &[4])])).unwrap();
        assert_eq!(est.att, 1.0);
    }

    #[test]
    fn too_few_pairs() {
        let y = [4.0, 1.0];
        assert_eq!(matched_att(&y, &set(&[(0, &[1])])).unwrap_err(), Error::TooFewPairs(1));
    }

    #[test]
    fn validate_rejects_reused_control() {
        let m = set(&[(0, &[2]), (1, &[2])]);
        assert!(m.validate(&[1, 1, 0]).is_err());
        let ok = set(&[(0, &[2]), (1, &[3])]);
        assert!(ok.validate(&[1, 1, 0, 0]).is_ok());
    }
}
