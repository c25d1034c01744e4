use ndarray::{Array2, ArrayView1, ArrayView2};

use super::{MatchRatio, MatchSet, MatchedPair};
use crate::error::{Error, Result};
use crate::linalg::{sample_covariance, SpdMatrix};
use crate::propensity::PsVector;
use crate::stats::{logit, sample_sd};

/// Caliper width in standard deviations of logit(ps).
pub const CALIPER_SD_MULTIPLE: f64 = 0.2;

/// `0.2 × SD(logit ps)` over all units.
pub fn logit_caliper(ps: &PsVector) -> f64 {
    let lp: Vec<f64> = ps.values.iter().map(|&p| logit(p)).collect();
    CALIPER_SD_MULTIPLE * sample_sd(&lp)
}

pub fn mahalanobis_distance(u: ArrayView1<f64>, v: ArrayView1<f64>, cov: &SpdMatrix) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), got: v.len() });
    }
    let diff = &u - &v;
    Ok(cov.inverse_quad_form(diff.view())?.max(0.0).sqrt())
}

/// Treated units by descending ps, ties by lower index.
fn treated_order(ps: &[f64], z: &[u8]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..z.len()).filter(|&i| z[i] == 1).collect();
    order.sort_by(|&a, &b| ps[b].total_cmp(&ps[a]).then(a.cmp(&b)));
    order
}

fn check_inputs(ps: &PsVector, z: &[u8]) -> Result<()> {
    if ps.len() != z.len() {
        return Err(Error::DimensionMismatch { expected: z.len(), got: ps.len() });
    }
    let treated = z.iter().filter(|&&v| v == 1).count();
    if treated == 0 || treated == z.len() {
        return Err(Error::OneClass);
    }
    Ok(())
}

/// Greedy matching without replacement: each treated unit (in `order`) takes
/// its nearest eligible unused controls, lowest index on distance ties.
fn greedy<D, E>(order: &[usize], z: &[u8], ratio: MatchRatio, distance: D, eligible: E) -> Result<MatchSet>
where
    D: Fn(usize, usize) -> f64,
    E: Fn(usize, usize) -> bool,
{
    let mut used = vec![false; z.len()];
    let controls: Vec<usize> = (0..z.len()).filter(|&i| z[i] == 0).collect();
    let mut pairs = Vec::new();
    let mut discarded = Vec::new();
    for &t in order {
        let mut taken = Vec::with_capacity(ratio as usize);
        for _ in 0..ratio as usize {
            let mut best: Option<(f64, usize)> = None;
            for &c in &controls {
                if used[c] || !eligible(t, c) {
                    continue;
                }
                let d = distance(t, c);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, c));
                }
            }
            match best {
                Some((_, c)) => {
                    used[c] = true;
                    taken.push(c);
                }
                None => break,
            }
        }
        if taken.is_empty() {
            discarded.push(t);
        } else {
            pairs.push(MatchedPair { treated: t, controls: taken });
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoMatches);
    }
    Ok(MatchSet {
        pairs,
        discarded_treated: discarded,
        ratio,
    })
}

/// Nearest-neighbour matching on logit(ps) within the caliper.
pub fn psm_match(ps: &PsVector, z: &[u8], ratio: MatchRatio) -> Result<MatchSet> {
    check_inputs(ps, z)?;
    let lp: Vec<f64> = ps.values.iter().map(|&p| logit(p)).collect();
    let caliper = logit_caliper(ps);
    let order = treated_order(&ps.values, z);
    greedy(
        &order,
        z,
        ratio,
        |t, c| (lp[t] - lp[c]).abs(),
        |t, c| (lp[t] - lp[c]).abs() <= caliper,
    )
}

/// Nearest-neighbour 1:1 matching on Mahalanobis distance, restricted to
/// controls inside the logit-ps caliper.
pub fn mdm_match(x: ArrayView2<f64>, z: &[u8], ps: &PsVector) -> Result<MatchSet> {
    check_inputs(ps, z)?;
    if x.nrows() != z.len() {
        return Err(Error::DimensionMismatch { expected: z.len(), got: x.nrows() });
    }
    let cov = sample_covariance(x)?;
    // whiten once: d(u, v) = ‖L⁻¹xᵤ − L⁻¹xᵥ‖
    let l = cov.factor();
    let (n, d) = x.dim();
    let mut w = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        for r in 0..d {
            let mut s = x[[i, r]];
            for k in 0..r {
                s -= l[[r, k]] * w[[i, k]];
            }
            w[[i, r]] = s / l[[r, r]];
        }
    }
    let lp: Vec<f64> = ps.values.iter().map(|&p| logit(p)).collect();
    let caliper = logit_caliper(ps);
    let order = treated_order(&ps.values, z);
    greedy(
        &order,
        z,
        MatchRatio::One,
        |t, c| {
            w.row(t)
                .iter()
                .zip(w.row(c).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        },
        |t, c| (lp[t] - lp[c]).abs() <= caliper,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propensity::PsSource;
    use ndarray::{array, Array2};

    fn ps(v: &[f64]) -> PsVector {
        PsVector::from_values(v.to_vec(), PsSource::Logistic).unwrap()
    }

    #[test]
    fn nearest_control_wins() {
        // spread of the other values keeps the caliper wide
        let p = ps(&[0.5, 0.5, 0.9, 0.05, 0.95]);
        let z = [1, 0, 0, 0, 0];
        let m = psm_match(&p, &z, MatchRatio::One).unwrap();
        assert_eq!(m.pairs[0].controls, vec![1]);
    }

    #[test]
    fn higher_ps_treated_goes_first() {
        let p = ps(&[0.30, 0.32, 0.31, 0.05, 0.95, 0.5]);
        let z = [1, 1, 0, 0, 0, 0];
        let caliper = logit_caliper(&p);
        assert!((logit(0.30) - logit(0.31)).abs() <= caliper);
        assert!((logit(0.30) - logit(0.05)).abs() > caliper);
        assert!((logit(0.30) - logit(0.5)).abs() > caliper);
        let m = psm_match(&p, &z, MatchRatio::One).unwrap();
        assert_eq!(m.pairs, vec![MatchedPair { treated: 1, controls: vec![2] }]);
        assert_eq!(m.discarded_treated, vec![0]);
    }

    #[test]
    fn no_eligible_controls() {
        let p = ps(&[0.9, 0.91, 0.05, 0.06]);
        let z = [1, 1, 0, 0];
        assert_eq!(psm_match(&p, &z, MatchRatio::One).unwrap_err(), Error::NoMatches);
    }

    #[test]
    fn identity_covariance_is_euclidean() {
        let cov = SpdMatrix::new(Array2::eye(3)).unwrap();
        let u = array![1.0, 2.0, 3.0];
        let v = array![4.0, 6.0, 3.0];
        assert!((mahalanobis_distance(u.view(), v.view(), &cov).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(mahalanobis_distance(u.view(), u.view(), &cov).unwrap(), 0.0);
    }

    #[test]
    fn one_dimensional_mdm_is_nearest_on_x() {
        let x = array![[0.0], [1.0], [0.9], [5.0], [0.1], [3.0]];
        let z = [1, 1, 0, 0, 0, 0];
        // constant ps: every control is inside the caliper (0.2 × 0 = 0 distance)
        let p = ps(&[0.5; 6]);
        let m = mdm_match(x.view(), &z, &p).unwrap();
        // ps ties resolve to index order: unit 0 first takes 0.1, unit 1 takes 0.9
        assert_eq!(
            m.pairs,
            vec![
                MatchedPair { treated: 0, controls: vec![4] },
                MatchedPair { treated: 1, controls: vec![2] }
            ]
        );
    }
}
