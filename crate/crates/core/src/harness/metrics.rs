use serde::{Deserialize, Serialize};

use super::{EstimateRecord, Method};
use crate::error::{Error, Result};
use crate::stats::{mean, sample_sd};

/// Nominal level of the null-hypothesis test.
pub const TEST_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub n_records: usize,
    pub n_valid: usize,
    pub bias: f64,
    pub empirical_sd: f64,
    pub avg_theoretical_sd: f64,
    pub mse: f64,
    /// Rejection rate at level 0.05; NaN outside null cells.
    pub type1_rate: f64,
    pub failure_rate: f64,
    pub mean_discarded: f64,
    pub nonconverged_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    pub truth: f64,
    pub null_effect: bool,
    pub methods: Vec<MethodMetrics>,
}

fn fraction(count: usize, total: usize) -> f64 {
    if total == 0 {
        f64::NAN
    } else {
        count as f64 / total as f64
    }
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        mean(&v)
    }
}

/// Metrics for one method. Failed records are excluded from every
/// denominator except `failure_rate`. With fewer than two valid replicates
/// the error carries the count.
pub fn aggregate_method(
    method: Method,
    records: &[&EstimateRecord],
    truth: f64,
    null_effect: bool,
) -> Result<MethodMetrics> {
    let valid: Vec<&EstimateRecord> = records.iter().copied().filter(|r| r.is_valid()).collect();
    let n_records = records.len();
    let n_failed = n_records - valid.len();
    let base = MethodMetrics {
        method,
        n_records,
        n_valid: valid.len(),
        bias: f64::NAN,
        empirical_sd: f64::NAN,
        avg_theoretical_sd: f64::NAN,
        mse: f64::NAN,
        type1_rate: f64::NAN,
        failure_rate: fraction(n_failed, n_records),
        mean_discarded: finite_mean(valid.iter().map(|r| r.n_discarded as f64)),
        nonconverged_rate: fraction(valid.iter().filter(|r| r.flags.nonconverged).count(), valid.len()),
    };
    if valid.len() < 2 {
        return Err(Error::InsufficientReplicates {
            method: method.to_string(),
            valid: valid.len(),
        });
    }
    let att: Vec<f64> = valid.iter().map(|r| r.att).collect();
    let type1_rate = if null_effect {
        let p: Vec<f64> = valid.iter().map(|r| r.p_value).filter(|p| p.is_finite()).collect();
        fraction(p.iter().filter(|&&p| p < TEST_LEVEL).count(), p.len())
    } else {
        f64::NAN
    };
    Ok(MethodMetrics {
        bias: mean(&att) - truth,
        empirical_sd: sample_sd(&att),
        avg_theoretical_sd: finite_mean(valid.iter().map(|r| r.theoretical_se)),
        mse: att.iter().map(|a| (a - truth).powi(2)).sum::<f64>() / att.len() as f64,
        type1_rate,
        ..base
    })
}

/// Like [`aggregate_method`] but reports insufficient methods with NaN
/// metrics instead of failing.
pub(crate) fn aggregate_method_lenient(
    method: Method,
    records: &[&EstimateRecord],
    truth: f64,
    null_effect: bool,
) -> MethodMetrics {
    aggregate_method(method, records, truth, null_effect).unwrap_or_else(|_| {
        let n_records = records.len();
        let valid: Vec<_> = records.iter().filter(|r| r.is_valid()).collect();
        MethodMetrics {
            method,
            n_records,
            n_valid: valid.len(),
            bias: f64::NAN,
            empirical_sd: f64::NAN,
            avg_theoretical_sd: f64::NAN,
            mse: f64::NAN,
            type1_rate: f64::NAN,
            failure_rate: fraction(n_records - valid.len(), n_records),
            mean_discarded: finite_mean(valid.iter().map(|r| r.n_discarded as f64)),
            nonconverged_rate: fraction(valid.iter().filter(|r| r.flags.nonconverged).count(), valid.len()),
        }
    })
}

pub(crate) fn methods_in_order(records: &[EstimateRecord]) -> Vec<Method> {
    let mut methods: Vec<Method> = records.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    methods
}

/// Per-method metrics for one cell, methods in canonical order.
pub fn aggregate_cell(records: &[EstimateRecord], truth: f64, null_effect: bool) -> Result<CellMetrics> {
    let methods = methods_in_order(records)
        .into_iter()
        .map(|m| {
            let rs: Vec<&EstimateRecord> = records.iter().filter(|r| r.method == m).collect();
            aggregate_method(m, &rs, truth, null_effect)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CellMetrics { truth, null_effect, methods })
}

pub(crate) fn aggregate_cell_lenient(records: &[EstimateRecord], truth: f64, null_effect: bool) -> CellMetrics {
    let methods = methods_in_order(records)
        .into_iter()
        .map(|m| {
            let rs: Vec<&EstimateRecord> = records.iter().filter(|r| r.method == m).collect();
            aggregate_method_lenient(m, &rs, truth, null_effect)
        })
        .collect();
    CellMetrics { truth, null_effect, methods }
}

#[cfg(test)]
mod tests {
    use super::super::RecordFlags;
    use super::*;

    fn rec(att: f64, p: f64) -> EstimateRecord {
        EstimateRecord {
            method: Method::Ipw,
            replicate: 0,
            att,
            theoretical_se: 0.5,
            p_value: p,
            n_discarded: 1,
            n_treated: 50,
            flags: RecordFlags::default(),
            detail: String::new(),
        }
    }

    #[test]
    fn exact_estimates_give_zero_error() {
        let rs: Vec<_> = (0..10).map(|_| rec(1.0, 0.5)).collect();
        let m = &aggregate_cell(&rs, 1.0, false).unwrap().methods[0];
        assert_eq!((m.bias, m.mse, m.empirical_sd), (0.0, 0.0, 0.0));
        assert!(m.type1_rate.is_nan());
    }

    #[test]
    fn alternating_errors() {
        let rs: Vec<_> = (0..200).map(|i| rec(if i % 2 == 0 { 3.0 } else { 1.0 }, 0.99)).collect();
        let m = &aggregate_cell(&rs, 2.0, true).unwrap().methods[0];
        assert!(m.bias.abs() < 1e-15);
        assert!((m.mse - 1.0).abs() < 1e-15);
        // sqrt(200 / 199)
        assert!((m.empirical_sd - 1.002_509_414_234_171).abs() < 1e-12);
        assert_eq!(m.type1_rate, 0.0);
    }

    #[test]
    fn failures_leave_denominators() {
        let mut rs: Vec<_> = (0..4).map(|i| rec(f64::from(i), 0.01)).collect();
        rs[3] = EstimateRecord::failure(Method::Ipw, 3, 50, &Error::NoMatches);
        let m = &aggregate_cell(&rs, 0.0, true).unwrap().methods[0];
        assert_eq!(m.n_valid, 3);
        assert_eq!(m.failure_rate, 0.25);
        assert_eq!(m.bias, 1.0);
        assert_eq!(m.type1_rate, 1.0);
    }

    #[test]
    fn insufficient_replicates() {
        let rs = vec![rec(1.0, 0.5), EstimateRecord::failure(Method::Ipw, 1, 50, &Error::NoMatches)];
        assert!(matches!(
            aggregate_cell(&rs, 0.0, false),
            Err(Error::InsufficientReplicates { valid: 1, .. })
        ));
        assert!(aggregate_cell_lenient(&rs, 0.0, false).methods[0].bias.is_nan());
    }
}
