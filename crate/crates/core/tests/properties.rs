use attbench_core::dgp::{generate_dataset, Prevalence, ScenarioSpec, SettingSpec};
use attbench_core::glm::{fit_logistic, fit_ols};
use attbench_core::harness::{aggregate_cell, EstimateRecord, Method, RecordFlags};
use attbench_core::linalg::{sample_covariance, SpdMatrix};
use attbench_core::matching::{cem_att, cem_match, matched_att, mdm_match, psm_match, MatchRatio, MatchSet};
use attbench_core::propensity::{trim_ps, truncate_ps, truncation_bound, PsSource, PsVector};
use attbench_core::rng::{sample_std_normal, RngStream};
use attbench_core::tmle::tmle_att;
use attbench_core::weighting::{aipw_att, ipw_att};
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;

fn matrix(seed: u64, n: usize, d: usize) -> Array2<f64> {
    let mut rng = RngStream::new(seed, 0);
    Array2::from_shape_simple_fn((n, d), || rng.std_normal())
}

fn treatment(seed: u64, n: usize) -> Vec<u8> {
    let mut rng = RngStream::new(seed, 1);
    let mut z: Vec<u8> = (0..n).map(|_| u8::from(rng.uniform() < 0.35)).collect();
    z[0] = 1;
    z[1] = 0;
    z[2] = 1;
    z[3] = 0;
    z
}

fn ps_values(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = RngStream::new(seed, 2);
    (0..n).map(|_| 0.02 + 0.96 * rng.uniform()).collect()
}

fn ps(v: Vec<f64>) -> PsVector {
    PsVector::from_values(v, PsSource::Logistic).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn other_streams_are_untouched(seed in any::<u64>(), a in 0u64..1000, b in 1000u64..2000) {
        let before = sample_std_normal(&mut RngStream::new(seed, b), 8);
        let _ = sample_std_normal(&mut RngStream::new(seed, a), 100);
        prop_assert_eq!(before, sample_std_normal(&mut RngStream::new(seed, b), 8));
    }

    #[test]
    fn cholesky_solve_inverts_multiplication(seed in any::<u64>(), d in 1usize..7) {
        let a = matrix(seed, d + 4, d);
        let g = a.t().dot(&a) + Array2::<f64>::eye(d);
        let g = (&g + &g.t()) * 0.5;
        let x: Array1<f64> = matrix(seed ^ 1, d, 1).column(0).to_owned();
        let back = SpdMatrix::new(g.clone()).unwrap().solve(g.dot(&x).view()).unwrap();
        for i in 0..d {
            prop_assert!((back[i] - x[i]).abs() <= 1e-8 * (1.0 + x[i].abs()));
        }
    }

    #[test]
    fn covariance_ignores_row_order(seed in any::<u64>(), n in 5usize..40) {
        let x = matrix(seed, n, 3);
        let perm = RngStream::new(seed, 9).permutation(n);
        let shuffled = x.select(Axis(0), &perm);
        let a = sample_covariance(x.view()).unwrap();
        let b = sample_covariance(shuffled.view()).unwrap();
        for (u, v) in a.entries().iter().zip(b.entries().iter()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn ols_residuals_are_orthogonal(seed in any::<u64>(), n in 8usize..200) {
        let mut x = matrix(seed, n, 4);
        x.column_mut(0).fill(1.0);
        let y = matrix(seed ^ 7, n, 1).column(0).to_owned();
        let fit = fit_ols(x.view(), y.view()).unwrap();
        let resid = &y - &fit.predict(x.view()).unwrap();
        for col in x.columns() {
            prop_assert!(col.dot(&resid).abs() < 1e-8 * n as f64);
        }
    }

    #[test]
    fn rescaling_a_column_rescales_its_coefficient(seed in any::<u64>(), c in 0.1f64..10.0) {
        let n = 120;
        let mut x = matrix(seed, n, 3);
        x.column_mut(0).fill(1.0);
        let y: Array1<f64> = (0..n).map(|i| 0.2 + 0.7 * x[[i, 1]] - 0.4 * x[[i, 2]]).collect::<Array1<f64>>()
            + matrix(seed ^ 3, n, 1).column(0);
        let mut xs = x.clone();
        xs.column_mut(2).mapv_inplace(|v| v * c);
        let a = fit_ols(x.view(), y.view()).unwrap();
        let b = fit_ols(xs.view(), y.view()).unwrap();
        prop_assert!((b.coefficients[2] * c - a.coefficients[2]).abs() < 1e-8);
        let (pa, pb) = (a.predict(x.view()).unwrap(), b.predict(xs.view()).unwrap());
        prop_assert!(pa.iter().zip(pb.iter()).all(|(u, v)| (u - v).abs() < 1e-8));

        let zl: Array1<f64> = (0..n).map(|i| f64::from(y[i] > 0.2)).collect();
        let la = fit_logistic(x.view(), zl.view(), 50).unwrap();
        let lb = fit_logistic(xs.view(), zl.view(), 50).unwrap();
        if la.converged && lb.converged {
            prop_assert!((lb.coefficients[2] * c - la.coefficients[2]).abs() < 1e-8);
            prop_assert!(la.fitted_probabilities.iter().zip(lb.fitted_probabilities.iter()).all(|(u, v)| (u - v).abs() < 1e-8));
        }
    }

    #[test]
    fn trimming_and_truncation_are_idempotent(seed in any::<u64>(), n in 20usize..300) {
        let z = treatment(seed, n);
        let p = ps(ps_values(seed, n));
        if let Ok(t) = trim_ps(&p, &z, 0.05) {
            prop_assert_eq!(trim_ps(&t, &z, 0.05).unwrap(), t.clone());
            let b = truncation_bound(n);
            if b <= 0.05 {
                let tt = truncate_ps(&t, n).unwrap();
                for i in (0..n).filter(|&i| t.kept[i]) {
                    prop_assert_eq!(tt.values[i], t.values[i]);
                }
            }
        }
        if n >= 15 {
            let once = truncate_ps(&p, n).unwrap();
            prop_assert_eq!(truncate_ps(&once, n).unwrap(), once.clone());
            for i in 0..n {
                for j in 0..n {
                    if p.values[i] <= p.values[j] {
                        prop_assert!(once.values[i] <= once.values[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn match_sets_are_valid(seed in any::<u64>(), n in 10usize..80, two in any::<bool>()) {
        let z = treatment(seed, n);
        let p = ps(ps_values(seed, n));
        let ratio = if two { MatchRatio::Two } else { MatchRatio::One };
        if let Ok(set) = psm_match(&p, &z, ratio) {
            prop_assert!(set.validate(&z).is_ok());
            let treated = z.iter().filter(|&&v| v == 1).count();
            prop_assert_eq!(set.pairs.len() + set.discarded_treated.len(), treated);
        }
        let x = matrix(seed, n, 3);
        if let Ok(set) = mdm_match(x.view(), &z, &p) {
            prop_assert!(set.validate(&z).is_ok());
        }
    }

    #[test]
    fn mahalanobis_matching_is_affine_invariant(seed in any::<u64>(), n in 10usize..60) {
        let z = treatment(seed, n);
        let p = ps(ps_values(seed, n));
        let x = matrix(seed, n, 3);
        let a = matrix(seed ^ 5, 3, 3) + Array2::<f64>::eye(3) * 3.0;
        let shift = Array1::from(vec![5.0, -2.0, 0.5]);
        let moved = x.dot(&a) + &shift;
        let r1 = mdm_match(x.view(), &z, &p).map(|s| (s.pairs, s.discarded_treated));
        let r2 = mdm_match(moved.view(), &z, &p).map(|s| (s.pairs, s.discarded_treated));
        prop_assert_eq!(r1, r2);
    }

    #[test]
    fn matched_att_shift_and_pair_order(seed in any::<u64>(), n in 12usize..60, c in -5.0f64..5.0) {
        let z = treatment(seed, n);
        let p = ps(ps_values(seed, n));
        let y = matrix(seed ^ 11, n, 1).column(0).to_vec();
        if let Ok(set) = psm_match(&p, &z, MatchRatio::Two) {
            if let Ok(base) = matched_att(&y, &set) {
                let shifted: Vec<f64> = (0..n).map(|i| y[i] + if z[i] == 1 { c } else { 0.0 }).collect();
                let moved = matched_att(&shifted, &set).unwrap();
                prop_assert!((moved.att - base.att - c).abs() < 1e-12);
                let reversed = MatchSet { pairs: set.pairs.iter().rev().cloned().collect(), ..set.clone() };
                prop_assert!((matched_att(&y, &reversed).unwrap().att - base.att).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cem_signatures_refine_for_nested_bins(seed in any::<u64>(), n in 10usize..80) {
        let z = treatment(seed, n);
        let x = matrix(seed, n, 3);
        let s2 = cem_match(x.view(), &z, 2).unwrap();
        let s4 = cem_match(x.view(), &z, 4).unwrap();
        for i in 0..n {
            for j in 0..n {
                if s4.signature[i] == s4.signature[j] {
                    prop_assert_eq!(&s2.signature[i], &s2.signature[j]);
                }
            }
        }
        let one = cem_match(x.view(), &z, 1).unwrap();
        prop_assert!(one.retained.iter().all(|&r| r));
        let y = matrix(seed ^ 13, n, 1).column(0).to_vec();
        if let Ok(est) = cem_att(&y, &z, &one) {
            let mean = |arm: u8| {
                let v: Vec<f64> = (0..n).filter(|&i| z[i] == arm).map(|i| y[i]).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            prop_assert!((est.att - (mean(1) - mean(0))).abs() < 1e-12);
        }
    }

    #[test]
    fn weighting_invariances(seed in any::<u64>(), n in 10usize..100, c in -10.0f64..10.0) {
        let z = treatment(seed, n);
        let p = ps(ps_values(seed, n));
        let y = matrix(seed ^ 17, n, 1).column(0).to_vec();
        let q1: Vec<f64> = y.iter().map(|v| 0.9 * v + 1.0).collect();
        let q0: Vec<f64> = y.iter().map(|v| 0.5 * v).collect();
        let shift = |v: &[f64]| -> Vec<f64> { v.iter().map(|a| a + c).collect() };
        let a = ipw_att(&y, &z, &p).unwrap().att;
        prop_assert!((ipw_att(&shift(&y), &z, &p).unwrap().att - a).abs() < 1e-9);
        let b = aipw_att(&y, &z, &p, &q1, &q0).unwrap().att;
        let b2 = aipw_att(&shift(&y), &z, &p, &shift(&q1), &shift(&q0)).unwrap().att;
        prop_assert!((b2 - b).abs() < 1e-9);

        // Y = q_Z: only Σps(q1 − q0)/Σps matters
        let yq: Vec<f64> = (0..n).map(|i| if z[i] == 1 { q1[i] } else { q0[i] }).collect();
        let est = aipw_att(&yq, &z, &p, &q1, &q0).unwrap().att;
        let first: f64 = (0..n).map(|i| p.values[i] * (q1[i] - q0[i])).sum::<f64>() / p.values.iter().sum::<f64>();
        prop_assert!((est - first).abs() < 1e-12);
    }

    #[test]
    fn tmle_is_location_scale_equivariant(seed in any::<u64>(), a in 0.1f64..20.0, b in -50.0f64..50.0) {
        let n = 60;
        let z = treatment(seed, n);
        let p = ps(ps_values(seed, n).iter().map(|v| v.clamp(0.1, 0.9)).collect());
        let x = matrix(seed ^ 19, n, 1).column(0).to_vec();
        let y: Vec<f64> = (0..n).map(|i| f64::from(z[i]) + x[i] + 0.3 * (i as f64).sin()).collect();
        let q1: Vec<f64> = x.iter().map(|v| 1.0 + 0.9 * v).collect();
        let q0: Vec<f64> = x.iter().map(|v| 0.9 * v).collect();
        let tr = |v: &[f64]| -> Vec<f64> { v.iter().map(|u| a * u + b).collect() };
        let base = tmle_att(&y, &z, &q1, &q0, &p).unwrap();
        let moved = tmle_att(&tr(&y), &z, &tr(&q1), &tr(&q0), &p).unwrap();
        prop_assert!((moved.att - a * base.att).abs() < 1e-8 * (1.0 + a));
        prop_assert!((moved.theoretical_se - a * base.theoretical_se).abs() < 1e-8 * (1.0 + a));
        if base.converged {
            let m = base.eif_values.iter().sum::<f64>() / base.eif_values.len() as f64;
            prop_assert!(m.abs() < 1e-6);
        }
    }

    #[test]
    fn mse_decomposes_into_bias_and_variance(seed in any::<u64>(), reps in 2usize..250, truth in -3.0f64..3.0) {
        let att = matrix(seed, reps, 1).column(0).to_vec();
        let records: Vec<EstimateRecord> = att.iter().enumerate().map(|(r, &a)| EstimateRecord {
            method: Method::Aipw,
            replicate: r,
            att: a,
            theoretical_se: 1.0,
            p_value: 0.5,
            n_discarded: 0,
            n_treated: 10,
            flags: RecordFlags::default(),
            detail: String::new(),
        }).collect();
        let m = &aggregate_cell(&records, truth, false).unwrap().methods[0];
        let rf = reps as f64;
        let identity = m.bias * m.bias + m.empirical_sd.powi(2) * (rf - 1.0) / rf;
        prop_assert!((m.mse - identity).abs() < 1e-10);
        prop_assert!(m.mse >= m.bias * m.bias - 1e-10);
    }

    #[test]
    fn null_outcomes_ignore_treatment(seed in any::<u64>(), scenario in 1u8..=3, setting in 1u8..=3) {
        let spec = ScenarioSpec::new(scenario).unwrap();
        let set = SettingSpec::new(setting, true).unwrap();
        let p = Prevalence::new(0.2).unwrap();
        let mut r1 = RngStream::new(seed, 0);
        let mut r2 = RngStream::new(seed, 0);
        let a = generate_dataset(p.sample_size(), &spec, &set, -1.4, &mut r1);
        let b = generate_dataset(p.sample_size(), &spec, &set, -1.4, &mut r2);
        prop_assert_eq!(a.clone().ok(), b.ok());
        if let Ok(d) = a {
            let x = d.all_columns();
            for (i, row) in x.rows().into_iter().enumerate() {
                let r = row.to_vec();
                prop_assert_eq!(set.outcome_mean(&r, 1.0, spec.includes_x4()), set.outcome_mean(&r, 0.0, spec.includes_x4()));
                let _ = i;
            }
        }
    }
}
