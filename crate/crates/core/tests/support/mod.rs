//! Reference implementations used only by tests. None of them call into
//! the code paths they check.

#![allow(dead_code)]

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2};

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = a.row(i).to_vec();
            row.push(b[i]);
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r, &s| m[r][col].abs().total_cmp(&m[s][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..=n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    x
}

pub fn explicit_inverse(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut inv = Array2::zeros((n, n));
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = gauss_solve(a, &e);
        for i in 0..n {
            inv[[i, j]] = col[i];
        }
    }
    inv
}

/// Two-pass sample covariance (n − 1 denominator).
pub fn two_pass_covariance(x: ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let means: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let mut c = Array2::zeros((d, d));
    for a in 0..d {
        for b in 0..d {
            c[[a, b]] = (0..n).map(|i| (x[[i, a]] - means[a]) * (x[[i, b]] - means[b])).sum::<f64>() / (n - 1) as f64;
        }
    }
    c
}

/// OLS through the normal equations `XᵀX β = Xᵀy`.
pub fn normal_equations(x: ArrayView2<f64>, y: &[f64]) -> Vec<f64> {
    let xtx = x.t().dot(&x);
    let xty = x.t().dot(&Array1::from(y.to_vec()));
    gauss_solve(&xtx, xty.as_slice().unwrap())
}

fn odds_logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sd(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Pairs `(treated, controls)` and discarded treated units.
pub type OracleMatch = (Vec<(usize, Vec<usize>)>, Vec<usize>);

/// Greedy matching written from scratch: for each treated unit in
/// descending ps order, rank every unused eligible control by
/// `(distance, index)` and take the first `ratio`.
pub fn brute_greedy(
    ps: &[f64],
    z: &[u8],
    ratio: usize,
    distance: &dyn Fn(usize, usize) -> f64,
) -> OracleMatch {
    let lp: Vec<f64> = ps.iter().map(|&p| odds_logit(p)).collect();
    let caliper = 0.2 * sd(&lp);
    let mut treated: Vec<usize> = (0..z.len()).filter(|&i| z[i] == 1).collect();
    treated.sort_by(|&a, &b| ps[b].partial_cmp(&ps[a]).unwrap().then(a.cmp(&b)));
    let mut available: Vec<usize> = (0..z.len()).filter(|&i| z[i] == 0).collect();
    let mut pairs = Vec::new();
    let mut dropped = Vec::new();
    for t in treated {
        let mut ranked: Vec<(f64, usize)> = available
            .iter()
            .filter(|&&c| (lp[t] - lp[c]).abs() <= caliper)
            .map(|&c| (distance(t, c), c))
            .collect();
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let chosen: Vec<usize> = ranked.iter().take(ratio).map(|&(_, c)| c).collect();
        if chosen.is_empty() {
            dropped.push(t);
        } else {
            available.retain(|c| !chosen.contains(c));
            pairs.push((t, chosen));
        }
    }
    (pairs, dropped)
}

pub fn logit_distance(ps: &[f64]) -> impl Fn(usize, usize) -> f64 + '_ {
    move |a, b| (odds_logit(ps[a]) - odds_logit(ps[b])).abs()
}

/// Mahalanobis distance through an explicitly inverted covariance.
pub fn mahalanobis_via_inverse(x: ArrayView2<'_, f64>) -> impl Fn(usize, usize) -> f64 + '_ {
    let inv = explicit_inverse(&two_pass_covariance(x));
    move |a, b| {
        let d = &x.row(a) - &x.row(b);
        d.dot(&inv.dot(&d)).max(0.0).sqrt()
    }
}

/// CEM by direct enumeration of bin signatures: each retained treated unit
/// minus the mean control outcome of its stratum. Returns the differences
/// and the number of discarded treated units.
pub fn cem_differences(x: ArrayView2<f64>, z: &[u8], y: &[f64], bins: usize) -> (Vec<f64>, usize) {
    let (n, d) = x.dim();
    let sig: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let col = x.column(j);
                    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let b = ((x[[i, j]] - lo) / (hi - lo) * bins as f64).floor() as usize;
                    b.min(bins - 1)
                })
                .collect()
        })
        .collect();
    let mut controls: HashMap<&Vec<usize>, Vec<f64>> = HashMap::new();
    for i in 0..n {
        if z[i] == 0 {
            controls.entry(&sig[i]).or_default().push(y[i]);
        }
    }
    let mut diffs = Vec::new();
    let mut dropped = 0;
    for i in 0..n {
        if z[i] != 1 {
            continue;
        }
        match controls.get(&sig[i]) {
            Some(c) => diffs.push(y[i] - c.iter().sum::<f64>() / c.len() as f64),
            None => dropped += 1,
        }
    }
    (diffs, dropped)
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn snapshot(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(base: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}
