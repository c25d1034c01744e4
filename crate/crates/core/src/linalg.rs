//! Dense symmetric positive-definite algebra: Cholesky solves, Gram
//! matrices and sample covariance.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Pivots at or below this value mark the matrix as not SPD.
pub const PIVOT_TOL: f64 = 1e-12;

/// A symmetric positive-definite matrix together with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    entries: Array2<f64>,
    // lower triangular, entries = l lᵀ
    l: Array2<f64>,
}

impl SpdMatrix {
    /// Validates symmetry (exact) and factors the matrix.
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let (r, c) = entries.dim();
        if r != c {
            return Err(Error::DimensionMismatch { expected: r, got: c });
        }
        if r == 0 {
            return Err(Error::InvalidInput("empty matrix".into()));
        }
        for i in 0..r {
            for j in 0..i {
                if entries[[i, j]] != entries[[j, i]] {
                    return Err(Error::InvalidInput(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let l = cholesky(entries.view())?;
        Ok(Self { entries, l })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    pub fn factor(&self) -> ArrayView2<'_, f64> {
        self.l.view()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: ArrayView1<f64>) -> Result<Array1<f64>> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: b.len() });
        }
        let y = self.forward(b);
        let mut x = Array1::zeros(n);
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[[k, i]] * x[k];
            }
            x[i] = s / self.l[[i, i]];
        }
        Ok(x)
    }

    /// `vᵀ A⁻¹ v`, computed as ‖L⁻¹ v‖².
    pub fn inverse_quad_form(&self, v: ArrayView1<f64>) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: v.len() });
        }
        Ok(self.forward(v).iter().map(|z| z * z).sum())
    }

    pub fn inverse(&self) -> Array2<f64> {
        let n = self.dim();
        let mut inv = Array2::zeros((n, n));
        let mut e = Array1::zeros(n);
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            let col = self.solve(e.view()).expect("dimension checked");
            inv.column_mut(j).assign(&col);
        }
        // mirror to keep the result exactly symmetric
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
                inv[[i, j]] = v;
                inv[[j, i]] = v;
            }
        }
        inv
    }

    fn forward(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.dim();
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[[i, k]] * y[k];
            }
            y[i] = s / self.l[[i, i]];
        }
        y
    }
}

fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > PIVOT_TOL) {
            return Err(Error::NonSpd { row: j, pivot: d });
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Ok(l)
}

pub fn cholesky_solve(a: &SpdMatrix, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    a.solve(b)
}

/// `Xᵀ diag(w) X`, exactly symmetric. `w = None` means unit weights.
pub fn weighted_gram(x: ArrayView2<f64>, w: Option<ArrayView1<f64>>) -> Array2<f64> {
    let p = x.ncols();
    let mut g = match w {
        None => x.t().dot(&x),
        Some(w) => {
            let wx = &x * &w.insert_axis(Axis(1));
            x.t().dot(&wx)
        }
    };
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (g[[i, j]] + g[[j, i]]);
            g[[i, j]] = v;
            g[[j, i]] = v;
        }
    }
    g
}

/// Unbiased (n − 1) sample covariance of the columns of `x`.
pub fn sample_covariance(x: ArrayView2<f64>) -> Result<SpdMatrix> {
    let (n, p) = x.dim();
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 rows, got {n}")));
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &x - &mean.insert_axis(Axis(0));
    let mut cov = weighted_gram(centered.view(), None);
    cov /= (n - 1) as f64;
    for j in 0..p {
        if cov[[j, j]] == 0.0 {
            return Err(Error::Degenerate { column: j });
        }
    }
    SpdMatrix::new(cov)
}
