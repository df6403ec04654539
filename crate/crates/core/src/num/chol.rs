//! Dense Cholesky factorization and triangular solves for symmetric
//! positive-definite systems. Used for kernel-matrix solves and Newton steps;
//! explicit inverses are never formed.

use ndarray::{Array1, Array2};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Array2<f64>,
}

impl Cholesky {
    /// Factor `a = L L^T`. Returns `None` when a pivot drops below
    /// `1e-14 * max diagonal` (matrix not numerically positive definite).
    pub fn new(a: &Array2<f64>) -> Option<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
        let max_diag = (0..n).map(|i| a[[i, i]].abs()).fold(0.0f64, f64::max);
        let floor = 1e-14 * max_diag.max(1e-300);
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut d = a[[j, j]];
            for k in 0..j {
                d -= l[[j, k]] * l[[j, k]];
            }
            if d <= floor {
                return None;
            }
            let dj = d.sqrt();
            l[[j, j]] = dj;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / dj;
            }
        }
        Some(Cholesky { l })
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &Array1<f64>) -> Array1<f64> {
        let n = self.l.nrows();
        assert_eq!(b.len(), n);
        let mut x = b.clone();
        // Forward: L y = b.
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[[i, k]] * x[k];
            }
            x[i] = s / self.l[[i, i]];
        }
        // Backward: L^T x = y.
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[[k, i]] * x[k];
            }
            x[i] = s / self.l[[i, i]];
        }
        x
    }

    /// Solve for several right-hand sides stacked as columns.
    pub fn solve_mat(&self, b: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros(b.raw_dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            let x = self.solve(&col.to_owned());
            out.column_mut(j).assign(&x);
        }
        out
    }
}

/// Factor a symmetric positive-definite matrix, with escalating ridge
/// regularization if the bare matrix is right at the PD boundary. Keep the
/// factor around when several systems share the same matrix.
pub fn factor_spd(a: &Array2<f64>, context: &'static str) -> crate::Result<Cholesky> {
    if let Some(ch) = Cholesky::new(a) {
        return Ok(ch);
    }
    let n = a.nrows();
    let scale = (0..n).map(|i| a[[i, i]].abs()).fold(0.0f64, f64::max).max(1.0);
    for power in [-12, -10, -8] {
        let ridge = scale * 10f64.powi(power);
        let mut reg = a.clone();
        for i in 0..n {
            reg[[i, i]] += ridge;
        }
        if let Some(ch) = Cholesky::new(&reg) {
            return Ok(ch);
        }
    }
    Err(crate::Error::Singular { context })
}

/// Solve a symmetric positive-definite system once.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>, context: &'static str) -> crate::Result<Array1<f64>> {
    Ok(factor_spd(a, context)?.solve(b))
}
