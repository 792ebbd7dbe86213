use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::Matrix;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails with the index of the first leading minor that is not positive.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape {
            op: "cholesky",
            left: a.dim(),
            right: (n, n),
        });
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag.is_finite() && diag > 0.0) {
            return Err(Error::Numerical(format!(
                "matrix is not positive definite: leading minor {} has pivot {diag:e}",
                j + 1
            )));
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / ljj;
        }
    }
    Ok(l)
}

/// Cached factorization of a covariance-like SPD matrix.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    matrix: Matrix,
    cholesky: Matrix,
    inverse: Matrix,
    log_det: f64,
}

impl SpdFactor {
    pub fn new(matrix: Matrix) -> Result<Self> {
        let cholesky = cholesky(&matrix)?;
        let log_det = 2.0 * cholesky.diag().iter().map(|d| d.ln()).sum::<f64>();
        let n = matrix.nrows();
        let mut inverse = Array2::zeros((n, n));
        let mut e = Array1::zeros(n);
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            let col = solve_full(&cholesky, e.view());
            inverse.column_mut(j).assign(&col);
        }
        // symmetrize away rounding
        let inverse = (&inverse + &inverse.t()) * 0.5;
        Ok(Self {
            matrix,
            cholesky,
            inverse,
            log_det,
        })
    }

    /// Factors `matrix + ridge·I`.
    pub fn with_ridge(matrix: &Matrix, ridge: f64) -> Result<Self> {
        let mut m = matrix.clone();
        m.diag_mut().mapv_inplace(|v| v + ridge);
        Self::new(m)
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(Array2::eye(dim)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn cholesky(&self) -> &Matrix {
        &self.cholesky
    }

    pub fn inverse(&self) -> &Matrix {
        &self.inverse
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: ArrayView1<f64>) -> Array1<f64> {
        forward_sub(&self.cholesky, b)
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: ArrayView1<f64>) -> Array1<f64> {
        back_sub(&self.cholesky, y)
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        solve_full(&self.cholesky, b)
    }

    /// `dᵀ A⁻¹ d` via one triangular solve.
    pub fn quad_inverse(&self, d: ArrayView1<f64>) -> f64 {
        let y = self.solve_lower(d);
        y.dot(&y)
    }
}

fn forward_sub(l: &Matrix, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[[i, k]] * y[k];
        }
        y[i] = v / l[[i, i]];
    }
    y
}

fn back_sub(l: &Matrix, y: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in i + 1..n {
            v -= l[[k, i]] * x[k];
        }
        x[i] = v / l[[i, i]];
    }
    x
}

fn solve_full(l: &Matrix, b: ArrayView1<f64>) -> Array1<f64> {
    let y = forward_sub(l, b);
    back_sub(l, y.view())
}
