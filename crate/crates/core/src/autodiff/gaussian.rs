//! Gaussian building blocks: Mahalanobis distance, density and the
//! log-determinant of a Gram matrix.
//!
//! Means and covariances enter as constants; only the evaluated points (and
//! the Gram matrix) receive gradient.

use ndarray::{Array1, Array2};

use super::{BackwardRule, SpdFactor, Tape, Value};
use crate::error::{Error, Result};
use crate::Matrix;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn check_dims(op: &'static str, tape: &Tape, z: Value, mean: &Array1<f64>, factor: &SpdFactor) -> Result<()> {
    let (r, c) = tape.shape(z);
    if c != mean.len() || c != factor.dim() {
        return Err(Error::Shape {
            op,
            left: (r, c),
            right: (mean.len(), factor.dim()),
        });
    }
    Ok(())
}

/// Per-row `Σ⁻¹(z − μ)` together with the Mahalanobis distances.
fn whitened(z: &Matrix, mean: &Array1<f64>, factor: &SpdFactor) -> (Array1<f64>, Matrix) {
    let mut dist = Array1::zeros(z.nrows());
    let mut solved = Array2::zeros(z.dim());
    for (i, row) in z.rows().into_iter().enumerate() {
        let diff = &row - mean;
        let y = factor.solve_lower(diff.view());
        dist[i] = y.dot(&y);
        solved.row_mut(i).assign(&factor.solve_upper(y.view()));
    }
    (dist, solved)
}

struct MahalanobisRule {
    solved: Matrix,
}

impl BackwardRule for MahalanobisRule {
    fn backward(&self, grad: &Matrix, _inputs: &[&Matrix], _output: &Matrix) -> Vec<Option<Matrix>> {
        // d/dz (z−μ)ᵀΣ⁻¹(z−μ) = 2Σ⁻¹(z−μ)
        let mut gz = self.solved.clone() * 2.0;
        for (mut row, g) in gz.rows_mut().into_iter().zip(grad.column(0)) {
            row *= *g;
        }
        vec![Some(gz)]
    }
}

/// Mahalanobis distance of every row of `z` (N×d) to `mean`; returns N×1.
pub fn mahalanobis_rows(tape: &mut Tape, z: Value, mean: &Array1<f64>, factor: &SpdFactor) -> Result<Value> {
    check_dims("mahalanobis", tape, z, mean, factor)?;
    let (dist, solved) = whitened(tape.data(z), mean, factor);
    let out = dist.insert_axis(ndarray::Axis(1));
    Ok(tape.custom(&[z], out, MahalanobisRule { solved }))
}

/// `(z−μ)ᵀΣ⁻¹(z−μ)` for a single 1×d row.
pub fn mahalanobis(tape: &mut Tape, z: Value, mean: &Array1<f64>, factor: &SpdFactor) -> Result<Value> {
    if tape.shape(z).0 != 1 {
        return Err(Error::Shape {
            op: "mahalanobis",
            left: tape.shape(z),
            right: (1, mean.len()),
        });
    }
    mahalanobis_rows(tape, z, mean, factor)
}

struct PdfRule {
    solved: Matrix,
}

impl BackwardRule for PdfRule {
    fn backward(&self, grad: &Matrix, _inputs: &[&Matrix], output: &Matrix) -> Vec<Option<Matrix>> {
        // dp/dz = −p·Σ⁻¹(z−μ)
        let mut gz = self.solved.clone();
        for ((mut row, g), p) in gz.rows_mut().into_iter().zip(grad.column(0)).zip(output.column(0)) {
            row *= -g * p;
        }
        vec![Some(gz)]
    }
}

/// Normal density `N(z; μ, Σ)` of every row of `z`; returns N×1.
pub fn gaussian_pdf_rows(tape: &mut Tape, z: Value, mean: &Array1<f64>, factor: &SpdFactor) -> Result<Value> {
    check_dims("gaussian_pdf", tape, z, mean, factor)?;
    let d = mean.len() as f64;
    let (dist, solved) = whitened(tape.data(z), mean, factor);
    let log_norm = -0.5 * d * LN_2PI - 0.5 * factor.log_det();
    let out = dist.mapv(|m| (log_norm - 0.5 * m).exp()).insert_axis(ndarray::Axis(1));
    Ok(tape.custom(&[z], out, PdfRule { solved }))
}

/// Normal density for a single 1×d row.
pub fn gaussian_pdf(tape: &mut Tape, z: Value, mean: &Array1<f64>, factor: &SpdFactor) -> Result<Value> {
    if tape.shape(z).0 != 1 {
        return Err(Error::Shape {
            op: "gaussian_pdf",
            left: tape.shape(z),
            right: (1, mean.len()),
        });
    }
    gaussian_pdf_rows(tape, z, mean, factor)
}

struct LogDetRule {
    inverse: Matrix,
}

impl BackwardRule for LogDetRule {
    fn backward(&self, grad: &Matrix, _inputs: &[&Matrix], _output: &Matrix) -> Vec<Option<Matrix>> {
        vec![Some(&self.inverse * grad[[0, 0]])]
    }
}

/// `log det(G + eps·I)` of a symmetric positive semi-definite M×M matrix.
///
/// The input is symmetrized before factoring so the gradient `(G + eps·I)⁻¹`
/// is consistent for perturbations of either triangle.
pub fn logdet_gram(tape: &mut Tape, gram: Value, eps: f64) -> Result<Value> {
    let g = tape.data(gram);
    let (r, c) = g.dim();
    if r != c {
        return Err(Error::Shape {
            op: "logdet_gram",
            left: (r, c),
            right: (r, r),
        });
    }
    let asym = (g - &g.t()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if asym > 1e-8 {
        return Err(Error::Numerical(format!("gram matrix not symmetric (max deviation {asym:e})")));
    }
    let sym = (g + &g.t()) * 0.5;
    let factor = SpdFactor::with_ridge(&sym, eps)?;
    let out = Array2::from_elem((1, 1), factor.log_det());
    Ok(tape.custom(
        &[gram],
        out,
        LogDetRule {
            inverse: factor.inverse().clone(),
        },
    ))
}
