//! Small dense solves used by the closed-form initializers.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Relative ridge added to Gram matrices before inversion.
pub const RIDGE: f64 = 1e-8;

fn to_na(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Solves `(G + ridge * tr(G)/n * I) x = rhs` for symmetric positive semi-definite `G`.
pub fn solve_gram(gram: ArrayView2<f64>, rhs: ArrayView1<f64>, ridge: f64) -> Result<Array1<f64>> {
    let n = gram.nrows();
    if gram.ncols() != n || rhs.len() != n {
        return Err(Error::Shape(format!(
            "Gram system {}x{} with right-hand side of length {}",
            gram.nrows(),
            gram.ncols(),
            rhs.len()
        )));
    }
    let mut g = to_na(gram);
    let scale = (g.trace() / n as f64).max(f64::MIN_POSITIVE);
    for i in 0..n {
        g[(i, i)] += ridge * scale;
    }
    let b = DVector::from_iterator(n, rhs.iter().copied());
    let x = match g.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => g
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Degenerate("singular Gram matrix".into()))?,
    };
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("Gram solve produced non-finite values".into()));
    }
    Ok(Array1::from_iter(x.iter().copied()))
}

/// Regularized right pseudoinverse `M^T (M M^T + ridge)^-1` of a wide `n × N` matrix,
/// returned as `N × n`, so that `y^T M^+` becomes `y.dot(&pinv)`.
pub fn right_pinv(m: ArrayView2<f64>, ridge: f64) -> Result<Array2<f64>> {
    let n = m.nrows();
    let gram = m.dot(&m.t());
    let mut g = to_na(gram.view());
    let scale = (g.trace() / n as f64).max(f64::MIN_POSITIVE);
    for i in 0..n {
        g[(i, i)] += ridge * scale;
    }
    let inv = g
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("pseudoinverse Gram matrix is singular".into()))?;
    let inv = Array2::from_shape_fn((n, n), |(i, j)| inv[(i, j)]);
    Ok(m.t().dot(&inv))
}
