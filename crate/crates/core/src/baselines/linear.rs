use crate::error::{Error, Result};
use crate::numcore::{solve, Matrix};

/// Ridge regression with an unpenalized intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    /// `D × t`, one column per target.
    pub weights: Matrix,
    pub intercept: Vec<f64>,
    pub ridge_lambda: f64,
}

impl LinearModel {
    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        let mut out = features.matmul(&self.weights)?;
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(&self.intercept) {
                *v += b;
            }
        }
        Ok(out)
    }
}

/// Solves `(XᵀX + λI)w = Xᵀy` with `X` augmented by a leading column of ones
/// whose coefficient is not penalized.
pub fn fit_linear(features: &Matrix, targets: &Matrix, ridge_lambda: f64) -> Result<LinearModel> {
    if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
        return Err(Error::Argument(format!(
            "ridge_lambda must be a nonnegative number, got {ridge_lambda}"
        )));
    }
    if features.rows() != targets.rows() {
        return Err(Error::shape("fit_linear", features.shape(), targets.shape()));
    }
    if features.rows() == 0 {
        return Err(Error::Argument("fit_linear needs at least one row".into()));
    }
    let (n, d) = (features.rows(), features.cols());
    let mut x = Matrix::zeros(n, d + 1);
    for i in 0..n {
        let row = x.row_mut(i);
        row[0] = 1.0;
        row[1..].copy_from_slice(features.row(i));
    }
    let mut gram = x.t_matmul(&x)?;
    for j in 1..=d {
        gram[(j, j)] += ridge_lambda;
    }
    let rhs = x.t_matmul(targets)?;
    let coef = solve(&gram, &rhs).map_err(|e| match e {
        Error::Singular(msg) => Error::Singular(format!("{msg}; the features are collinear, use ridge_lambda > 0")),
        other => other,
    })?;
    let t = targets.cols();
    let intercept = coef.row(0).to_vec();
    let weights = Matrix::new(d, t, coef.as_slice()[t..].to_vec())?;
    Ok(LinearModel {
        weights,
        intercept,
        ridge_lambda,
    })
}
