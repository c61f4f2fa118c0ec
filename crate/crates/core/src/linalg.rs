//! Dense linear algebra on [`Tensor`] matrices via `nalgebra`.

use nalgebra::DMatrix;

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

fn to_dmatrix(t: &Tensor) -> Result<DMatrix<f64>> {
    if t.shape().len() != 2 {
        return Err(shape_err(
            "linalg",
            format!("expected a matrix, got {:?}", t.shape()),
        ));
    }
    Ok(DMatrix::from_row_slice(t.rows(), t.cols(), t.data()))
}

fn from_dmatrix(m: &DMatrix<f64>) -> Result<Tensor> {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        data.extend(m.row(r).iter());
    }
    Tensor::matrix(m.nrows(), m.ncols(), data)
}

/// Singular values in descending order.
pub fn singular_values(t: &Tensor) -> Result<Vec<f64>> {
    let m = to_dmatrix(t)?;
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// `σ_max / σ_min`; infinite for a rank-deficient matrix.
pub fn condition_number(t: &Tensor) -> Result<f64> {
    let s = singular_values(t)?;
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => Ok(hi / lo),
        (Some(_), Some(_)) => Ok(f64::INFINITY),
        _ => Err(Error::Empty("condition number of an empty matrix".into())),
    }
}

/// `X` minimizing `‖A X − B‖_F`, via SVD.
pub fn least_squares(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(shape_err(
            "least_squares",
            format!("{} rows vs {} rows", a.rows(), b.rows()),
        ));
    }
    let (am, bm) = (to_dmatrix(a)?, to_dmatrix(b)?);
    let x = am
        .svd(true, true)
        .solve(&bm, 1e-12)
        .map_err(|e| Error::Domain {
            op: "least_squares",
            detail: e.to_string(),
        })?;
    from_dmatrix(&x)
}

/// Weighted ridge regression: `argmin_β Σ w_i (x_i·β − y_i)² + μ‖β‖²` with
/// `μ = mu_rel · tr(XᵀWX) / p`.
pub fn weighted_ridge(x: &Tensor, y: &[f64], w: &[f64], mu_rel: f64) -> Result<Vec<f64>> {
    let (n, p) = (x.rows(), x.cols());
    if y.len() != n || w.len() != n {
        return Err(shape_err(
            "weighted_ridge",
            format!("{n} rows, {} targets, {} weights", y.len(), w.len()),
        ));
    }
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = nalgebra::DVector::<f64>::zeros(p);
    for i in 0..n {
        let r = nalgebra::DVector::from_column_slice(x.row(i));
        a.ger(w[i], &r, &r, 1.0);
        b.axpy(w[i] * y[i], &r, 1.0);
    }
    let mu = mu_rel * a.trace() / p.max(1) as f64;
    for i in 0..p {
        a[(i, i)] += mu.max(f64::MIN_POSITIVE);
    }
    let chol = a.cholesky().ok_or(Error::Domain {
        op: "weighted_ridge",
        detail: "normal matrix is not positive definite".into(),
    })?;
    Ok(chol.solve(&b).iter().copied().collect())
}
