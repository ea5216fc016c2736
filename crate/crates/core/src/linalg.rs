//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub type Chol = Cholesky<f64, Dyn>;

/// Relative jitter added once to the diagonal of a nugget-free covariance
/// whose factorization fails.
pub const JITTER_REL: f64 = 1e-10;

/// Cholesky factor of `a`. On failure, adds `JITTER_REL * scale` to the
/// diagonal and retries once. Returns the factor and whether jitter was used.
pub fn cholesky_with_jitter(a: DMatrix<f64>, scale: f64, block: &str) -> Result<(Chol, bool)> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok((c, false));
    }
    let mut b = a;
    let bump = JITTER_REL * if scale > 0.0 { scale } else { 1.0 };
    for i in 0..b.nrows() {
        b[(i, i)] += bump;
    }
    Cholesky::new(b)
        .map(|c| (c, true))
        .ok_or_else(|| Error::NotPositiveDefinite {
            block: block.to_string(),
        })
}

pub fn chol_logdet(c: &Chol) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum()
}

/// Symmetric eigendecomposition with eigenpairs sorted by a caller-supplied key,
/// descending.
pub fn sorted_eigen(a: &DMatrix<f64>, key: impl Fn(f64) -> f64) -> (DVector<f64>, DMatrix<f64>) {
    let eig = a.clone().symmetric_eigen();
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        key(eig.eigenvalues[j])
            .partial_cmp(&key(eig.eigenvalues[i]))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Inverse symmetric square root `V diag(λ^{-1/2}) Vᵀ` of a PSD matrix.
/// Eigenvalues below `floor_rel * λ_max` are dropped; their count is returned.
pub fn inv_sqrt_sym(a: &DMatrix<f64>, floor_rel: f64) -> Result<(DMatrix<f64>, usize)> {
    let (vals, vecs) = sorted_eigen(a, |x| x);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::NotPositiveDefinite {
            block: "inverse square root input".into(),
        });
    }
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    let mut dropped = 0;
    for k in 0..n {
        let lam = vals[k];
        if lam <= floor_rel * max {
            dropped += 1;
            continue;
        }
        let v = vecs.column(k);
        out.ger(1.0 / lam.sqrt(), &v, &v, 1.0);
    }
    Ok((out, dropped))
}

/// Indices of columns that are (numerically) linear combinations of earlier
/// columns, found by modified Gram–Schmidt. A column counts as dependent when
/// its residual norm is below `tol` times the larger of its own norm and the
/// largest column norm.
pub fn dependent_columns(x: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let scale = x.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col;
        for q in &basis {
            let proj = q.dot(&v);
            v.axpy(-proj, q, 1.0);
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= tol * norm0.max(scale) {
            dependent.push(j);
        } else {
            basis.push(v / norm);
        }
    }
    dependent
}

/// Ordinary least squares via the normal equations with a Cholesky solve.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let c = Cholesky::new(xtx).ok_or_else(|| Error::RankDeficient {
        columns: dependent_columns(x, 1e-10),
    })?;
    Ok(c.solve(&xty))
}

/// Population variance (divide by n).
pub fn pop_variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}
