//! Exponential covariance kernel and the covariance parameter vector.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Exponential covariance: `partial_sill * exp(-r / range) + nugget * 1{r = 0 on the diagonal}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpCovParams {
    pub range: f64,
    pub partial_sill: f64,
    pub nugget: f64,
}

impl ExpCovParams {
    pub fn new(range: f64, partial_sill: f64, nugget: f64) -> Result<Self> {
        let p = Self {
            range,
            partial_sill,
            nugget,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0) || !self.range.is_finite() {
            return invalid(format!("range must be positive, got {}", self.range));
        }
        if !(self.partial_sill >= 0.0) || !(self.nugget >= 0.0) {
            return invalid(format!(
                "variances must be non-negative, got sill {} nugget {}",
                self.partial_sill, self.nugget
            ));
        }
        Ok(())
    }
}

/// Covariance parameters of one β-field. `range` is absent for bases that do
/// not depend on it (thin plate splines).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub range: Option<f64>,
    pub partial_sill: f64,
}

/// The full covariance parameter set: β-fields, β-nuggets and the residual
/// field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovParams {
    /// One entry per trend, or empty when the model has no β-field smooth.
    pub theta_b: Vec<BetaParams>,
    /// β-field nugget variances, one per trend, when the nugget is modelled.
    pub theta_p: Option<Vec<f64>>,
    pub theta_v: ExpCovParams,
}

impl CovParams {
    pub fn validate(&self, m: usize) -> Result<()> {
        if !self.theta_b.is_empty() && self.theta_b.len() != m {
            return invalid(format!(
                "expected {m} β-field parameter sets, got {}",
                self.theta_b.len()
            ));
        }
        for (j, b) in self.theta_b.iter().enumerate() {
            if !(b.partial_sill >= 0.0) {
                return invalid(format!("β-field {j}: negative partial sill"));
            }
            if let Some(r) = b.range {
                if !(r > 0.0) || !r.is_finite() {
                    return invalid(format!("β-field {j}: range must be positive"));
                }
            }
        }
        if let Some(p) = &self.theta_p {
            if p.len() != m {
                return invalid(format!("expected {m} nugget variances, got {}", p.len()));
            }
            if p.iter().any(|v| !(*v >= 0.0)) {
                return invalid("negative β-field nugget");
            }
        }
        self.theta_v.validate()
    }
}

/// Exponential correlation `exp(-r / range)`.
pub fn exp_corr(r: f64, range: f64) -> Result<f64> {
    if r < 0.0 || r.is_nan() {
        return invalid(format!("distance must be non-negative, got {r}"));
    }
    if !(range > 0.0) {
        return invalid(format!("range must be positive, got {range}"));
    }
    Ok(corr(r, range))
}

#[inline]
pub(crate) fn corr(r: f64, range: f64) -> f64 {
    (-r / range).exp()
}

/// Correlation matrix `C(d_ij)` for an arbitrary (possibly rectangular)
/// distance matrix.
pub fn corr_matrix(dists: &DMatrix<f64>, range: f64) -> DMatrix<f64> {
    dists.map(|d| corr(d, range))
}

/// Square covariance matrix from a distance matrix.
pub fn cov_matrix(dists: &DMatrix<f64>, params: &ExpCovParams) -> Result<DMatrix<f64>> {
    if !dists.is_square() {
        return Err(Error::Invalid(format!(
            "distance matrix must be square, got {}x{}",
            dists.nrows(),
            dists.ncols()
        )));
    }
    params.validate()?;
    let mut c = dists.map(|d| params.partial_sill * corr(d, params.range));
    for i in 0..c.nrows() {
        c[(i, i)] += params.nugget;
    }
    Ok(c)
}
