//! Profile likelihood of the stacked model
//!
//! ```text
//! Y = F X α + F B β̃ + F P + V,   Σ̃ = F B Bᵀ Fᵀ + F D² Fᵀ + Σ_V
//! ```
//!
//! evaluated without forming the dense `N x N` covariance. `B` is the
//! block-diagonal β-field loading (`r` columns in total), `D² = diag(σ²_j)` the
//! β-nugget and `Σ_V` the block-diagonal (by period) residual covariance.
//!
//! With `M₀ = Fᵀ Σ_V⁻¹ F` and `A₁ = I + D M₀ D`, the nugget-augmented
//! `Σ₁ = Σ_V + F D² Fᵀ` has
//!
//! ```text
//! log|Σ₁|   = log|Σ_V| + log|A₁|
//! Fᵀ Σ₁⁻¹ F = M₀ − M₀ D A₁⁻¹ D M₀
//! ```
//!
//! and adding the low-rank term with `M₁ = Bᵀ Fᵀ Σ₁⁻¹ F B`, `A₂ = I + M₁`:
//!
//! ```text
//! log|Σ̃|  = log|Σ₁| + log|A₂|
//! Σ̃⁻¹     = Σ₁⁻¹ − Σ₁⁻¹ F B A₂⁻¹ Bᵀ Fᵀ Σ₁⁻¹
//! ```
//!
//! Without the β-nugget, `Σ₁ = Σ_V` and `M₁` is accumulated period by period
//! from `(F B)_t`, so no `m n x m n` matrix is ever formed.

use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::SpatialBasis;
use crate::covariance::{corr, BetaParams, CovParams, ExpCovParams};
use crate::error::{invalid, Error, Result};
use crate::geometry::{max_distance, pairwise_distances, Coord};
use crate::linalg::{chol_logdet, cholesky_with_jitter, dependent_columns, Chol};
use crate::optimize::{fd_gradient, Gradient};
use crate::temporal::{build_f, ObservationSet, SparseF, TemporalBasis};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Rows of one period in the stacked observation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodBlock {
    pub period: usize,
    pub rows: Range<usize>,
    pub sites: Vec<usize>,
}

/// Everything about the data that does not depend on covariance parameters.
#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub coords: Vec<Coord>,
    pub f: SparseF,
    /// Per-trend designs `X_j`, each `n x p_j`.
    pub x_blocks: Vec<DMatrix<f64>>,
    /// `F X`, `N x Σ p_j`.
    pub fx: DMatrix<f64>,
    pub y: DVector<f64>,
    pub blocks: Vec<PeriodBlock>,
    pub dists: DMatrix<f64>,
}

impl ModelLayout {
    /// `y` must follow the row order of `f`.
    pub fn new(
        coords: Vec<Coord>,
        f: SparseF,
        x_blocks: Vec<DMatrix<f64>>,
        y: DVector<f64>,
    ) -> Result<Self> {
        let n = coords.len();
        if f.n_sites != n {
            return invalid(format!("F has {} sites, layout {n}", f.n_sites));
        }
        if x_blocks.len() != f.m() {
            return invalid(format!("{} design blocks for {} trends", x_blocks.len(), f.m()));
        }
        if let Some(x) = x_blocks.iter().find(|x| x.nrows() != n) {
            return invalid(format!("design block has {} rows, expected {n}", x.nrows()));
        }
        if y.len() != f.nrows() {
            return invalid("observation vector does not match F");
        }
        if y.is_empty() {
            return Err(Error::Empty("observations".into()));
        }
        let p: usize = x_blocks.iter().map(|x| x.ncols()).sum();
        let mut fx = DMatrix::zeros(f.nrows(), p);
        for (r, row) in f.rows.iter().enumerate() {
            let mut off = 0;
            for (j, x) in x_blocks.iter().enumerate() {
                let fj = f.values[(r, j)];
                for c in 0..x.ncols() {
                    fx[(r, off + c)] = fj * x[(row.site, c)];
                }
                off += x.ncols();
            }
        }
        let dep = dependent_columns(&fx, 1e-9);
        if !dep.is_empty() {
            return Err(Error::RankDeficient { columns: dep });
        }
        let mut blocks: Vec<PeriodBlock> = Vec::new();
        for (r, row) in f.rows.iter().enumerate() {
            match blocks.last_mut() {
                Some(b) if b.period == row.period => {
                    b.rows.end = r + 1;
                    b.sites.push(row.site);
                }
                _ => blocks.push(PeriodBlock {
                    period: row.period,
                    rows: r..r + 1,
                    sites: vec![row.site],
                }),
            }
        }
        let dists = pairwise_distances(&coords, &coords)?;
        Ok(Self {
            coords,
            f,
            x_blocks,
            fx,
            y,
            blocks,
            dists,
        })
    }

    /// Build `F`, `y` and the layout from observations of `site_ids` (whose
    /// coordinates and designs are given in the same order).
    pub fn from_observations(
        obs: &ObservationSet,
        trends: &TemporalBasis,
        site_ids: &[String],
        coords: Vec<Coord>,
        x_blocks: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let f = build_f(obs, trends, site_ids)?;
        let index: std::collections::HashMap<&str, usize> = site_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut lookup = std::collections::HashMap::with_capacity(obs.len());
        for r in obs.records() {
            lookup.insert((index[r.site_id.as_str()], r.period), r.value);
        }
        let y = DVector::from_iterator(
            f.nrows(),
            f.rows.iter().map(|row| lookup[&(row.site, row.period)]),
        );
        Self::new(coords, f, x_blocks, y)
    }

    pub fn n_sites(&self) -> usize {
        self.coords.len()
    }

    pub fn m(&self) -> usize {
        self.f.m()
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_alpha(&self) -> usize {
        self.fx.ncols()
    }

    pub fn max_distance(&self) -> f64 {
        max_distance(&self.coords)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikPath {
    Nugget,
    NoNugget,
    Dense,
}

#[derive(Debug, Clone)]
pub struct LogLikResult {
    pub value: f64,
    pub alpha_hat: DVector<f64>,
    /// `(Xᵀ Fᵀ Σ̃⁻¹ F X)⁻¹`, the plug-in covariance of `α̂`.
    pub alpha_cov: DMatrix<f64>,
    pub logdet: f64,
    pub quad: f64,
    pub path: LikPath,
    /// Periods whose residual block needed diagonal jitter.
    pub jittered_periods: Vec<usize>,
}

/// Unit-sill β-field loadings at the layout sites, one per trend (empty when
/// the model has no β-field smooth).
pub fn unit_loadings(
    basis: &SpatialBasis,
    layout: &ModelLayout,
    theta_b: &[BetaParams],
) -> Result<Vec<DMatrix<f64>>> {
    if !basis.has_field() {
        return Ok(Vec::new());
    }
    let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(theta_b.len());
    for (j, b) in theta_b.iter().enumerate() {
        // Reuse the previous field's loading when the range is shared.
        if j > 0 && theta_b[j - 1].range == b.range {
            out.push(out[j - 1].clone());
            continue;
        }
        out.push(basis.loading(&layout.coords, b.range)?);
    }
    Ok(out)
}

struct NuggetParts {
    d: DVector<f64>,
    m0: DMatrix<f64>,
    a1: Chol,
}

/// Factorized `Σ̃` for one parameter vector.
pub struct Factorization<'a> {
    layout: &'a ModelLayout,
    chols: Vec<Chol>,
    nugget: Option<NuggetParts>,
    /// Scaled per-trend loadings: the diagonal blocks of `B`.
    b: Vec<DMatrix<f64>>,
    /// Column offset of each block in `B`; the last entry is `B`'s width.
    b_cols: Vec<usize>,
    a2: Option<Chol>,
    logdet: f64,
    jittered: Vec<usize>,
}

impl<'a> Factorization<'a> {
    /// `loadings` are unit-sill (see [`unit_loadings`]); they are scaled by
    /// `sqrt(τ²_j)` here.
    pub fn new(layout: &'a ModelLayout, params: &CovParams, loadings: &[DMatrix<f64>]) -> Result<Self> {
        let m = layout.m();
        let n = layout.n_sites();
        params.validate(m)?;
        if !loadings.is_empty() && (loadings.len() != m || params.theta_b.len() != m) {
            return invalid("β-field loadings and parameters must cover every trend");
        }
        let v = params.theta_v;
        let results: Vec<Result<(Chol, bool)>> = layout
            .blocks
            .par_iter()
            .map(|blk| {
                let k = blk.sites.len();
                let mut s = DMatrix::from_fn(k, k, |a, b| {
                    v.partial_sill * corr(layout.dists[(blk.sites[a], blk.sites[b])], v.range)
                });
                for a in 0..k {
                    s[(a, a)] += v.nugget;
                }
                cholesky_with_jitter(s, v.partial_sill, &format!("Σ_ν for period {}", blk.period))
            })
            .collect();
        let mut chols = Vec::with_capacity(results.len());
        let mut jittered = Vec::new();
        let mut logdet_v = 0.0;
        for (blk, res) in layout.blocks.iter().zip(results) {
            let (c, jit) = res?;
            if jit {
                jittered.push(blk.period);
            }
            logdet_v += chol_logdet(&c);
            chols.push(c);
        }

        let b: Vec<DMatrix<f64>> = loadings
            .iter()
            .enumerate()
            .map(|(j, l)| l * params.theta_b[j].partial_sill.sqrt())
            .collect();
        let mut b_cols = vec![0];
        for l in &b {
            b_cols.push(b_cols.last().unwrap() + l.ncols());
        }
        let r = *b_cols.last().unwrap();

        let mut fac = Self {
            layout,
            chols,
            nugget: None,
            b,
            b_cols,
            a2: None,
            logdet: logdet_v,
            jittered,
        };

        let m1 = if let Some(p) = &params.theta_p {
            let m0 = fac.m0();
            let d = DVector::from_fn(m * n, |i, _| p[i / n].sqrt());
            let mut a1 = DMatrix::from_fn(m * n, m * n, |i, k| d[i] * m0[(i, k)] * d[k]);
            for i in 0..m * n {
                a1[(i, i)] += 1.0;
            }
            let a1 = Cholesky::new(a1).ok_or_else(|| Error::NotPositiveDefinite {
                block: "β-nugget capacitance I + D M₀ D".into(),
            })?;
            fac.logdet += chol_logdet(&a1);
            let m1 = if r > 0 {
                let m0b = fac.mul_b(&m0);
                let dm0b = DMatrix::from_fn(m * n, r, |i, k| d[i] * m0b[(i, k)]);
                // (D M₀ B)ᵀ A₁⁻¹ (D M₀ B) = Yᵀ Y with Y = L⁻¹ D M₀ B.
                let y = a1
                    .l_dirty()
                    .solve_lower_triangular(&dm0b)
                    .expect("Cholesky factor has a positive diagonal");
                let mut m1 = fac.bt_mul(&m0b);
                m1 -= y.transpose() * &y;
                Some(m1)
            } else {
                None
            };
            fac.nugget = Some(NuggetParts { d, m0, a1 });
            m1
        } else if r > 0 {
            Some(fac.m1_by_period())
        } else {
            None
        };

        if let Some(mut a2) = m1 {
            for i in 0..r {
                a2[(i, i)] += 1.0;
            }
            let a2 = (&a2 + a2.transpose()) * 0.5;
            let c = Cholesky::new(a2).ok_or_else(|| Error::NotPositiveDefinite {
                block: "β-field capacitance I + M₁".into(),
            })?;
            fac.logdet += chol_logdet(&c);
            fac.a2 = Some(c);
        }
        Ok(fac)
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn jittered_periods(&self) -> &[usize] {
        &self.jittered
    }

    pub fn path(&self) -> LikPath {
        if self.nugget.is_some() {
            LikPath::Nugget
        } else {
            LikPath::NoNugget
        }
    }

    /// `Σ_V⁻¹ R`, block by block.
    pub fn solve_v(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = rhs.clone();
        for (blk, c) in self.layout.blocks.iter().zip(&self.chols) {
            let mut view = out.rows_mut(blk.rows.start, blk.rows.len());
            let solved = c.solve(&view.clone_owned());
            view.copy_from(&solved);
        }
        out
    }

    fn m0(&self) -> DMatrix<f64> {
        let n = self.layout.n_sites();
        let m = self.layout.m();
        let f = &self.layout.f;
        let mut m0 = DMatrix::zeros(m * n, m * n);
        for (blk, c) in self.layout.blocks.iter().zip(&self.chols) {
            let sinv = c.inverse();
            let fv: Vec<f64> = (0..m).map(|j| f.values[(blk.rows.start, j)]).collect();
            for (a, &sa) in blk.sites.iter().enumerate() {
                for (bb, &sb) in blk.sites.iter().enumerate() {
                    let w = sinv[(a, bb)];
                    for j in 0..m {
                        for k in 0..m {
                            m0[(j * n + sa, k * n + sb)] += fv[j] * fv[k] * w;
                        }
                    }
                }
            }
        }
        m0
    }

    /// `X B` for `X` with `m n` columns.
    fn mul_b(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.layout.n_sites();
        let mut out = DMatrix::zeros(x.nrows(), self.width());
        for (j, bj) in self.b.iter().enumerate() {
            out.columns_mut(self.b_cols[j], bj.ncols())
                .gemm(1.0, &x.columns(j * n, n), bj, 0.0);
        }
        out
    }

    /// `Bᵀ Y` for `Y` with `m n` rows.
    fn bt_mul(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.layout.n_sites();
        let mut out = DMatrix::zeros(self.width(), y.ncols());
        for (j, bj) in self.b.iter().enumerate() {
            // Transposed products go through the blocked kernel; gemm_tr does not.
            let p = bj.transpose() * y.rows(j * n, n);
            out.rows_mut(self.b_cols[j], bj.ncols()).copy_from(&p);
        }
        out
    }

    /// `B U` for `U` with `r` rows.
    fn b_mul(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.layout.n_sites();
        let mut out = DMatrix::zeros(self.layout.m() * n, u.ncols());
        for (j, bj) in self.b.iter().enumerate() {
            let p = bj * u.rows(self.b_cols[j], bj.ncols());
            out.rows_mut(j * n, n).copy_from(&p);
        }
        out
    }

    fn width(&self) -> usize {
        *self.b_cols.last().unwrap()
    }

    fn m1_by_period(&self) -> DMatrix<f64> {
        let m = self.layout.m();
        let r = self.width();
        let f = &self.layout.f;
        let mut m1 = DMatrix::zeros(r, r);
        for (blk, c) in self.layout.blocks.iter().zip(&self.chols) {
            let fv: Vec<f64> = (0..m).map(|j| f.values[(blk.rows.start, j)]).collect();
            let mut g = DMatrix::zeros(blk.sites.len(), r);
            for (a, &s) in blk.sites.iter().enumerate() {
                for (j, bj) in self.b.iter().enumerate() {
                    let c0 = self.b_cols[j];
                    for k in 0..bj.ncols() {
                        g[(a, c0 + k)] = fv[j] * bj[(s, k)];
                    }
                }
            }
            let sg = c.solve(&g);
            m1 += g.transpose() * sg;
        }
        m1
    }

    /// `diag(d) A₁⁻¹ diag(d) X`.
    fn solve1(np: &NuggetParts, x: &DMatrix<f64>) -> DMatrix<f64> {
        let dx = DMatrix::from_fn(x.nrows(), x.ncols(), |i, k| np.d[i] * x[(i, k)]);
        let s = np.a1.solve(&dx);
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, k| np.d[i] * s[(i, k)])
    }

    /// Shared first stage: `W = Σ_V⁻¹ R`, `g = Fᵀ W`, `h₁`, `g₁`.
    fn stage(&self, rhs: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, Option<DMatrix<f64>>, DMatrix<f64>) {
        let w = self.solve_v(rhs);
        let g = self.layout.f.tr_mul(&w);
        match &self.nugget {
            Some(np) => {
                let h1 = Self::solve1(np, &g);
                let g1 = &g - &np.m0 * &h1;
                (w, g, Some(h1), g1)
            }
            None => {
                let g1 = g.clone();
                (w, g, None, g1)
            }
        }
    }

    /// `Rᵀ Σ̃⁻¹ R`.
    pub fn quad_form(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let (w, g, h1, g1) = self.stage(rhs);
        let mut q = rhs.transpose() * &w;
        if let Some(h1) = &h1 {
            q -= g.transpose() * h1;
        }
        if let Some(a2) = &self.a2 {
            let v = self.bt_mul(&g1);
            q -= v.transpose() * a2.solve(&v);
        }
        (&q + q.transpose()) * 0.5
    }

    /// `Σ̃⁻¹ R`.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let (w, _, h1, g1) = self.stage(rhs);
        let mn = self.layout.f.ncols();
        let u = match &self.a2 {
            Some(a2) => self.b_mul(&a2.solve(&self.bt_mul(&g1))),
            None => DMatrix::zeros(mn, rhs.ncols()),
        };
        let inner = match (&self.nugget, h1) {
            (Some(np), Some(h1)) => {
                let corr_u = Self::solve1(np, &(&np.m0 * &u));
                h1 + &u - corr_u
            }
            _ => u,
        };
        w - self.solve_v(&self.layout.f.mul(&inner))
    }
}

fn finish(
    layout: &ModelLayout,
    q: DMatrix<f64>,
    logdet: f64,
    path: LikPath,
    jittered: Vec<usize>,
    params: &CovParams,
) -> Result<LogLikResult> {
    let p = layout.n_alpha();
    let qxx = q.view((0, 0), (p, p)).into_owned();
    let qxy = q.view((0, p), (p, 1)).into_owned();
    let qyy = q[(p, p)];
    let c = Cholesky::new(qxx).ok_or_else(|| Error::RankDeficient {
        columns: dependent_columns(&layout.fx, 1e-9),
    })?;
    let alpha = c.solve(&qxy);
    let quad = qyy - (qxy.transpose() * &alpha)[(0, 0)];
    let value = -0.5 * (logdet + quad + layout.n_obs() as f64 * LN_2PI);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            params: format!("{params:?}"),
        });
    }
    Ok(LogLikResult {
        value,
        alpha_hat: alpha.column(0).into_owned(),
        alpha_cov: c.inverse(),
        logdet,
        quad,
        path,
        jittered_periods: jittered,
    })
}

fn stacked_rhs(layout: &ModelLayout) -> DMatrix<f64> {
    let p = layout.n_alpha();
    let mut r = DMatrix::zeros(layout.n_obs(), p + 1);
    r.columns_mut(0, p).copy_from(&layout.fx);
    r.set_column(p, &layout.y);
    r
}

/// Profile log-likelihood with precomputed unit-sill loadings.
pub fn profile_loglik_with(
    params: &CovParams,
    layout: &ModelLayout,
    loadings: &[DMatrix<f64>],
) -> Result<LogLikResult> {
    let fac = Factorization::new(layout, params, loadings)?;
    let q = fac.quad_form(&stacked_rhs(layout));
    finish(layout, q, fac.logdet(), fac.path(), fac.jittered.clone(), params)
}

/// Profile log-likelihood `−½[log|Σ̃| + rᵀ Σ̃⁻¹ r + N log 2π]` at `r = Y − F X α̂`.
pub fn profile_loglik(params: &CovParams, layout: &ModelLayout, basis: &SpatialBasis) -> Result<LogLikResult> {
    let loadings = unit_loadings(basis, layout, &params.theta_b)?;
    profile_loglik_with(params, layout, &loadings)
}

/// GLS estimate `α̂`.
pub fn gls_alpha(params: &CovParams, layout: &ModelLayout, basis: &SpatialBasis) -> Result<DVector<f64>> {
    Ok(profile_loglik(params, layout, basis)?.alpha_hat)
}

/// Dense `Σ̃` (for small problems and cross-checks).
pub fn dense_sigma(params: &CovParams, layout: &ModelLayout, loadings: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let m = layout.m();
    let n = layout.n_sites();
    params.validate(m)?;
    let mut cov_beta = DMatrix::zeros(m * n, m * n);
    for (j, l) in loadings.iter().enumerate() {
        let c = l * l.transpose() * params.theta_b[j].partial_sill;
        cov_beta.view_mut((j * n, j * n), (n, n)).copy_from(&c);
    }
    if let Some(p) = &params.theta_p {
        for i in 0..m * n {
            cov_beta[(i, i)] += p[i / n];
        }
    }
    let fd = layout.f.to_dense();
    let mut s = &fd * cov_beta * fd.transpose();
    let v = params.theta_v;
    for blk in &layout.blocks {
        for (a, &sa) in blk.sites.iter().enumerate() {
            for (b, &sb) in blk.sites.iter().enumerate() {
                s[(blk.rows.start + a, blk.rows.start + b)] +=
                    v.partial_sill * corr(layout.dists[(sa, sb)], v.range);
            }
            s[(blk.rows.start + a, blk.rows.start + a)] += v.nugget;
        }
    }
    Ok(s)
}

/// Profile log-likelihood through a dense Cholesky of `Σ̃`.
pub fn profile_loglik_dense(
    params: &CovParams,
    layout: &ModelLayout,
    loadings: &[DMatrix<f64>],
) -> Result<LogLikResult> {
    let s = dense_sigma(params, layout, loadings)?;
    let (c, jit) = cholesky_with_jitter(s, params.theta_v.partial_sill, "dense Σ̃")?;
    let r = stacked_rhs(layout);
    let q = r.transpose() * c.solve(&r);
    let q = (&q + q.transpose()) * 0.5;
    let jittered = if jit { vec![usize::MAX] } else { Vec::new() };
    finish(layout, q, chol_logdet(&c), LikPath::Dense, jittered, params)
}

/// One entry of the optimizer's parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "param", content = "field")]
pub enum ParamSlot {
    BetaRange(usize),
    BetaSill(usize),
    BetaNugget(usize),
    NuRange,
    NuSill,
    NuNugget,
}

impl std::fmt::Display for ParamSlot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::BetaRange(j) => write!(f, "phi_{}", j + 1),
            Self::BetaSill(j) => write!(f, "tau2_{}", j + 1),
            Self::BetaNugget(j) => write!(f, "sigma2_{}", j + 1),
            Self::NuRange => write!(f, "phi_nu"),
            Self::NuSill => write!(f, "tau2_nu"),
            Self::NuNugget => write!(f, "sigma2_nu"),
        }
    }
}

/// Log-scale parameterization of `CovParams` with box constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMap {
    pub m: usize,
    pub has_field: bool,
    /// Shared fixed β-field range, when ranges are not estimated.
    pub fixed_range: Option<f64>,
    pub uses_range: bool,
    pub nugget: bool,
    pub slots: Vec<ParamSlot>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamMap {
    /// Bounds: `log φ ∈ [log(1e-3 d), log(10 d)]` for maximum distance `d`,
    /// variances in `[log 1e-8, log(100 var_y)]`.
    pub fn new(
        m: usize,
        has_field: bool,
        uses_range: bool,
        fixed_range: Option<f64>,
        nugget: bool,
        max_dist: f64,
        var_y: f64,
    ) -> Result<Self> {
        if !(max_dist > 0.0) {
            return Err(Error::Degenerate("all sites coincide".into()));
        }
        if !(var_y > 0.0) {
            return Err(Error::Degenerate("observations have zero variance".into()));
        }
        let mut slots = Vec::new();
        if has_field {
            for j in 0..m {
                if uses_range && fixed_range.is_none() {
                    slots.push(ParamSlot::BetaRange(j));
                }
                slots.push(ParamSlot::BetaSill(j));
            }
        }
        if nugget {
            slots.extend((0..m).map(ParamSlot::BetaNugget));
        }
        slots.extend([ParamSlot::NuRange, ParamSlot::NuSill, ParamSlot::NuNugget]);
        let (rlo, rhi) = ((1e-3 * max_dist).ln(), (10.0 * max_dist).ln());
        let (vlo, vhi) = (1e-8f64.ln(), (100.0 * var_y).ln().max(1e-8f64.ln() + 1.0));
        let lower = slots
            .iter()
            .map(|s| if is_range(s) { rlo } else { vlo })
            .collect();
        let upper = slots
            .iter()
            .map(|s| if is_range(s) { rhi } else { vhi })
            .collect();
        Ok(Self {
            m,
            has_field,
            fixed_range,
            uses_range,
            nugget,
            slots,
            lower,
            upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.slots.len()
    }

    pub fn to_params(&self, x: &[f64]) -> CovParams {
        let mut theta_b: Vec<BetaParams> = if self.has_field {
            vec![
                BetaParams {
                    range: if self.uses_range { self.fixed_range } else { None },
                    partial_sill: 0.0,
                };
                self.m
            ]
        } else {
            Vec::new()
        };
        let mut theta_p = self.nugget.then(|| vec![0.0; self.m]);
        let mut v = ExpCovParams {
            range: 1.0,
            partial_sill: 0.0,
            nugget: 0.0,
        };
        for (slot, &xi) in self.slots.iter().zip(x) {
            let val = xi.exp();
            match *slot {
                ParamSlot::BetaRange(j) => theta_b[j].range = Some(val),
                ParamSlot::BetaSill(j) => theta_b[j].partial_sill = val,
                ParamSlot::BetaNugget(j) => theta_p.as_mut().unwrap()[j] = val,
                ParamSlot::NuRange => v.range = val,
                ParamSlot::NuSill => v.partial_sill = val,
                ParamSlot::NuNugget => v.nugget = val,
            }
        }
        CovParams {
            theta_b,
            theta_p,
            theta_v: v,
        }
    }

    pub fn from_params(&self, p: &CovParams) -> Vec<f64> {
        self.slots
            .iter()
            .map(|slot| {
                let v = match *slot {
                    ParamSlot::BetaRange(j) => p.theta_b[j].range.unwrap_or(1.0),
                    ParamSlot::BetaSill(j) => p.theta_b[j].partial_sill,
                    ParamSlot::BetaNugget(j) => p.theta_p.as_ref().map_or(0.0, |t| t[j]),
                    ParamSlot::NuRange => p.theta_v.range,
                    ParamSlot::NuSill => p.theta_v.partial_sill,
                    ParamSlot::NuNugget => p.theta_v.nugget,
                };
                v.max(f64::MIN_POSITIVE).ln()
            })
            .collect()
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn within_bounds(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lower[i] - 1e-12 && v <= self.upper[i] + 1e-12)
    }
}

fn is_range(s: &ParamSlot) -> bool {
    matches!(s, ParamSlot::BetaRange(_) | ParamSlot::NuRange)
}

/// Finite-difference gradient of the profile log-likelihood on the log scale.
pub fn loglik_gradient(
    map: &ParamMap,
    x: &[f64],
    layout: &ModelLayout,
    basis: &SpatialBasis,
    rel_step: f64,
) -> Result<Gradient> {
    let mut f = |p: &[f64]| profile_loglik(&map.to_params(p), layout, basis).map(|r| r.value);
    fd_gradient(&mut f, x, &map.lower, &map.upper, rel_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::tprs_basis;
    use crate::linalg::ols;
    use crate::temporal::Observation;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(n: usize, t: usize, m: usize, seed: u64) -> ModelLayout {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<Coord> = (0..n)
            .map(|_| Coord::new(rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)))
            .collect();
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:02}")).collect();
        let mut recs = Vec::new();
        for p in 0..t {
            for id in &ids {
                if rng.random_bool(0.7) {
                    recs.push(Observation {
                        site_id: id.clone(),
                        period: p,
                        value: rng.random_range(-1.0..3.0),
                    });
                }
            }
        }
        let anchor = NaiveDate::from_ymd_opt(2000, 1, 3).unwrap();
        let obs = ObservationSet::new(anchor, recs).unwrap();
        let trends = TemporalBasis::seasonal(anchor, t, m).unwrap();
        let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { (i as f64).sin() });
        ModelLayout::from_observations(&obs, &trends, &ids, coords, vec![x; m]).unwrap()
    }

    fn params(m: usize, nugget: bool, field: bool) -> CovParams {
        CovParams {
            theta_b: if field {
                (0..m)
                    .map(|j| BetaParams {
                        range: None,
                        partial_sill: 0.8 / (j + 1) as f64,
                    })
                    .collect()
            } else {
                Vec::new()
            },
            theta_p: nugget.then(|| (0..m).map(|j| 0.3 / (j + 1) as f64).collect()),
            theta_v: ExpCovParams::new(4.0, 0.5, 0.2).unwrap(),
        }
    }

    #[test]
    fn iid_case_matches_ols() {
        let lay = instance(10, 5, 1, 1);
        let p = CovParams {
            theta_b: Vec::new(),
            theta_p: None,
            theta_v: ExpCovParams::new(1.0, 0.0, 1.0).unwrap(),
        };
        let r = profile_loglik(&p, &lay, &SpatialBasis::None).unwrap();
        let beta = ols(&lay.fx, &lay.y).unwrap();
        let rss = (&lay.y - &lay.fx * &beta).norm_squared();
        let want = -0.5 * (lay.n_obs() as f64 * LN_2PI + rss);
        assert!((r.value - want).abs() < 1e-9);
        assert!((r.alpha_hat - beta).amax() < 1e-9);
    }

    #[test]
    fn block_paths_match_dense() {
        for (seed, m) in [(2u64, 1usize), (3, 2)] {
            let lay = instance(12, 6, m, seed);
            let basis = SpatialBasis::Tprs(tprs_basis(&lay.coords, 6).unwrap());
            for nugget in [false, true] {
                let p = params(m, nugget, true);
                let l = unit_loadings(&basis, &lay, &p.theta_b).unwrap();
                let fast = profile_loglik_with(&p, &lay, &l).unwrap();
                let dense = profile_loglik_dense(&p, &lay, &l).unwrap();
                assert!((fast.value - dense.value).abs() < 1e-8 * dense.value.abs());
                assert!((fast.alpha_hat - dense.alpha_hat).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn solve_matches_dense_inverse() {
        let lay = instance(9, 5, 2, 4);
        let basis = SpatialBasis::Tprs(tprs_basis(&lay.coords, 5).unwrap());
        for nugget in [false, true] {
            let p = params(2, nugget, true);
            let l = unit_loadings(&basis, &lay, &p.theta_b).unwrap();
            let fac = Factorization::new(&lay, &p, &l).unwrap();
            let s = dense_sigma(&p, &lay, &l).unwrap();
            let rhs = DMatrix::from_fn(lay.n_obs(), 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
            let got = fac.solve(&rhs);
            assert!((&s * got - rhs).amax() < 1e-8);
        }
    }

    #[test]
    fn nugget_continuity() {
        let lay = instance(12, 6, 2, 5);
        let basis = SpatialBasis::Tprs(tprs_basis(&lay.coords, 7).unwrap());
        let mut p = params(2, false, true);
        let a = profile_loglik(&p, &lay, &basis).unwrap().value;
        p.theta_p = Some(vec![1e-8, 1e-8]);
        let b = profile_loglik(&p, &lay, &basis).unwrap().value;
        assert!((a - b).abs() < 1e-3);
    }

    #[test]
    fn duplicated_covariate_rejected() {
        let lay = instance(8, 3, 1, 6);
        let x = DMatrix::from_fn(8, 3, |i, c| if c == 0 { 1.0 } else { i as f64 });
        let res = ModelLayout::new(lay.coords.clone(), lay.f.clone(), vec![x], lay.y.clone());
        assert!(matches!(res, Err(Error::RankDeficient { columns }) if columns == vec![2]));
    }

    #[test]
    fn deterministic_evaluation() {
        let lay = instance(10, 4, 2, 7);
        let basis = SpatialBasis::Tprs(tprs_basis(&lay.coords, 5).unwrap());
        let p = params(2, true, true);
        let a = profile_loglik(&p, &lay, &basis).unwrap().value;
        let b = profile_loglik(&p, &lay, &basis).unwrap().value;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn param_map_round_trip() {
        let map = ParamMap::new(2, true, true, None, true, 50.0, 2.0).unwrap();
        assert_eq!(map.dim(), 2 * 2 + 2 + 3);
        let x: Vec<f64> = (0..map.dim()).map(|i| 0.1 * i as f64 - 0.3).collect();
        let p = map.to_params(&x);
        let back = map.from_params(&p);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        let fixed = ParamMap::new(2, true, true, Some(10.0), false, 50.0, 2.0).unwrap();
        assert_eq!(fixed.dim(), 2 + 3);
        assert_eq!(fixed.to_params(&[0.0; 5]).theta_b[1].range, Some(10.0));
    }

    #[test]
    fn gradient_one_sided_at_lower_bound() {
        let lay = instance(10, 4, 1, 8);
        let basis = SpatialBasis::Tprs(tprs_basis(&lay.coords, 5).unwrap());
        let map = ParamMap::new(1, true, false, None, true, lay.max_distance(), 1.0).unwrap();
        let mut x = map.from_params(&params(1, true, true));
        x[0] = map.lower[0];
        let g = loglik_gradient(&map, &x, &lay, &basis, 1e-5).unwrap();
        assert!(g.one_sided[0]);
        assert!(g.values.iter().all(|v| v.is_finite()));
    }
}
