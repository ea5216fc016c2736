//! Observations on the two-week period grid, smooth temporal trends and the
//! sparse observation-to-coefficient map `F`.
//!
//! Trend estimation fills the missing cells of the period-by-site matrix by
//! iterated truncated SVD, smooths the leading left singular vectors with a
//! cubic smoothing spline and orthonormalizes them against the constant.
//! Columns are orthonormal under the mean inner product
//! `<a, b> = (1/T) sum_t a_t b_t`, so the constant column has unit norm too.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::{Days, NaiveDate};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{dependent_columns, ols};

pub const PERIOD_DAYS: u64 = 14;
pub const COMPLETION_TOL: f64 = 1e-6;
pub const COMPLETION_MAX_ITER: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub site_id: String,
    pub period: usize,
    pub value: f64,
}

/// Log-scale two-week observations. Records are kept sorted by period, then
/// site id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub anchor: NaiveDate,
    records: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(anchor: NaiveDate, mut records: Vec<Observation>) -> Result<Self> {
        records.sort_by(|a, b| a.period.cmp(&b.period).then(a.site_id.cmp(&b.site_id)));
        for w in records.windows(2) {
            if w[0].period == w[1].period && w[0].site_id == w[1].site_id {
                return invalid(format!(
                    "duplicate record for site `{}` in period {}",
                    w[0].site_id, w[0].period
                ));
            }
        }
        if let Some(r) = records.iter().find(|r| !r.value.is_finite()) {
            return invalid(format!(
                "non-finite value at site `{}` period {}",
                r.site_id, r.period
            ));
        }
        Ok(Self { anchor, records })
    }

    pub fn records(&self) -> &[Observation] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One past the largest observed period index.
    pub fn n_periods(&self) -> usize {
        self.records.iter().map(|r| r.period + 1).max().unwrap_or(0)
    }

    /// Number of sites observed in each period, `n_t`.
    pub fn period_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_periods()];
        for r in &self.records {
            counts[r.period] += 1;
        }
        counts
    }

    /// Sorted distinct site ids.
    pub fn site_ids(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.site_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn site_series(&self, site_id: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.site_id == site_id)
            .map(|r| (r.period, r.value))
            .collect()
    }

    pub fn period_date(&self, period: usize) -> NaiveDate {
        period_date(self.anchor, period)
    }

    pub fn filter(&self, keep: impl Fn(&Observation) -> bool) -> ObservationSet {
        ObservationSet {
            anchor: self.anchor,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn without_sites(&self, drop: &HashSet<&str>) -> ObservationSet {
        self.filter(|r| !drop.contains(r.site_id.as_str()))
    }

    pub fn only_sites(&self, keep: &HashSet<&str>) -> ObservationSet {
        self.filter(|r| keep.contains(r.site_id.as_str()))
    }
}

pub fn period_date(anchor: NaiveDate, period: usize) -> NaiveDate {
    anchor + Days::new(PERIOD_DAYS * period as u64)
}

/// Period index of `date` in 14-day bins anchored at `anchor`.
pub fn period_of(anchor: NaiveDate, date: NaiveDate) -> Result<usize> {
    let days = (date - anchor).num_days();
    if days < 0 {
        return invalid(format!("date {date} precedes the period anchor {anchor}"));
    }
    Ok((days as u64 / PERIOD_DAYS) as usize)
}

/// Smooth temporal trends sampled on the period grid `0..T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalBasis {
    pub anchor: NaiveDate,
    /// `T x m`, first column identically one.
    pub values: DMatrix<f64>,
    /// Relative imputation change per completion iteration.
    #[serde(default)]
    pub completion_trace: Vec<f64>,
}

impl TemporalBasis {
    pub fn from_values(anchor: NaiveDate, values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(Error::Empty("temporal basis".into()));
        }
        if values.column(0).iter().any(|&v| v != 1.0) {
            return invalid("first trend must be identically one");
        }
        Ok(Self {
            anchor,
            values,
            completion_trace: Vec::new(),
        })
    }

    pub fn m(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_periods(&self) -> usize {
        self.values.nrows()
    }

    pub fn value(&self, period: usize, j: usize) -> f64 {
        self.values[(period, j)]
    }

    pub fn row(&self, period: usize) -> Result<Vec<f64>> {
        if period >= self.n_periods() {
            return Err(Error::PeriodOutOfGrid(format!(
                "{} (index {period}, grid has {} periods)",
                period_date(self.anchor, period),
                self.n_periods()
            )));
        }
        Ok(self.values.row(period).iter().cloned().collect())
    }

    /// Seasonal sinusoid trends for simulation: constant, then alternating
    /// sine/cosine harmonics of a 26-period (yearly) cycle, orthonormalized.
    pub fn seasonal(anchor: NaiveDate, n_periods: usize, m: usize) -> Result<Self> {
        if m == 0 || n_periods < 2 * m {
            return invalid("seasonal basis needs m >= 1 and at least 2m periods");
        }
        let mut cols = Vec::with_capacity(m - 1);
        for k in 0..m - 1 {
            let harmonic = (k / 2 + 1) as f64;
            let v = DVector::from_fn(n_periods, |t, _| {
                let w = 2.0 * std::f64::consts::PI * harmonic * t as f64 / 26.0;
                if k % 2 == 0 {
                    w.sin()
                } else {
                    w.cos()
                }
            });
            cols.push(v);
        }
        Ok(Self {
            anchor,
            values: orthonormal_with_constant(cols, n_periods)?,
            completion_trace: Vec::new(),
        })
    }
}

/// Default smoothing degrees of freedom: eight per year of data span.
pub fn default_smooth_df(n_periods: usize) -> f64 {
    let years = n_periods as f64 * PERIOD_DAYS as f64 / 365.25;
    (8.0 * years).max(2.0)
}

/// Stack `[1 | centred, Gram-Schmidt columns]`, scaled to unit mean square.
fn orthonormal_with_constant(cols: Vec<DVector<f64>>, t: usize) -> Result<DMatrix<f64>> {
    let tf = t as f64;
    let mut out = DMatrix::from_element(t, cols.len() + 1, 1.0);
    let mut done: Vec<DVector<f64>> = Vec::new();
    for (k, mut v) in cols.into_iter().enumerate() {
        let mean = v.mean();
        v.add_scalar_mut(-mean);
        for q in &done {
            let proj = q.dot(&v) / tf;
            v.axpy(-proj, q, 1.0);
        }
        let norm = (v.dot(&v) / tf).sqrt();
        if !(norm > 1e-12) {
            return Err(Error::Degenerate(format!(
                "trend {} is constant after smoothing",
                k + 2
            )));
        }
        v /= norm;
        out.set_column(k + 1, &v);
        done.push(v);
    }
    Ok(out)
}

/// Cubic smoothing spline on equally spaced points, parameterized by its
/// effective degrees of freedom.
pub struct SmoothingSpline {
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
    lambda: f64,
}

impl SmoothingSpline {
    pub fn new(n: usize, df: f64) -> Result<Self> {
        if n < 3 {
            return invalid("smoothing spline needs at least 3 points");
        }
        if !(df >= 2.0) {
            return invalid(format!("smoothing df must be >= 2, got {df}"));
        }
        // Reinsch penalty K = Q R^{-1} Q^T for unit spacing.
        let q = DMatrix::from_fn(n, n - 2, |i, j| {
            if i == j || i == j + 2 {
                1.0
            } else if i == j + 1 {
                -2.0
            } else {
                0.0
            }
        });
        let r = DMatrix::from_fn(n - 2, n - 2, |i, j| {
            if i == j {
                2.0 / 3.0
            } else if i.abs_diff(j) == 1 {
                1.0 / 6.0
            } else {
                0.0
            }
        });
        let rinv_qt = r
            .cholesky()
            .ok_or_else(|| Error::Degenerate("spline band matrix".into()))?
            .solve(&q.transpose());
        let k = &q * rinv_qt;
        let k = (&k + k.transpose()) * 0.5;
        let eig = k.symmetric_eigen();
        let eigvals = eig.eigenvalues.map(|v: f64| v.max(0.0));
        let trace = |lam: f64| eigvals.iter().map(|&e| 1.0 / (1.0 + lam * e)).sum::<f64>();
        let lambda = if df >= n as f64 {
            0.0
        } else {
            let (mut lo, mut hi) = (-20.0f64, 30.0f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if trace(10f64.powf(mid)) > df {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            10f64.powf(0.5 * (lo + hi))
        };
        Ok(Self {
            eigvals,
            eigvecs: eig.eigenvectors,
            lambda,
        })
    }

    pub fn df(&self) -> f64 {
        self.eigvals
            .iter()
            .map(|&e| 1.0 / (1.0 + self.lambda * e))
            .sum()
    }

    pub fn smooth(&self, y: &DVector<f64>) -> DVector<f64> {
        let coef = self.eigvecs.transpose() * y;
        let shrunk = DVector::from_fn(coef.len(), |i, _| {
            coef[i] / (1.0 + self.lambda * self.eigvals[i])
        });
        &self.eigvecs * shrunk
    }
}

/// Estimate `m` smooth trends from incomplete monitoring data.
///
/// Only sites with at least `2m` observed periods enter the completion. The
/// sign of each non-constant trend is fixed so that its inner product with
/// the residual series (series minus its mean) of the first such site, in id
/// order, is non-negative.
pub fn estimate_temporal_basis(
    obs: &ObservationSet,
    m: usize,
    smooth_df: f64,
) -> Result<TemporalBasis> {
    if m == 0 {
        return invalid("at least one trend is required");
    }
    if obs.is_empty() {
        return Err(Error::Empty("observation set".into()));
    }
    let t = obs.n_periods();
    if m == 1 {
        return TemporalBasis::from_values(obs.anchor, DMatrix::from_element(t, 1, 1.0));
    }
    if !(smooth_df >= 2.0) {
        return invalid(format!("smoothing df must be >= 2, got {smooth_df}"));
    }

    let mut per_site: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for r in obs.records() {
        per_site
            .entry(r.site_id.as_str())
            .or_default()
            .push((r.period, r.value));
    }
    let qualifying: Vec<(&str, Vec<(usize, f64)>)> = per_site
        .into_iter()
        .filter(|(_, s)| s.len() >= 2 * m)
        .collect();
    if qualifying.len() < m {
        return Err(Error::Coverage(format!(
            "{} sites have at least {} observations; {m} needed",
            qualifying.len(),
            2 * m
        )));
    }
    let q = qualifying.len();
    let mut data = DMatrix::<f64>::zeros(t, q);
    let mut mask = DMatrix::<bool>::from_element(t, q, false);
    for (s, (_, series)) in qualifying.iter().enumerate() {
        for &(p, v) in series {
            data[(p, s)] = v;
            mask[(p, s)] = true;
        }
    }
    for p in 0..t {
        if !(0..q).any(|s| mask[(p, s)]) {
            return Err(Error::Coverage(format!(
                "period {p} has no observations from sites with enough data"
            )));
        }
    }

    // Initial fill: site mean plus period anomaly.
    let n_obs = mask.iter().filter(|&&b| b).count() as f64;
    let grand = data.iter().zip(mask.iter()).filter(|(_, &b)| b).map(|(v, _)| v).sum::<f64>() / n_obs;
    let site_mean: Vec<f64> = (0..q)
        .map(|s| {
            let (sum, cnt) = (0..t)
                .filter(|&p| mask[(p, s)])
                .fold((0.0, 0.0), |(a, c), p| (a + data[(p, s)], c + 1.0));
            sum / cnt
        })
        .collect();
    let period_mean: Vec<f64> = (0..t)
        .map(|p| {
            let (sum, cnt) = (0..q)
                .filter(|&s| mask[(p, s)])
                .fold((0.0, 0.0), |(a, c), s| (a + data[(p, s)], c + 1.0));
            sum / cnt
        })
        .collect();
    let mut z = data.clone();
    for p in 0..t {
        for s in 0..q {
            if !mask[(p, s)] {
                z[(p, s)] = site_mean[s] + period_mean[p] - grand;
            }
        }
    }

    let rank = m - 1;
    let any_missing = mask.iter().any(|&b| !b);
    let mut trace = Vec::new();
    if any_missing {
        loop {
            let (centred, means) = centre_columns(&z);
            let approx = truncated(&centred, rank);
            let mut next = z.clone();
            for p in 0..t {
                for s in 0..q {
                    if !mask[(p, s)] {
                        next[(p, s)] = approx[(p, s)] + means[s];
                    }
                }
            }
            let change = (&next - &z).norm() / next.norm().max(f64::MIN_POSITIVE);
            trace.push(change);
            z = next;
            if change < COMPLETION_TOL {
                break;
            }
            if trace.len() >= COMPLETION_MAX_ITER {
                return Err(Error::CompletionDiverged {
                    iterations: trace.len(),
                    last_change: change,
                    trace,
                });
            }
        }
    }

    let (centred, _) = centre_columns(&z);
    let svd = centred.svd(true, false);
    let u = svd.u.as_ref().expect("requested U");
    let order = descending(&svd.singular_values);
    let spline = SmoothingSpline::new(t, smooth_df).ok();
    let cols: Vec<DVector<f64>> = order[..rank]
        .iter()
        .map(|&k| {
            let v = u.column(k).into_owned();
            match &spline {
                Some(sp) if smooth_df < t as f64 => sp.smooth(&v),
                _ => v,
            }
        })
        .collect();
    let mut values = orthonormal_with_constant(cols, t)?;

    let (_, ref_series) = &qualifying[0];
    let ref_mean = ref_series.iter().map(|x| x.1).sum::<f64>() / ref_series.len() as f64;
    for j in 1..m {
        let ip: f64 = ref_series
            .iter()
            .map(|&(p, v)| values[(p, j)] * (v - ref_mean))
            .sum();
        if ip < 0.0 {
            values.column_mut(j).neg_mut();
        }
    }
    Ok(TemporalBasis {
        anchor: obs.anchor,
        values,
        completion_trace: trace,
    })
}

fn centre_columns(z: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let means: Vec<f64> = (0..z.ncols()).map(|s| z.column(s).mean()).collect();
    let mut c = z.clone();
    for (s, mean) in means.iter().enumerate() {
        c.column_mut(s).add_scalar_mut(-mean);
    }
    (c, means)
}

fn descending(v: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    order
}

fn truncated(a: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for &k in descending(&svd.singular_values).iter().take(rank) {
        out.ger(svd.singular_values[k], &u.column(k), &vt.row(k).transpose(), 1.0);
    }
    out
}

/// One row of `F`: the observation's site index and period.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FRow {
    pub site: usize,
    pub period: usize,
}

/// Sparse `N x (m n)` map from stacked per-site coefficients to observations.
/// Row `(s, t)` holds `f_i(t)` at column `i n + s`; rows are ordered by
/// period with the site index varying fastest.
#[derive(Debug, Clone)]
pub struct SparseF {
    pub n_sites: usize,
    pub rows: Vec<FRow>,
    /// `N x m` trend values of each row.
    pub values: DMatrix<f64>,
}

impl SparseF {
    pub fn m(&self) -> usize {
        self.values.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.m() * self.n_sites
    }

    pub fn nnz(&self) -> usize {
        self.rows.len() * self.m()
    }

    /// `(row, col, value)` entries.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for (r, row) in self.rows.iter().enumerate() {
            for i in 0..self.m() {
                out.push((r, i * self.n_sites + row.site, self.values[(r, i)]));
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows(), self.ncols());
        for (r, c, v) in self.triplets() {
            d[(r, c)] = v;
        }
        d
    }

    /// `F * coef` for an `(m n) x c` block.
    pub fn mul(&self, coef: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n_sites;
        let mut out = DMatrix::zeros(self.nrows(), coef.ncols());
        for (r, row) in self.rows.iter().enumerate() {
            for i in 0..self.m() {
                let f = self.values[(r, i)];
                for c in 0..coef.ncols() {
                    out[(r, c)] += f * coef[(i * n + row.site, c)];
                }
            }
        }
        out
    }

    /// `Fᵀ * w` for an `N x c` block.
    pub fn tr_mul(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n_sites;
        let mut out = DMatrix::zeros(self.ncols(), w.ncols());
        for (r, row) in self.rows.iter().enumerate() {
            for i in 0..self.m() {
                let f = self.values[(r, i)];
                for c in 0..w.ncols() {
                    out[(i * n + row.site, c)] += f * w[(r, c)];
                }
            }
        }
        out
    }
}

/// Build `F` for the observations of the given sites (in the given order).
pub fn build_f(obs: &ObservationSet, basis: &TemporalBasis, site_ids: &[String]) -> Result<SparseF> {
    let index: BTreeMap<&str, usize> = site_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut rows = Vec::with_capacity(obs.len());
    for r in obs.records() {
        let site = *index
            .get(r.site_id.as_str())
            .ok_or_else(|| Error::UnknownSite(r.site_id.clone()))?;
        if r.period >= basis.n_periods() {
            return Err(Error::PeriodOutOfGrid(format!(
                "{} (index {})",
                obs.period_date(r.period),
                r.period
            )));
        }
        rows.push(FRow {
            site,
            period: r.period,
        });
    }
    rows.sort_by(|a, b| a.period.cmp(&b.period).then(a.site.cmp(&b.site)));
    let m = basis.m();
    let values = DMatrix::from_fn(rows.len(), m, |r, i| basis.value(rows[r].period, i));
    Ok(SparseF {
        n_sites: site_ids.len(),
        rows,
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteTrendFit {
    pub coefficients: Vec<f64>,
    /// `(period, fitted value)` on the site's observed periods.
    pub fitted: Vec<(usize, f64)>,
}

/// Least-squares fit of one site's series on the trend columns.
pub fn site_trend_fit(series: &[(usize, f64)], basis: &TemporalBasis) -> Result<SiteTrendFit> {
    let m = basis.m();
    if series.len() < m {
        return invalid(format!(
            "site has {} observations, {m} trends need at least as many",
            series.len()
        ));
    }
    let mut x = DMatrix::zeros(series.len(), m);
    for (r, &(p, _)) in series.iter().enumerate() {
        let row = basis.row(p)?;
        for j in 0..m {
            x[(r, j)] = row[j];
        }
    }
    let dep = dependent_columns(&x, 1e-10);
    if !dep.is_empty() {
        return Err(Error::RankDeficient { columns: dep });
    }
    let y = DVector::from_iterator(series.len(), series.iter().map(|s| s.1));
    let coef = ols(&x, &y)?;
    let fit = &x * &coef;
    Ok(SiteTrendFit {
        coefficients: coef.iter().cloned().collect(),
        fitted: series.iter().zip(fit.iter()).map(|(s, &f)| (s.0, f)).collect(),
    })
}
