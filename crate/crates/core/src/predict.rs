//! Plug-in conditional prediction and long-term averages.
//!
//! The cross-covariance between a target `(s*, t*)` and an observation
//! `(s, t)` is
//!
//! ```text
//! Σ_j f_j(t*) f_j(t) [τ²_j k_j(s*, s) + σ²_j 1{s* = s}]
//!   + 1{t* = t} [τ²_ν C(‖s* − s‖) + σ² 1{s* = s}]
//! ```
//!
//! where `k_j` is the unit-sill β-field kernel of the basis. Nugget terms
//! enter only when the target is a training site, so predicting an observed
//! site-period treats the target as the observed variable itself.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::corr;
use crate::error::{invalid, Error, Result};
use crate::fit::{design_blocks, FittedModel};
use crate::geometry::{Coord, Site, SiteTable};
use crate::likelihood::{unit_loadings, Factorization, ModelLayout};
use crate::temporal::{period_date, ObservationSet};

/// Coordinates closer than this (km) are treated as the same site.
pub const SAME_SITE_KM: f64 = 1e-9;

const CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    pub sites: Vec<Site>,
    /// `(index into sites, period)`.
    pub cells: Vec<(usize, usize)>,
    pub want_variance: bool,
    pub want_lta: bool,
}

impl PredictionRequest {
    /// Every observed `(site, period)` of `obs`, with sites looked up in `sites`.
    pub fn for_observations(sites: &SiteTable, obs: &ObservationSet) -> Result<Self> {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut out_sites = Vec::new();
        let mut cells = Vec::with_capacity(obs.len());
        for r in obs.records() {
            let i = match index.get(r.site_id.as_str()) {
                Some(&i) => i,
                None => {
                    let s = sites
                        .get(&r.site_id)
                        .ok_or_else(|| Error::UnknownSite(r.site_id.clone()))?;
                    out_sites.push(s.clone());
                    index.insert(r.site_id.as_str(), out_sites.len() - 1);
                    out_sites.len() - 1
                }
            };
            cells.push((i, r.period));
        }
        Ok(Self {
            sites: out_sites,
            cells,
            want_variance: true,
            want_lta: true,
        })
    }

    /// Every period `0..n_periods` at each site.
    pub fn all_periods(sites: Vec<Site>, n_periods: usize) -> Self {
        let cells = (0..sites.len())
            .flat_map(|i| (0..n_periods).map(move |t| (i, t)))
            .collect();
        Self {
            sites,
            cells,
            want_variance: true,
            want_lta: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedCell {
    pub site_id: String,
    pub period: usize,
    pub mean: f64,
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub cells: Vec<PredictedCell>,
    /// Native-scale long-term average of the predictions at each site over
    /// its requested periods.
    pub lta: Vec<(String, f64)>,
}

/// Mean of `exp(value)` over the entries of `series` whose period is in
/// `observed`.
pub fn long_term_average(series: &[(usize, f64)], observed: &BTreeSet<usize>) -> Result<f64> {
    if observed.is_empty() {
        return Err(Error::Empty("observed period set".into()));
    }
    let vals: Vec<f64> = series
        .iter()
        .filter(|(p, _)| observed.contains(p))
        .map(|(_, v)| v.exp())
        .collect();
    if vals.is_empty() {
        return invalid("no values at the observed periods");
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Shared pieces of a prediction: the factorized training covariance, the
/// training residual solve and the target cross-covariances.
struct Prepared<'a> {
    fac: Factorization<'a>,
    layout: &'a ModelLayout,
    /// `N x c` cross-covariance.
    cross: DMatrix<f64>,
    /// Fixed-effect rows of the targets, `c x p`.
    x_star: DMatrix<f64>,
    own_var: Vec<f64>,
}

fn prepare<'a>(model: &FittedModel, layout: &'a ModelLayout, req: &PredictionRequest) -> Result<Prepared<'a>> {
    let names = &model.training_sites.covariate_names;
    for s in &req.sites {
        if s.covariates.len() != names.len() {
            return invalid(format!(
                "target `{}` has {} covariates, model expects {}",
                s.id,
                s.covariates.len(),
                names.len()
            ));
        }
    }
    let grid = model.trends.n_periods();
    for &(i, t) in &req.cells {
        if i >= req.sites.len() {
            return invalid(format!("cell refers to target site {i} of {}", req.sites.len()));
        }
        if t >= grid {
            return Err(Error::PeriodOutOfGrid(format!(
                "{} (index {t}, grid has {grid} periods)",
                period_date(model.trends.anchor, t)
            )));
        }
    }
    let p = &model.params;
    let loadings = unit_loadings(&model.basis, layout, &p.theta_b)?;
    let fac = Factorization::new(layout, p, &loadings)?;

    let m = layout.m();
    let n = layout.n_sites();
    let targets: Vec<Coord> = req.sites.iter().map(|s| s.coord).collect();
    let train = &layout.coords;
    let train_ids: HashMap<&str, usize> = model
        .training_sites
        .sites
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let same: Vec<Option<usize>> = req
        .sites
        .iter()
        .map(|s| {
            train_ids
                .get(s.id.as_str())
                .copied()
                .filter(|&i| train[i].dist(&s.coord) <= SAME_SITE_KM)
                .or_else(|| train.iter().position(|c| c.dist(&s.coord) <= SAME_SITE_KM))
        })
        .collect();

    // Per-field kernels, scaled, target x training.
    let mut kern: Vec<DMatrix<f64>> = Vec::with_capacity(p.theta_b.len());
    let mut kdiag: Vec<Vec<f64>> = Vec::with_capacity(p.theta_b.len());
    for (j, b) in p.theta_b.iter().enumerate() {
        if j > 0 && p.theta_b[j - 1].range == b.range {
            let prev_scale = p.theta_b[j - 1].partial_sill;
            let ratio = if prev_scale > 0.0 { b.partial_sill / prev_scale } else { f64::NAN };
            if ratio.is_finite() {
                kern.push(&kern[j - 1] * ratio);
                kdiag.push(kdiag[j - 1].iter().map(|v| v * ratio).collect());
                continue;
            }
        }
        let k = model.basis.cross_kernel(&targets, train, b.range)? * b.partial_sill;
        let d = model
            .basis
            .kernel_diag(&targets, b.range)?
            .into_iter()
            .map(|v| v * b.partial_sill)
            .collect();
        kern.push(k);
        kdiag.push(d);
    }
    let v = p.theta_v;
    let nu = DMatrix::from_fn(targets.len(), n, |u, s| {
        v.partial_sill * corr(targets[u].dist(&train[s]), v.range)
    });
    let nug = |j: usize| p.theta_p.as_ref().map_or(0.0, |t| t[j]);

    let f = &layout.f;
    let tv = &model.trends;
    let c = req.cells.len();
    let mut cross = DMatrix::zeros(layout.n_obs(), c);
    let mut own_var = Vec::with_capacity(c);
    for (col, &(u, ts)) in req.cells.iter().enumerate() {
        let fstar: Vec<f64> = (0..m).map(|j| tv.value(ts, j)).collect();
        for (r, row) in f.rows.iter().enumerate() {
            let s = row.site;
            let is_same = same[u] == Some(s);
            let mut acc = 0.0;
            for j in 0..m {
                let mut cj = if kern.is_empty() { 0.0 } else { kern[j][(u, s)] };
                if is_same {
                    cj += nug(j);
                }
                acc += fstar[j] * f.values[(r, j)] * cj;
            }
            if row.period == ts {
                acc += nu[(u, s)];
                if is_same {
                    acc += v.nugget;
                }
            }
            cross[(r, col)] = acc;
        }
        let mut var = v.partial_sill + v.nugget;
        for j in 0..m {
            let kd = if kdiag.is_empty() { 0.0 } else { kdiag[j][u] };
            var += fstar[j] * fstar[j] * (kd + nug(j));
        }
        own_var.push(var);
    }

    let table = SiteTable {
        covariate_names: names.clone(),
        sites: req.sites.clone(),
    };
    let xb = design_blocks(&table, &model.covariates_per_trend, &model.basis)?;
    let pcols: usize = xb.iter().map(|x| x.ncols()).sum();
    let mut x_star = DMatrix::zeros(c, pcols);
    for (row, &(u, ts)) in req.cells.iter().enumerate() {
        let mut off = 0;
        for (j, x) in xb.iter().enumerate() {
            let fj = tv.value(ts, j);
            for k in 0..x.ncols() {
                x_star[(row, off + k)] = fj * x[(u, k)];
            }
            off += x.ncols();
        }
    }
    Ok(Prepared {
        fac,
        layout,
        cross,
        x_star,
        own_var,
    })
}

/// Conditional mean (and variance) at the requested site-periods given the
/// training observations `data`.
pub fn predict(model: &FittedModel, data: &ObservationSet, req: &PredictionRequest) -> Result<PredictionResult> {
    let layout = model.layout(data)?;
    predict_with_layout(model, &layout, req)
}

pub fn predict_with_layout(model: &FittedModel, layout: &ModelLayout, req: &PredictionRequest) -> Result<PredictionResult> {
    let prep = prepare(model, layout, req)?;
    let alpha = DVector::from_column_slice(&model.alpha_hat);
    let resid = &layout.y - &layout.fx * &alpha;
    let s = prep.fac.solve(&DMatrix::from_column_slice(resid.len(), 1, resid.as_slice()));
    let c = req.cells.len();
    let mean = &prep.x_star * &alpha + prep.cross.transpose() * s.column(0);

    let variance: Option<Vec<f64>> = if req.want_variance && c > 0 {
        let chunks: Vec<(usize, usize)> = (0..c).step_by(CHUNK).map(|a| (a, CHUNK.min(c - a))).collect();
        let parts: Vec<Vec<f64>> = chunks
            .par_iter()
            .map(|&(a, w)| {
                let cc = prep.cross.columns(a, w).into_owned();
                let sol = prep.fac.solve(&cc);
                (0..w)
                    .map(|k| (prep.own_var[a + k] - cc.column(k).dot(&sol.column(k))).max(0.0))
                    .collect()
            })
            .collect();
        Some(parts.into_iter().flatten().collect())
    } else {
        None
    };

    let cells: Vec<PredictedCell> = req
        .cells
        .iter()
        .enumerate()
        .map(|(k, &(u, t))| PredictedCell {
            site_id: req.sites[u].id.clone(),
            period: t,
            mean: mean[k],
            variance: variance.as_ref().map(|v| v[k]),
        })
        .collect();

    let mut lta = Vec::new();
    if req.want_lta {
        let mut by_site: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for (k, &(u, t)) in req.cells.iter().enumerate() {
            by_site.entry(u).or_default().push((t, mean[k]));
        }
        for (u, series) in by_site {
            let periods: BTreeSet<usize> = series.iter().map(|x| x.0).collect();
            lta.push((req.sites[u].id.clone(), long_term_average(&series, &periods)?));
        }
    }
    let _ = prep.layout;
    Ok(PredictionResult { cells, lta })
}

/// The linear map `Λ` with predicted means `Λ Y` (GLS `α̂` included), so
/// the weights depend on the covariance parameters only.
pub fn prediction_weights(model: &FittedModel, layout: &ModelLayout, req: &PredictionRequest) -> Result<DMatrix<f64>> {
    let prep = prepare(model, layout, req)?;
    let a = prep.fac.solve(&layout.fx);
    let qxx = layout.fx.transpose() * &a;
    let g = qxx
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient { columns: Vec::new() })?
        * a.transpose();
    let w = prep.fac.solve(&prep.cross);
    let wt = w.transpose();
    Ok(&prep.x_star * &g + &wt - (&wt * &layout.fx) * &g)
}

/// Conditional mean and covariance at the request cells, dense (small problems).
pub fn conditional_covariance(model: &FittedModel, layout: &ModelLayout, req: &PredictionRequest) -> Result<DMatrix<f64>> {
    // Own block: same kernel construction, evaluated target against target.
    let targets: Vec<Coord> = req.sites.iter().map(|s| s.coord).collect();
    let p = &model.params;
    let m = layout.m();
    let tv = &model.trends;
    let c = req.cells.len();
    let mut own = DMatrix::zeros(c, c);
    let mut kern = Vec::new();
    for b in &p.theta_b {
        kern.push(model.basis.cross_kernel(&targets, &targets, b.range)? * b.partial_sill);
    }
    let v = p.theta_v;
    for (a, &(u, ta)) in req.cells.iter().enumerate() {
        for (b, &(w, tb)) in req.cells.iter().enumerate() {
            let same = targets[u].dist(&targets[w]) <= SAME_SITE_KM;
            let mut acc = 0.0;
            for j in 0..m {
                let mut cj = if kern.is_empty() { 0.0 } else { kern[j][(u, w)] };
                if same {
                    cj += p.theta_p.as_ref().map_or(0.0, |t| t[j]);
                }
                acc += tv.value(ta, j) * tv.value(tb, j) * cj;
            }
            if ta == tb {
                acc += v.partial_sill * corr(targets[u].dist(&targets[w]), v.range);
                if same {
                    acc += v.nugget;
                }
            }
            own[(a, b)] = acc;
        }
    }
    let prep = prepare(model, layout, req)?;
    let sol = prep.fac.solve(&prep.cross);
    let out = own - prep.cross.transpose() * sol;
    Ok((&out + out.transpose()) * 0.5)
}
