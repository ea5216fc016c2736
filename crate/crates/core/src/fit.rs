//! Profile maximum-likelihood estimation and the persisted fitted model.

use std::collections::{BTreeSet, HashSet};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{tprs_basis, BasisKind, KnotPlacement, RangeMode, SpatialBasis, SpatialBasisSpec};
use crate::covariance::CovParams;
use crate::error::{invalid, Error, Result};
use crate::fingerprint::data_fingerprint;
use crate::geometry::{grid_candidates, max_distance, select_knots, Coord, KnotSource, SiteTable};
use crate::likelihood::{profile_loglik_with, unit_loadings, LogLikResult, ModelLayout, ParamMap};
use crate::linalg::ols;
use crate::optimize::{minimize, OptimizerOptions, TraceEntry};
use crate::temporal::{default_smooth_df, estimate_temporal_basis, ObservationSet, TemporalBasis};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Standard deviation of the log-scale jitter applied to extra multistarts.
const MULTISTART_JITTER: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub m: usize,
    pub basis: SpatialBasisSpec,
    pub include_beta_nugget: bool,
    /// Covariate names used in each `X_j`; `None` uses every covariate for
    /// every trend.
    #[serde(default)]
    pub covariates: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
    pub multistart: usize,
    pub seed: u64,
    /// Trend smoothing degrees of freedom; `None` uses the per-year default.
    #[serde(default)]
    pub smooth_df: Option<f64>,
}

impl ModelSpec {
    pub fn new(m: usize, basis: SpatialBasisSpec) -> Self {
        Self {
            m,
            basis,
            include_beta_nugget: true,
            covariates: None,
            optimizer: OptimizerOptions::default(),
            multistart: 1,
            seed: 0,
            smooth_df: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return invalid("at least one trend is required");
        }
        if self.multistart < 1 {
            return invalid("multistart count must be at least 1");
        }
        if let Some(c) = &self.covariates {
            if c.len() != self.m {
                return invalid(format!("covariate selection for {} trends, expected {}", c.len(), self.m));
            }
        }
        self.basis.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub schema_version: u32,
    pub spec: ModelSpec,
    pub trends: TemporalBasis,
    pub basis: SpatialBasis,
    /// Training sites in model order (sorted by id).
    pub training_sites: SiteTable,
    pub covariates_per_trend: Vec<Vec<String>>,
    pub alpha_names: Vec<String>,
    pub alpha_hat: Vec<f64>,
    pub alpha_se: Vec<f64>,
    pub params: CovParams,
    pub param_map: ParamMap,
    pub loglik: f64,
    pub initial_loglik: f64,
    pub aic: f64,
    pub n_obs: usize,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
    pub fingerprint: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FittedModel {
    /// Rebuild the training layout from the training observations.
    pub fn layout(&self, obs: &ObservationSet) -> Result<ModelLayout> {
        let ids: Vec<String> = self.training_sites.sites.iter().map(|s| s.id.clone()).collect();
        let x = design_blocks(&self.training_sites, &self.covariates_per_trend, &self.basis)?;
        ModelLayout::from_observations(obs, &self.trends, &ids, self.training_sites.coords(), x)
    }

    pub fn n_cov_params(&self) -> usize {
        self.param_map.dim()
    }
}

/// Everything fixed before optimization.
pub struct Prepared {
    pub training_sites: SiteTable,
    pub covariates_per_trend: Vec<Vec<String>>,
    pub basis: SpatialBasis,
    pub layout: ModelLayout,
    pub map: ParamMap,
    pub warnings: Vec<String>,
}

/// Sites that carry observations, sorted by id.
pub fn training_sites(sites: &SiteTable, obs: &ObservationSet) -> Result<SiteTable> {
    let observed: BTreeSet<&str> = obs.records().iter().map(|r| r.site_id.as_str()).collect();
    for id in &observed {
        if sites.get(id).is_none() {
            return Err(Error::UnknownSite(id.to_string()));
        }
    }
    let mut out = sites.subset(&observed.iter().copied().collect::<HashSet<_>>());
    out.sites.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// `X_j = [1 | selected covariates | basis fixed-effect columns]`.
pub fn design_blocks(
    sites: &SiteTable,
    covariates_per_trend: &[Vec<String>],
    basis: &SpatialBasis,
) -> Result<Vec<DMatrix<f64>>> {
    let coords = sites.coords();
    let extra = basis.unpenalized_at(&coords);
    covariates_per_trend
        .iter()
        .map(|names| {
            let idx = names
                .iter()
                .map(|nm| {
                    sites
                        .covariate_names
                        .iter()
                        .position(|c| c == nm)
                        .ok_or_else(|| Error::Invalid(format!("unknown covariate `{nm}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let p = 1 + idx.len() + extra.ncols();
            Ok(DMatrix::from_fn(sites.len(), p, |i, c| {
                if c == 0 {
                    1.0
                } else if c <= idx.len() {
                    sites.sites[i].covariates[idx[c - 1]]
                } else {
                    extra[(i, c - 1 - idx.len())]
                }
            }))
        })
        .collect()
}

pub fn alpha_names(covariates_per_trend: &[Vec<String>], basis: &SpatialBasis) -> Vec<String> {
    let mut out = Vec::new();
    for (j, names) in covariates_per_trend.iter().enumerate() {
        out.push(format!("f{}:intercept", j + 1));
        out.extend(names.iter().map(|n| format!("f{}:{n}", j + 1)));
        if basis.n_unpenalized() == 2 {
            out.push(format!("f{}:x_std", j + 1));
            out.push(format!("f{}:y_std", j + 1));
        }
    }
    out
}

/// Realize the spatial basis over the training coordinates.
pub fn build_basis(spec: &SpatialBasisSpec, coords: &[Coord], seed: u64) -> Result<SpatialBasis> {
    spec.validate()?;
    match spec.kind {
        BasisKind::None => Ok(SpatialBasis::None),
        BasisKind::Tprs => Ok(SpatialBasis::Tprs(tprs_basis(coords, spec.rank)?)),
        BasisKind::Full => Ok(SpatialBasis::Full {
            sites: coords.to_vec(),
        }),
        BasisKind::Lrk => {
            let knots = match &spec.knots {
                KnotPlacement::Given(k) => k.clone(),
                KnotPlacement::MonitorSites => select_knots(coords, spec.rank, seed, KnotSource::MonitorSites)?,
                KnotPlacement::Grid { cell_km } => {
                    let cand = grid_candidates(coords, *cell_km)?;
                    select_knots(&cand, spec.rank, seed, KnotSource::Grid)?
                }
            };
            Ok(SpatialBasis::Lrk { knots })
        }
    }
}

pub fn resolve_fixed_range(mode: RangeMode, max_dist: f64) -> Option<f64> {
    match mode {
        RangeMode::Estimated => None,
        RangeMode::Fixed(v) => Some(v),
        RangeMode::FixedFraction(f) => Some(f * max_dist),
    }
}

pub fn prepare(
    spec: &ModelSpec,
    sites: &SiteTable,
    obs: &ObservationSet,
    trends: &TemporalBasis,
) -> Result<Prepared> {
    spec.validate()?;
    if obs.is_empty() {
        return Err(Error::Empty("observation set".into()));
    }
    if trends.m() != spec.m {
        return invalid(format!("temporal basis has {} trends, spec {}", trends.m(), spec.m));
    }
    let training = training_sites(sites, obs)?;
    let coords = training.coords();
    let covs = spec
        .covariates
        .clone()
        .unwrap_or_else(|| vec![sites.covariate_names.clone(); spec.m]);
    let basis = build_basis(&spec.basis, &coords, spec.seed)?;
    let x = design_blocks(&training, &covs, &basis)?;
    let ids: Vec<String> = training.sites.iter().map(|s| s.id.clone()).collect();
    let layout = ModelLayout::from_observations(obs, trends, &ids, coords.clone(), x)?;

    let mut warnings = Vec::new();
    if let SpatialBasis::Tprs(t) = &basis {
        warnings.extend(t.warnings.iter().cloned());
    }
    let effective_rank = match spec.basis.kind {
        BasisKind::Full => training.len(),
        _ => spec.basis.rank,
    };
    if !spec.include_beta_nugget && basis.has_field() && effective_rank < 10 {
        let w = format!("model without β-nugget at rank {effective_rank} < 10 may be unstable");
        log::warn!("{w}");
        warnings.push(w);
    }
    let max_dist = max_distance(&coords);
    let ys: Vec<f64> = layout.y.iter().cloned().collect();
    let var_y = crate::linalg::pop_variance(&ys);
    let map = ParamMap::new(
        spec.m,
        basis.has_field(),
        spec.basis.uses_range(),
        resolve_fixed_range(spec.basis.range_mode, max_dist),
        spec.include_beta_nugget,
        max_dist,
        var_y,
    )?;
    Ok(Prepared {
        training_sites: training,
        covariates_per_trend: covs,
        basis,
        layout,
        map,
        warnings,
    })
}

/// Ranges at a quarter of the maximum distance; the OLS residual variance of
/// `Y` on `F X` split equally among the active variance components.
pub fn initialize_params(map: &ParamMap, layout: &ModelLayout) -> Result<CovParams> {
    let beta = ols(&layout.fx, &layout.y)?;
    let resid = &layout.y - &layout.fx * beta;
    let var = resid.norm_squared() / layout.n_obs() as f64;
    if !(var > 1e-300) {
        return Err(Error::Degenerate("zero residual variance after OLS".into()));
    }
    let n_var = map
        .slots
        .iter()
        .filter(|s| !matches!(s, crate::likelihood::ParamSlot::BetaRange(_) | crate::likelihood::ParamSlot::NuRange))
        .count();
    let range = layout.max_distance() / 4.0;
    let mut x: Vec<f64> = map
        .slots
        .iter()
        .map(|s| match s {
            crate::likelihood::ParamSlot::BetaRange(_) | crate::likelihood::ParamSlot::NuRange => range.ln(),
            _ => (var / n_var as f64).ln(),
        })
        .collect();
    map.clamp(&mut x);
    Ok(map.to_params(&x))
}

/// Objective evaluator with loadings cached when they cannot change.
pub struct Objective<'a> {
    pub prep: &'a Prepared,
    fixed_loadings: Option<Vec<DMatrix<f64>>>,
}

impl<'a> Objective<'a> {
    pub fn new(prep: &'a Prepared) -> Result<Self> {
        let range_free = prep
            .map
            .slots
            .iter()
            .any(|s| matches!(s, crate::likelihood::ParamSlot::BetaRange(_)));
        let fixed_loadings = if range_free {
            None
        } else {
            let p = prep.map.to_params(&prep.map.lower);
            Some(unit_loadings(&prep.basis, &prep.layout, &p.theta_b)?)
        };
        Ok(Self { prep, fixed_loadings })
    }

    pub fn eval_params(&self, p: &CovParams) -> Result<LogLikResult> {
        match &self.fixed_loadings {
            Some(l) => profile_loglik_with(p, &self.prep.layout, l),
            None => {
                let l = unit_loadings(&self.prep.basis, &self.prep.layout, &p.theta_b)?;
                profile_loglik_with(p, &self.prep.layout, &l)
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<LogLikResult> {
        self.eval_params(&self.prep.map.to_params(x))
    }
}

struct StartResult {
    x: Vec<f64>,
    value: f64,
    initial: f64,
    iterations: usize,
    trace: Vec<TraceEntry>,
}

/// Fit with trends estimated from `obs`.
pub fn fit(spec: &ModelSpec, sites: &SiteTable, obs: &ObservationSet) -> Result<FittedModel> {
    let df = spec.smooth_df.unwrap_or_else(|| default_smooth_df(obs.n_periods()));
    let trends = estimate_temporal_basis(obs, spec.m, df)?;
    fit_with_trends(spec, sites, obs, &trends)
}

/// Fit with a given temporal basis.
pub fn fit_with_trends(
    spec: &ModelSpec,
    sites: &SiteTable,
    obs: &ObservationSet,
    trends: &TemporalBasis,
) -> Result<FittedModel> {
    let prep = prepare(spec, sites, obs, trends)?;
    let objective = Objective::new(&prep)?;
    let init = initialize_params(&prep.map, &prep.layout)?;
    let x0 = prep.map.from_params(&init);

    let starts: Vec<Vec<f64>> = (0..spec.multistart)
        .map(|k| {
            if k == 0 {
                return x0.clone();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(k as u64));
            let noise = Normal::new(0.0, MULTISTART_JITTER).expect("valid normal");
            let mut x: Vec<f64> = x0.iter().map(|v| v + noise.sample(&mut rng)).collect();
            prep.map.clamp(&mut x);
            x
        })
        .collect();

    let run = |x: &Vec<f64>| -> Result<StartResult> {
        let f = |p: &[f64]| objective.eval(p).map(|r| -r.value);
        let res = minimize(f, x, &prep.map.lower, &prep.map.upper, &spec.optimizer)?;
        Ok(StartResult {
            x: res.x,
            value: -res.value,
            initial: -res.initial_value,
            iterations: res.iterations,
            trace: res.trace,
        })
    };
    let results: Vec<Result<StartResult>> = if starts.len() > 1 {
        starts.par_iter().map(run).collect()
    } else {
        starts.iter().map(run).collect()
    };
    let mut best: Option<StartResult> = None;
    let mut first_err = None;
    for r in results {
        match r {
            Ok(s) => {
                if best.as_ref().is_none_or(|b| s.value > b.value) {
                    best = Some(s);
                }
            }
            Err(e) => {
                log::warn!("multistart failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    let Some(best) = best else {
        return Err(first_err.expect("at least one start"));
    };

    let params = prep.map.to_params(&best.x);
    let initial_loglik = objective.eval(&x0)?.value;
    debug_assert!(best.initial.is_finite());
    assemble(spec, sites, obs, trends, &prep, &objective, params, initial_loglik, best.iterations, best.trace)
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    spec: &ModelSpec,
    sites: &SiteTable,
    obs: &ObservationSet,
    trends: &TemporalBasis,
    prep: &Prepared,
    objective: &Objective,
    params: CovParams,
    initial_loglik: f64,
    iterations: usize,
    trace: Vec<TraceEntry>,
) -> Result<FittedModel> {
    let res = objective.eval_params(&params)?;
    let p = prep.layout.n_alpha();
    let alpha_se: Vec<f64> = (0..p).map(|i| res.alpha_cov[(i, i)].max(0.0).sqrt()).collect();
    let aic = 2.0 * (prep.map.dim() + p) as f64 - 2.0 * res.value;
    let mut warnings = prep.warnings.clone();
    if !res.jittered_periods.is_empty() {
        warnings.push(format!("diagonal jitter used in periods {:?}", res.jittered_periods));
    }
    Ok(FittedModel {
        schema_version: MODEL_SCHEMA_VERSION,
        spec: spec.clone(),
        trends: trends.clone(),
        alpha_names: alpha_names(&prep.covariates_per_trend, &prep.basis),
        basis: prep.basis.clone(),
        training_sites: prep.training_sites.clone(),
        covariates_per_trend: prep.covariates_per_trend.clone(),
        alpha_hat: res.alpha_hat.iter().cloned().collect(),
        alpha_se,
        params,
        param_map: prep.map.clone(),
        loglik: res.value,
        initial_loglik,
        aic,
        n_obs: prep.layout.n_obs(),
        iterations,
        trace,
        fingerprint: data_fingerprint(sites, obs),
        warnings,
    })
}

/// The model at given covariance parameters, without optimization; `α̂` is
/// the GLS estimate at `params`.
pub fn model_at(
    spec: &ModelSpec,
    sites: &SiteTable,
    obs: &ObservationSet,
    trends: &TemporalBasis,
    params: &CovParams,
) -> Result<FittedModel> {
    let prep = prepare(spec, sites, obs, trends)?;
    params.validate(spec.m)?;
    if params.theta_p.is_some() != spec.include_beta_nugget {
        return invalid("β-nugget parameters must be present exactly when the spec includes them");
    }
    if params.theta_b.is_empty() == prep.basis.has_field() {
        return invalid("β-field parameters must be present exactly when the basis has a smooth");
    }
    if let Some(r) = prep.map.fixed_range {
        if params.theta_b.iter().any(|b| b.range != Some(r)) {
            return invalid(format!("β-field ranges must equal the fixed range {r}"));
        }
    }
    let objective = Objective::new(&prep)?;
    let ll = objective.eval_params(params)?.value;
    assemble(spec, sites, obs, trends, &prep, &objective, params.clone(), ll, 0, Vec::new())
}

/// Profile log-likelihood of a fitted model's data at arbitrary parameters.
pub fn loglik_at(prep: &Prepared, params: &CovParams) -> Result<f64> {
    Objective::new(prep)?.eval_params(params).map(|r| r.value)
}

/// Direct GLS fit `(Xᵀ Fᵀ Σ_V⁻¹ F X)⁻¹ Xᵀ Fᵀ Σ_V⁻¹ Y` for a model without
/// β-fields, built from dense per-period blocks.
pub fn gls_without_basis(layout: &ModelLayout, params: &CovParams) -> Result<DVector<f64>> {
    let v = params.theta_v;
    let p = layout.n_alpha();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    for blk in &layout.blocks {
        let k = blk.sites.len();
        let mut s = DMatrix::from_fn(k, k, |a, b| {
            v.partial_sill * (-layout.dists[(blk.sites[a], blk.sites[b])] / v.range).exp()
        });
        for a in 0..k {
            s[(a, a)] += v.nugget;
        }
        let sinv = s.try_inverse().ok_or_else(|| Error::NotPositiveDefinite {
            block: format!("period {}", blk.period),
        })?;
        let x = layout.fx.rows(blk.rows.start, k);
        let y = layout.y.rows(blk.rows.start, k);
        xtx += x.transpose() * &sinv * x;
        xty += x.transpose() * &sinv * y;
    }
    xtx.try_inverse()
        .map(|inv| inv * xty)
        .ok_or_else(|| Error::RankDeficient { columns: dependent_columns_of(layout) })
}

fn dependent_columns_of(layout: &ModelLayout) -> Vec<usize> {
    crate::linalg::dependent_columns(&layout.fx, 1e-9)
}
