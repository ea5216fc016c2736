//! Cross-validation by monitor class, and the scoring metrics.
//!
//! R² is `max(0, 1 − RMSE²/Var)` with the population variance of the
//! observed values. The detrended variant replaces the denominator by the
//! variance of observations minus a per-period reference predictor (the
//! spatial mean of fixed-site measurements in that period).

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisKind;
use crate::covariance::CovParams;
use crate::error::{invalid, Error, Result};
use crate::fingerprint::data_fingerprint;
use crate::fit::{fit_with_trends, ModelSpec};
use crate::geometry::{Coord, SiteKind, SiteTable};
use crate::predict::{long_term_average, predict, PredictionRequest};
use crate::temporal::{default_smooth_df, estimate_temporal_basis, ObservationSet, TemporalBasis};

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_CLUSTER_KM: f64 = 1.0;

pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    if pred.len() != obs.len() {
        return invalid(format!("{} predictions for {} observations", pred.len(), obs.len()));
    }
    if obs.is_empty() {
        return Err(Error::Empty("no values to score".into()));
    }
    let ss: f64 = pred.iter().zip(obs).map(|(p, o)| (p - o).powi(2)).sum();
    Ok((ss / obs.len() as f64).sqrt())
}

fn population_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

fn clamped_r2(rmse: f64, var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::Degenerate("observed values have zero variance".into()));
    }
    Ok((1.0 - rmse * rmse / var).max(0.0))
}

/// Clamped R² of paired predictions and observations.
pub fn r2(pred: &[f64], obs: &[f64]) -> Result<f64> {
    let e = rmse(pred, obs)?;
    if obs.len() < 2 {
        return invalid("R² needs at least two values");
    }
    clamped_r2(e, population_variance(obs))
}

/// R² on per-site long-term averages (paired by position).
pub fn r2_lta(pred_lta: &[f64], obs_lta: &[f64]) -> Result<f64> {
    r2(pred_lta, obs_lta)
}

/// R² whose denominator is the variance of `obs − reference`.
pub fn detrended_r2(pred: &[f64], obs: &[f64], reference: &[f64]) -> Result<f64> {
    if reference.len() != obs.len() {
        return invalid("reference length differs from observations");
    }
    if obs.len() < 2 {
        return invalid("R² needs at least two values");
    }
    let e = rmse(pred, obs)?;
    let resid: Vec<f64> = obs.iter().zip(reference).map(|(o, r)| o - r).collect();
    clamped_r2(e, population_variance(&resid))
}

/// Per-period mean of the fixed-site observations, on the log or native scale.
pub fn fixed_site_reference(sites: &SiteTable, obs: &ObservationSet, native: bool) -> BTreeMap<usize, f64> {
    let fixed: HashSet<String> = sites.ids_of_kind(SiteKind::Fixed).into_iter().collect();
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in obs.records().iter().filter(|r| fixed.contains(&r.site_id)) {
        let v = if native { r.value.exp() } else { r.value };
        let e = acc.entry(r.period).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVPlan {
    pub class: SiteKind,
    pub k: usize,
    pub seed: u64,
    /// Site id to fold number in `1..=k`.
    pub folds: BTreeMap<String, usize>,
    /// Set when folds keep whole spatial clusters together.
    #[serde(default)]
    pub cluster_km: Option<f64>,
}

impl CVPlan {
    pub fn fold_sites(&self, fold: usize) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn sites(&self) -> Vec<&str> {
        self.folds.keys().map(|s| s.as_str()).collect()
    }
}

fn class_sites(sites: &SiteTable, class: SiteKind, k: usize) -> Result<Vec<String>> {
    if k < 2 {
        return invalid("at least two folds are required");
    }
    let mut ids = sites.ids_of_kind(class);
    if ids.len() < k {
        return invalid(format!(
            "{} {} sites cannot fill {k} folds",
            ids.len(),
            class.as_str()
        ));
    }
    ids.sort();
    Ok(ids)
}

/// Random balanced partition of the class's sites into `k` folds.
pub fn make_folds(sites: &SiteTable, class: SiteKind, k: usize, seed: u64) -> Result<CVPlan> {
    let mut ids = class_sites(sites, class, k)?;
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds = ids.into_iter().enumerate().map(|(i, s)| (s, i % k + 1)).collect();
    Ok(CVPlan {
        class,
        k,
        seed,
        folds,
        cluster_km: None,
    })
}

/// Folds that never split a cluster, where clusters are the connected
/// components of sites within `cluster_km` of each other. Clusters are
/// shuffled and each goes to the currently smallest fold.
pub fn make_cluster_folds(
    sites: &SiteTable,
    class: SiteKind,
    k: usize,
    seed: u64,
    cluster_km: f64,
) -> Result<CVPlan> {
    if !(cluster_km >= 0.0) {
        return invalid("cluster distance must be non-negative");
    }
    let ids = class_sites(sites, class, k)?;
    let coords: Vec<Coord> = ids.iter().map(|i| sites.get(i).expect("class site").coord).collect();
    let n = ids.len();
    let mut label: Vec<usize> = (0..n).collect();
    fn root(label: &mut [usize], mut i: usize) -> usize {
        while label[i] != i {
            label[i] = label[label[i]];
            i = label[i];
        }
        i
    }
    for a in 0..n {
        for b in a + 1..n {
            if coords[a].dist(&coords[b]) <= cluster_km {
                let (ra, rb) = (root(&mut label, a), root(&mut label, b));
                if ra != rb {
                    label[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = root(&mut label, i);
        clusters.entry(r).or_default().push(i);
    }
    if clusters.len() < k {
        return invalid(format!("{} clusters cannot fill {k} folds", clusters.len()));
    }
    let mut groups: Vec<Vec<usize>> = clusters.into_values().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut sizes = vec![0usize; k];
    let mut folds = BTreeMap::new();
    for g in groups {
        let f = (0..k).min_by_key(|&f| (sizes[f], f)).expect("k >= 2");
        sizes[f] += g.len();
        for i in g {
            folds.insert(ids[i].clone(), f + 1);
        }
    }
    Ok(CVPlan {
        class,
        k,
        seed,
        folds,
        cluster_km: Some(cluster_km),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    /// Re-estimate the temporal trends inside each fold from training data only.
    pub refit_trends: bool,
    /// Score 2-week values on the exponentiated scale.
    pub native_two_week: bool,
    /// Skip fitting and use the held-out observations as predictions.
    pub perfect_predictor: bool,
    /// Run folds concurrently.
    pub parallel: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            refit_trends: false,
            native_two_week: true,
            perfect_predictor: false,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleMetrics {
    pub n: usize,
    pub rmse: f64,
    pub r2: f64,
}

impl ScaleMetrics {
    fn compute(pred: &[f64], obs: &[f64]) -> Option<Self> {
        let rmse = rmse(pred, obs).ok()?;
        let r2 = r2(pred, obs).ok()?;
        Some(Self {
            n: obs.len(),
            rmse,
            r2,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonMetrics {
    pub period: usize,
    pub date: String,
    pub metrics: ScaleMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FoldStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub held_out: Vec<String>,
    pub n_train_obs: usize,
    pub n_test_obs: usize,
    /// Fingerprint of the exact sites and observations the fold was fitted on.
    pub train_fingerprint: String,
    pub status: FoldStatus,
    pub loglik: Option<f64>,
    pub iterations: Option<usize>,
    pub params: Option<CovParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPrediction {
    pub site_id: String,
    pub period: usize,
    pub observed: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub class: SiteKind,
    /// Row label of the model, e.g. `tprs` or `lrk fixed:max/2`.
    pub model: String,
    /// Column label: the rank, or `full`.
    pub rank: String,
    pub k: usize,
    pub seed: u64,
    pub options: CvOptions,
    pub two_week: Option<ScaleMetrics>,
    pub lta: Option<ScaleMetrics>,
    pub seasons: Vec<SeasonMetrics>,
    pub detrended_r2: Option<f64>,
    pub failed_folds: usize,
    /// True when metrics exclude failed folds.
    pub incomplete: bool,
    pub folds: Vec<FoldDiagnostics>,
    pub predictions: Vec<CvPrediction>,
}

struct FoldOutcome {
    diag: FoldDiagnostics,
    preds: Vec<CvPrediction>,
}

fn run_fold(
    spec: &ModelSpec,
    sites: &SiteTable,
    obs: &ObservationSet,
    plan: &CVPlan,
    fold: usize,
    trends: Option<&TemporalBasis>,
    opts: &CvOptions,
) -> FoldOutcome {
    let held: Vec<&str> = plan.fold_sites(fold);
    let held_set: HashSet<&str> = held.iter().copied().collect();
    let train_obs = obs.without_sites(&held_set);
    let test_obs = obs.only_sites(&held_set);
    let keep: HashSet<&str> = sites
        .sites
        .iter()
        .map(|s| s.id.as_str())
        .filter(|s| !held_set.contains(s))
        .collect();
    let train_sites = sites.subset(&keep);
    let fingerprint = data_fingerprint(&train_sites, &train_obs);
    let mut diag = FoldDiagnostics {
        fold,
        held_out: held.iter().map(|s| s.to_string()).collect(),
        n_train_obs: train_obs.len(),
        n_test_obs: test_obs.len(),
        train_fingerprint: fingerprint,
        status: FoldStatus::Ok,
        loglik: None,
        iterations: None,
        params: None,
    };
    let observed = |r: &crate::temporal::Observation| CvPrediction {
        site_id: r.site_id.clone(),
        period: r.period,
        observed: r.value,
        predicted: r.value,
    };
    if opts.perfect_predictor {
        let preds = test_obs.records().iter().map(observed).collect();
        return FoldOutcome { diag, preds };
    }
    let result = (|| -> Result<Vec<CvPrediction>> {
        if train_obs.records().iter().any(|r| held_set.contains(r.site_id.as_str())) {
            return invalid("held-out observations leaked into the training set");
        }
        let own;
        let trends = match trends {
            Some(t) => t,
            None => {
                let df = spec.smooth_df.unwrap_or_else(|| default_smooth_df(train_obs.n_periods()));
                own = estimate_temporal_basis(&train_obs, spec.m, df)?;
                &own
            }
        };
        let model = fit_with_trends(spec, &train_sites, &train_obs, trends)?;
        diag.loglik = Some(model.loglik);
        diag.iterations = Some(model.iterations);
        diag.params = Some(model.params.clone());
        let mut req = PredictionRequest::for_observations(sites, &test_obs)?;
        req.want_variance = false;
        req.want_lta = false;
        let res = predict(&model, &train_obs, &req)?;
        Ok(test_obs
            .records()
            .iter()
            .zip(res.cells)
            .map(|(r, c)| CvPrediction {
                predicted: c.mean,
                ..observed(r)
            })
            .collect())
    })();
    match result {
        Ok(preds) => FoldOutcome { diag, preds },
        Err(e) => {
            log::warn!("fold {fold} failed: {e}");
            diag.status = FoldStatus::Failed(e.to_string());
            FoldOutcome {
                diag,
                preds: Vec::new(),
            }
        }
    }
}

/// Held-out predictions for every fold of `plan`, scored on the 2-week
/// scale, the long-term-average scale, per period for snapshot sites, and
/// detrended for home sites.
pub fn cross_validate(
    spec: &ModelSpec,
    sites: &SiteTable,
    obs: &ObservationSet,
    plan: &CVPlan,
    opts: &CvOptions,
) -> Result<CVReport> {
    spec.validate()?;
    for id in plan.folds.keys() {
        if sites.get(id).is_none() {
            return Err(Error::UnknownSite(id.clone()));
        }
    }
    let trends = if opts.refit_trends || opts.perfect_predictor {
        None
    } else {
        let df = spec.smooth_df.unwrap_or_else(|| default_smooth_df(obs.n_periods()));
        Some(estimate_temporal_basis(obs, spec.m, df)?)
    };
    let folds: Vec<usize> = (1..=plan.k).collect();
    let go = |&f: &usize| run_fold(spec, sites, obs, plan, f, trends.as_ref(), opts);
    let outcomes: Vec<FoldOutcome> = if opts.parallel {
        folds.par_iter().map(go).collect()
    } else {
        folds.iter().map(go).collect()
    };

    let mut preds: Vec<CvPrediction> = Vec::new();
    let mut diags = Vec::new();
    for o in outcomes {
        preds.extend(o.preds);
        diags.push(o.diag);
    }
    preds.sort_by(|a, b| (a.period, &a.site_id).cmp(&(b.period, &b.site_id)));
    let failed = diags.iter().filter(|d| d.status != FoldStatus::Ok).count();
    if failed == plan.k {
        return Err(Error::Degenerate("every cross-validation fold failed".into()));
    }

    let tw = |v: f64| if opts.native_two_week { v.exp() } else { v };
    let p2: Vec<f64> = preds.iter().map(|p| tw(p.predicted)).collect();
    let o2: Vec<f64> = preds.iter().map(|p| tw(p.observed)).collect();
    let two_week = ScaleMetrics::compute(&p2, &o2);

    let mut by_site: BTreeMap<&str, (Vec<(usize, f64)>, Vec<(usize, f64)>)> = BTreeMap::new();
    for p in &preds {
        let e = by_site.entry(&p.site_id).or_default();
        e.0.push((p.period, p.predicted));
        e.1.push((p.period, p.observed));
    }
    let mut pl = Vec::new();
    let mut ol = Vec::new();
    for (pred, ob) in by_site.values() {
        let periods: BTreeSet<usize> = ob.iter().map(|x| x.0).collect();
        pl.push(long_term_average(pred, &periods)?);
        ol.push(long_term_average(ob, &periods)?);
    }
    let lta = ScaleMetrics::compute(&pl, &ol);

    let mut seasons = Vec::new();
    if plan.class == SiteKind::Snapshot {
        let mut by_period: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for p in &preds {
            let e = by_period.entry(p.period).or_default();
            e.0.push(tw(p.predicted));
            e.1.push(tw(p.observed));
        }
        for (t, (pp, oo)) in by_period {
            if let Some(metrics) = ScaleMetrics::compute(&pp, &oo) {
                seasons.push(SeasonMetrics {
                    period: t,
                    date: obs.period_date(t).to_string(),
                    metrics,
                });
            }
        }
    }

    let detrended = if plan.class == SiteKind::Home && !preds.is_empty() {
        let reference = fixed_site_reference(sites, obs, opts.native_two_week);
        let mut rv = Vec::with_capacity(preds.len());
        for p in &preds {
            match reference.get(&p.period) {
                Some(&v) => rv.push(v),
                None => {
                    return Err(Error::Coverage(format!(
                        "no fixed-site observations in period {} for the detrended reference",
                        p.period
                    )))
                }
            }
        }
        detrended_r2(&p2, &o2, &rv).ok()
    } else {
        None
    };

    let rank = match spec.basis.kind {
        BasisKind::Full => "full".to_string(),
        _ => spec.basis.rank.to_string(),
    };
    Ok(CVReport {
        class: plan.class,
        model: spec.basis.label(),
        rank,
        k: plan.k,
        seed: plan.seed,
        options: *opts,
        two_week,
        lta,
        seasons,
        detrended_r2: detrended,
        failed_folds: failed,
        incomplete: failed > 0,
        folds: diags,
        predictions: preds,
    })
}

fn rank_key(r: &str) -> (u8, usize) {
    match r.parse::<usize>() {
        Ok(v) => (1, usize::MAX - v),
        Err(_) => (0, 0),
    }
}

/// Delimited summary with one row per model and metric and one column per
/// rank, ranks descending (`full` first). Rank-0 results fill the `0`
/// column of every model row.
pub fn cv_table(reports: &[CVReport]) -> String {
    let mut ranks: Vec<String> = reports.iter().map(|r| r.rank.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    ranks.sort_by_key(|r| rank_key(r));
    let mut models: Vec<String> = Vec::new();
    for r in reports {
        if r.rank != "0" && !models.contains(&r.model) {
            models.push(r.model.clone());
        }
    }
    if models.is_empty() {
        models.extend(reports.iter().map(|r| r.model.clone()).collect::<BTreeSet<_>>());
    }
    type Metric = fn(&CVReport) -> Option<f64>;
    let metrics: [(&str, Metric); 4] = [
        ("lta_rmse", |r| r.lta.as_ref().map(|m| m.rmse)),
        ("lta_r2", |r| r.lta.as_ref().map(|m| m.r2)),
        ("two_week_rmse", |r| r.two_week.as_ref().map(|m| m.rmse)),
        ("two_week_r2", |r| r.two_week.as_ref().map(|m| m.r2)),
    ];
    let mut out = String::from("model,metric");
    for k in &ranks {
        out.push(',');
        out.push_str(k);
    }
    out.push('\n');
    for model in &models {
        for (name, get) in metrics {
            out.push_str(&format!("{model},{name}"));
            for k in &ranks {
                let cell = reports
                    .iter()
                    .find(|r| &r.rank == k && (&r.model == model || k == "0"))
                    .and_then(get);
                out.push(',');
                if let Some(v) = cell {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            out.push('\n');
        }
    }
    out
}
