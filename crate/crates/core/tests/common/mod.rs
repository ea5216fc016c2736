//! Random instances and dense reference computations shared by the
//! integration tests. Everything here is built straight from the model
//! definition, element by element, without the block machinery.

#![allow(dead_code)]

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stkrige::basis::{BasisKind, KnotPlacement, RangeMode, SpatialBasis, SpatialBasisSpec};
use stkrige::covariance::{BetaParams, CovParams, ExpCovParams};
use stkrige::fit::{prepare, ModelSpec};
use stkrige::geometry::{Coord, Site, SiteKind, SiteTable};
use stkrige::likelihood::ModelLayout;
use stkrige::temporal::{Observation, ObservationSet, TemporalBasis};

pub const LN_2PI: f64 = 1.8378770664093453;

pub fn anchor() -> NaiveDate {
    NaiveDate::from_ymd_opt(2005, 1, 3).unwrap()
}

pub struct Instance {
    pub sites: SiteTable,
    pub obs: ObservationSet,
    pub trends: TemporalBasis,
    pub spec: ModelSpec,
    pub params: CovParams,
}

pub fn random_sites(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> SiteTable {
    let sites = (0..n)
        .map(|i| Site {
            id: format!("s{i:03}"),
            coord: Coord::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent)),
            kind: SiteKind::Fixed,
            covariates: vec![rng.random_range(-1.0..1.0)],
        })
        .collect();
    SiteTable::new(vec!["cov".into()], sites).unwrap()
}

pub fn random_trends(rng: &mut ChaCha8Rng, t: usize, m: usize) -> TemporalBasis {
    let phase: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..6.0)).collect();
    let values = DMatrix::from_fn(t, m, |p, j| {
        if j == 0 {
            1.0
        } else {
            (std::f64::consts::TAU * (p as f64 + phase[j]) / (t as f64 / j as f64).max(2.0)).sin() + 0.3 * j as f64
        }
    });
    TemporalBasis::from_values(anchor(), values).unwrap()
}

/// Each site-period observed with probability `p`, every site at least once.
pub fn random_obs(rng: &mut ChaCha8Rng, sites: &SiteTable, t: usize, p: f64) -> ObservationSet {
    let mut recs = Vec::new();
    for s in &sites.sites {
        let mut any = false;
        for period in 0..t {
            if rng.random_bool(p) {
                any = true;
                recs.push(Observation {
                    site_id: s.id.clone(),
                    period,
                    value: 3.0 + rng.random_range(-1.0..1.0),
                });
            }
        }
        if !any {
            recs.push(Observation {
                site_id: s.id.clone(),
                period: rng.random_range(0..t),
                value: 3.0 + rng.random_range(-1.0..1.0),
            });
        }
    }
    ObservationSet::new(anchor(), recs).unwrap()
}

pub fn random_params(rng: &mut ChaCha8Rng, m: usize, field: bool, uses_range: bool, nugget: bool) -> CovParams {
    CovParams {
        theta_b: if field {
            (0..m)
                .map(|_| BetaParams {
                    range: uses_range.then(|| rng.random_range(2.0..15.0)),
                    partial_sill: rng.random_range(0.2..2.0),
                })
                .collect()
        } else {
            Vec::new()
        },
        theta_p: nugget.then(|| (0..m).map(|_| rng.random_range(0.05..0.5)).collect()),
        theta_v: ExpCovParams {
            range: rng.random_range(1.0..10.0),
            partial_sill: rng.random_range(0.1..1.0),
            nugget: rng.random_range(0.05..0.5),
        },
    }
}

pub fn basis_spec(kind: BasisKind, k: usize) -> SpatialBasisSpec {
    match kind {
        BasisKind::None => SpatialBasisSpec::none(),
        BasisKind::Tprs => SpatialBasisSpec::tprs(k),
        BasisKind::Lrk => SpatialBasisSpec::lrk(k, KnotPlacement::MonitorSites, RangeMode::Estimated),
        BasisKind::Full => SpatialBasisSpec::full(RangeMode::Estimated),
    }
}

/// A random instance whose design has full column rank.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    n: usize,
    t: usize,
    m: usize,
    kind: BasisKind,
    k: usize,
    nugget: bool,
) -> Instance {
    for _ in 0..50 {
        let sites = random_sites(rng, n, 20.0);
        let obs = random_obs(rng, &sites, t, 0.6);
        let trends = random_trends(rng, t, m);
        let mut spec = ModelSpec::new(m, basis_spec(kind, k));
        spec.include_beta_nugget = nugget;
        spec.seed = rng.random();
        if prepare(&spec, &sites, &obs, &trends).is_err() {
            continue;
        }
        let params = random_params(rng, m, kind != BasisKind::None, spec.basis.uses_range(), nugget);
        return Instance {
            sites,
            obs,
            trends,
            spec,
            params,
        };
    }
    panic!("no valid random instance");
}

pub fn exp_corr(d: f64, range: f64) -> f64 {
    (-d / range).exp()
}

fn corr_between(a: &[Coord], b: &[Coord], range: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| exp_corr(a[i].dist(&b[j]), range))
}

/// Unit-sill β-field covariance between two point sets. LRK and the
/// full-rank field are computed from the kernel directly; TPRS uses the
/// basis rows.
pub fn beta_kernel(basis: &SpatialBasis, range: Option<f64>, a: &[Coord], b: &[Coord]) -> DMatrix<f64> {
    match basis {
        SpatialBasis::None => DMatrix::zeros(a.len(), b.len()),
        SpatialBasis::Full { .. } => corr_between(a, b, range.unwrap()),
        SpatialBasis::Lrk { knots } => {
            let r = range.unwrap();
            let ca = corr_between(a, &knots.knots, r);
            let cb = corr_between(b, &knots.knots, r);
            let omega = corr_between(&knots.knots, &knots.knots, r);
            let sol = omega.lu().solve(&cb.transpose()).unwrap();
            ca * sol
        }
        SpatialBasis::Tprs(t) => t.penalized_at(a) * t.penalized_at(b).transpose(),
    }
}

/// One observation or target: site identity, location and period.
#[derive(Clone, Debug)]
pub struct Point {
    pub id: String,
    pub coord: Coord,
    pub period: usize,
    pub trend: Vec<f64>,
}

/// Dense covariance between two lists of site-periods.
pub fn dense_cross(basis: &SpatialBasis, params: &CovParams, a: &[Point], b: &[Point]) -> DMatrix<f64> {
    let ca: Vec<Coord> = a.iter().map(|p| p.coord).collect();
    let cb: Vec<Coord> = b.iter().map(|p| p.coord).collect();
    let m = a.first().or(b.first()).map(|p| p.trend.len()).unwrap_or(0);
    let kernels: Vec<DMatrix<f64>> = (0..params.theta_b.len())
        .map(|j| beta_kernel(basis, params.theta_b[j].range, &ca, &cb))
        .collect();
    let v = params.theta_v;
    DMatrix::from_fn(a.len(), b.len(), |i, k| {
        let (p, q) = (&a[i], &b[k]);
        let same = p.id == q.id;
        let mut c = 0.0;
        for j in 0..m {
            let ff = p.trend[j] * q.trend[j];
            if !kernels.is_empty() {
                c += ff * params.theta_b[j].partial_sill * kernels[j][(i, k)];
            }
            if let (Some(tp), true) = (&params.theta_p, same) {
                c += ff * tp[j];
            }
        }
        if p.period == q.period {
            c += v.partial_sill * exp_corr(p.coord.dist(&q.coord), v.range);
            if same {
                c += v.nugget;
            }
        }
        c
    })
}

/// Observation points in the layout's row order.
pub fn layout_points(layout: &ModelLayout, ids: &[String]) -> Vec<Point> {
    layout
        .f
        .rows
        .iter()
        .enumerate()
        .map(|(r, row)| Point {
            id: ids[row.site].clone(),
            coord: layout.coords[row.site],
            period: row.period,
            trend: layout.f.values.row(r).iter().cloned().collect(),
        })
        .collect()
}

pub struct DenseFit {
    pub loglik: f64,
    pub alpha: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Profile log-likelihood and GLS `α̂` from an explicit `Σ̃`.
pub fn dense_profile(sigma: DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> DenseFit {
    let n = y.len() as f64;
    let chol = sigma.clone().cholesky().expect("Σ̃ positive definite");
    let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let si_x = chol.solve(x);
    let si_y = chol.solve(y);
    let alpha = (x.transpose() * &si_x).lu().solve(&(x.transpose() * &si_y)).unwrap();
    let r = y - x * &alpha;
    let quad = r.dot(&chol.solve(&r));
    DenseFit {
        loglik: -0.5 * (logdet + quad + n * LN_2PI),
        alpha,
        sigma,
    }
}

/// Thin plate smoother from the bordered system
/// `[[E + λI, T], [Tᵀ, 0]] [ζ; γ] = [y; 0]`, returning `E ζ + T γ`.
pub fn bordered_tps(coords: &[Coord], y: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let n = coords.len();
    let eta = |r: f64| if r > 0.0 { r * r * r.ln() / (8.0 * std::f64::consts::PI) } else { 0.0 };
    let mut a = DMatrix::zeros(n + 3, n + 3);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = eta(coords[i].dist(&coords[j]));
        }
        a[(i, i)] += lambda;
        let t = [1.0, coords[i].x, coords[i].y];
        for c in 0..3 {
            a[(i, n + c)] = t[c];
            a[(n + c, i)] = t[c];
        }
    }
    let mut rhs = DVector::zeros(n + 3);
    rhs.rows_mut(0, n).copy_from(y);
    let sol = a.lu().solve(&rhs).expect("bordered system solvable");
    let mut fitted = DVector::zeros(n);
    for i in 0..n {
        let mut v = sol[n] + sol[n + 1] * coords[i].x + sol[n + 2] * coords[i].y;
        for j in 0..n {
            v += eta(coords[i].dist(&coords[j])) * sol[j];
        }
        fitted[i] = v;
    }
    fitted
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Library profile log-likelihood and `α̂` next to the dense reference for
/// one instance: `(library, reference, max |α̂ difference|)`.
pub fn likelihood_pair(inst: &Instance) -> (f64, f64, f64) {
    use stkrige::likelihood::{profile_loglik_with, unit_loadings};
    let prep = prepare(&inst.spec, &inst.sites, &inst.obs, &inst.trends).unwrap();
    let ids: Vec<String> = prep.training_sites.sites.iter().map(|s| s.id.clone()).collect();
    let loadings = unit_loadings(&prep.basis, &prep.layout, &inst.params.theta_b).unwrap();
    let lib = profile_loglik_with(&inst.params, &prep.layout, &loadings).unwrap();
    let pts = layout_points(&prep.layout, &ids);
    let sigma = dense_cross(&prep.basis, &inst.params, &pts, &pts);
    let reference = dense_profile(sigma, &prep.layout.fx, &prep.layout.y);
    let da = (&lib.alpha_hat - &reference.alpha).abs().max();
    (lib.value, reference.loglik, da)
}

/// Fixed-effect row `[f_j(t) (1, covariates, extras)]_j` of one site-period.
pub fn design_row(basis: &SpatialBasis, site: &Site, trend: &[f64]) -> Vec<f64> {
    let mut own = vec![1.0];
    own.extend_from_slice(&site.covariates);
    if let SpatialBasis::Tprs(t) = basis {
        let c = t.standardization.apply(&site.coord);
        own.extend_from_slice(&[c.x, c.y]);
    }
    trend.iter().flat_map(|f| own.iter().map(move |v| f * v)).collect()
}

pub struct PredictionPair {
    pub lib_mean: Vec<f64>,
    pub lib_var: Vec<f64>,
    pub ref_mean: Vec<f64>,
    pub ref_var: Vec<f64>,
}

/// Conditional mean and variance at `cells` from the library and from the
/// dense joint Gaussian, both at the instance parameters.
pub fn prediction_pair(inst: &Instance, targets: &[Site], cells: &[(usize, usize)]) -> PredictionPair {
    use stkrige::fit::model_at;
    use stkrige::predict::{predict, PredictionRequest};
    let model = model_at(&inst.spec, &inst.sites, &inst.obs, &inst.trends, &inst.params).unwrap();
    let req = PredictionRequest {
        sites: targets.to_vec(),
        cells: cells.to_vec(),
        want_variance: true,
        want_lta: false,
    };
    let res = predict(&model, &inst.obs, &req).unwrap();

    let layout = model.layout(&inst.obs).unwrap();
    let ids: Vec<String> = model.training_sites.sites.iter().map(|s| s.id.clone()).collect();
    let pts = layout_points(&layout, &ids);
    let x = DMatrix::from_fn(pts.len(), layout.fx.ncols(), |r, c| {
        let site = &model.training_sites.sites[layout.f.rows[r].site];
        design_row(&model.basis, site, &pts[r].trend)[c]
    });
    let sigma = dense_cross(&model.basis, &inst.params, &pts, &pts);
    let reference = dense_profile(sigma.clone(), &x, &layout.y);
    let tpts: Vec<Point> = cells
        .iter()
        .map(|&(u, t)| Point {
            id: targets[u].id.clone(),
            coord: targets[u].coord,
            period: t,
            trend: inst.trends.row(t).unwrap(),
        })
        .collect();
    let cross = dense_cross(&model.basis, &inst.params, &pts, &tpts);
    let own = dense_cross(&model.basis, &inst.params, &tpts, &tpts);
    let chol = sigma.cholesky().unwrap();
    let resid = &layout.y - &x * &reference.alpha;
    let w = chol.solve(&resid);
    let sc = chol.solve(&cross);
    let mut ref_mean = Vec::new();
    let mut ref_var = Vec::new();
    for (k, &(u, _)) in cells.iter().enumerate() {
        let xr = DVector::from_vec(design_row(&model.basis, &targets[u], &tpts[k].trend));
        ref_mean.push(xr.dot(&reference.alpha) + cross.column(k).dot(&w));
        ref_var.push(own[(k, k)] - cross.column(k).dot(&sc.column(k)));
    }
    PredictionPair {
        lib_mean: res.cells.iter().map(|c| c.mean).collect(),
        lib_var: res.cells.iter().map(|c| c.variance.unwrap()).collect(),
        ref_mean,
        ref_var,
    }
}

/// Targets for a prediction check: a few training sites and a few new ones,
/// each at a random period.
pub fn random_targets(rng: &mut ChaCha8Rng, inst: &Instance, n_new: usize) -> (Vec<Site>, Vec<(usize, usize)>) {
    let t = inst.trends.n_periods();
    let mut targets: Vec<Site> = inst.sites.sites.iter().take(3).cloned().collect();
    for i in 0..n_new {
        targets.push(Site {
            id: format!("new{i}"),
            coord: Coord::new(rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)),
            kind: SiteKind::Home,
            covariates: vec![rng.random_range(-1.0..1.0)],
        });
    }
    let cells = (0..targets.len())
        .flat_map(|u| [(u, rng.random_range(0..t)), (u, rng.random_range(0..t))])
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    (targets, cells)
}

/// Maximized log-likelihoods of LRK with knots at every site and of the
/// full-rank field, both at the same fixed range.
pub fn full_rank_pair(seed: u64) -> (f64, f64) {
    use stkrige::fit::fit_with_trends;
    let mut r = rng(seed);
    let n = 8 + (seed as usize % 5);
    let m = 1 + (seed as usize % 2);
    let inst = random_instance(&mut r, n, 6, m, BasisKind::None, 0, false);
    let range = r.random_range(3.0..10.0);
    let mut lrk = inst.spec.clone();
    lrk.basis = SpatialBasisSpec::lrk(n, KnotPlacement::MonitorSites, RangeMode::Fixed(range));
    let mut full = inst.spec.clone();
    full.basis = SpatialBasisSpec::full(RangeMode::Fixed(range));
    for s in [&mut lrk, &mut full] {
        s.include_beta_nugget = seed % 3 == 0;
        s.multistart = 2;
    }
    let a = fit_with_trends(&lrk, &inst.sites, &inst.obs, &inst.trends).unwrap();
    let b = fit_with_trends(&full, &inst.sites, &inst.obs, &inst.trends).unwrap();
    (a.loglik, b.loglik)
}

/// A simulated archetype dataset with spatial β-fields.
pub fn simulated(
    n_fixed: usize,
    n_snapshot: usize,
    n_home: usize,
    t: usize,
    m: usize,
    beta_sill: f64,
    seed: u64,
) -> (stkrige::simulate::SimOutput, TemporalBasis) {
    use stkrige::covariance::BetaParams;
    use stkrige::simulate::{make_archetype_layout_in, simulate, SimTruth};
    let layout = make_archetype_layout_in(n_fixed, n_snapshot, n_home, t, seed, 30.0).unwrap();
    let trends = TemporalBasis::seasonal(layout.anchor, t, m).unwrap();
    let truth = SimTruth {
        params: CovParams {
            theta_b: (0..m)
                .map(|j| BetaParams {
                    range: None,
                    partial_sill: beta_sill / (j + 1) as f64,
                })
                .collect(),
            theta_p: Some(vec![0.01; m]),
            theta_v: ExpCovParams {
                range: 5.0,
                partial_sill: 0.03,
                nugget: 0.01,
            },
        },
        alpha: (0..m).map(|j| vec![if j == 0 { 3.0 } else { 0.4 }, 0.1, -0.1]).collect(),
    };
    let out = simulate(&layout, &SpatialBasisSpec::tprs(10), &trends, &truth, seed, 0).unwrap();
    (out, trends)
}

/// Fingerprints and estimates of the folds that hold out `fold`'s sites
/// before and after shifting those sites' observations.
pub fn leakage_check(seed: u64) -> (bool, bool, bool) {
    use stkrige::evaluation::{cross_validate, make_folds, CvOptions};
    let (data, _) = simulated(6, 12, 0, 10, 2, 0.5, seed);
    let plan = make_folds(&data.sites, SiteKind::Snapshot, 3, seed).unwrap();
    let mut spec = ModelSpec::new(2, SpatialBasisSpec::tprs(5));
    spec.seed = seed;
    let opts = CvOptions {
        refit_trends: true,
        parallel: false,
        ..CvOptions::default()
    };
    let held: std::collections::HashSet<String> = plan.fold_sites(1).iter().map(|s| s.to_string()).collect();
    let shifted: Vec<Observation> = data
        .obs
        .records()
        .iter()
        .map(|r| Observation {
            value: if held.contains(&r.site_id) { r.value + 5.0 } else { r.value },
            ..r.clone()
        })
        .collect();
    let obs2 = ObservationSet::new(data.obs.anchor, shifted).unwrap();
    let a = cross_validate(&spec, &data.sites, &data.obs, &plan, &opts).unwrap();
    let b = cross_validate(&spec, &data.sites, &obs2, &plan, &opts).unwrap();
    let same_fp = a.folds[0].train_fingerprint == b.folds[0].train_fingerprint;
    let same_est = a.folds[0].params == b.folds[0].params && a.folds[0].loglik == b.folds[0].loglik;
    // The perturbation must be visible to the other folds.
    let others_moved = a.folds[1].train_fingerprint != b.folds[1].train_fingerprint;
    (same_fp, same_est, others_moved)
}

/// Truth used by the parameter recovery experiment.
pub fn recovery_truth() -> CovParams {
    use stkrige::covariance::BetaParams;
    CovParams {
        theta_b: vec![
            BetaParams { range: None, partial_sill: 0.3 },
            BetaParams { range: None, partial_sill: 0.2 },
        ],
        theta_p: Some(vec![0.2, 0.1]),
        theta_v: ExpCovParams {
            range: 6.0,
            partial_sill: 0.1,
            nugget: 0.05,
        },
    }
}

pub struct Recovery {
    pub truth: CovParams,
    pub alpha_truth: Vec<f64>,
    pub model: stkrige::fit::FittedModel,
    pub data: stkrige::simulate::SimOutput,
    pub trends: TemporalBasis,
    pub spec: ModelSpec,
}

/// Simulate a complete 40-site, 30-period panel with a rank-10 TPRS truth
/// and refit it with the true trends.
pub fn recovery_run(seed: u64) -> Recovery {
    use stkrige::fit::fit_with_trends;
    use stkrige::simulate::{make_archetype_layout_in, simulate, SimTruth};
    let layout = make_archetype_layout_in(40, 0, 0, 30, seed, 40.0).unwrap();
    let trends = TemporalBasis::seasonal(layout.anchor, 30, 2).unwrap();
    let truth = SimTruth {
        params: recovery_truth(),
        alpha: vec![vec![3.0, 0.2, -0.1], vec![0.5, 0.1, 0.0]],
    };
    let basis = SpatialBasisSpec::tprs(10);
    let data = simulate(&layout, &basis, &trends, &truth, seed, 0).unwrap();
    let mut spec = ModelSpec::new(2, basis);
    spec.seed = seed;
    let model = fit_with_trends(&spec, &data.sites, &data.obs, &trends).unwrap();
    // The TPRS model appends x and y to each trend's design; their true
    // coefficients are zero.
    let alpha_truth = truth
        .alpha
        .iter()
        .flat_map(|a| a.iter().cloned().chain([0.0, 0.0]))
        .collect();
    Recovery {
        truth: truth.params,
        alpha_truth,
        model,
        data,
        trends,
        spec,
    }
}
