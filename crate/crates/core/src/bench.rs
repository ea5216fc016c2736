//! Timing of single profile-likelihood evaluations as the number of sites grows.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::basis::{BasisKind, KnotPlacement, RangeMode, SpatialBasisSpec};
use crate::covariance::{BetaParams, CovParams, ExpCovParams};
use crate::error::{invalid, Error, Result};
use crate::fit::{initialize_params, prepare, ModelSpec, Objective};
use crate::simulate::{make_archetype_layout, simulate, SimLayout, SimTruth};
use crate::temporal::TemporalBasis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    /// Basis kinds paired with their rank (`Full` ignores the rank).
    pub models: Vec<(BasisKind, usize)>,
    pub nugget: Vec<bool>,
    pub reps: usize,
    pub n_periods: usize,
    pub m: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![50, 100, 200, 400],
            models: vec![(BasisKind::Lrk, 25), (BasisKind::Full, 0)],
            nugget: vec![false, true],
            reps: 7,
            n_periods: 26,
            m: 3,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub basis: BasisKind,
    pub rank: usize,
    pub nugget: bool,
    pub n: usize,
    pub n_obs: usize,
    pub reps: usize,
    pub median_seconds: Option<f64>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub basis: BasisKind,
    pub rank: usize,
    pub nugget: bool,
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub cells: Vec<BenchCell>,
    pub slopes: Vec<SlopeFit>,
}

impl BenchReport {
    pub fn slope(&self, basis: BasisKind, nugget: bool) -> Option<f64> {
        self.slopes
            .iter()
            .find(|s| s.basis == basis && s.nugget == nugget)
            .map(|s| s.slope)
    }

    pub fn cells_csv(&self) -> String {
        let mut out = String::from("basis,rank,nugget,n,n_obs,reps,median_seconds,error\n");
        for c in &self.cells {
            let t = c.median_seconds.map(|v| format!("{v:.6e}")).unwrap_or_default();
            let e = c.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            out.push_str(&format!("{},{},{},{},{},{},{t},{e}\n", c.basis, c.rank, c.nugget, c.n, c.n_obs, c.reps));
        }
        out
    }

    pub fn slopes_csv(&self) -> String {
        let mut out = String::from("basis,rank,nugget,slope,intercept\n");
        for s in &self.slopes {
            out.push_str(&format!("{},{},{},{:.4},{:.4}\n", s.basis, s.rank, s.nugget, s.slope, s.intercept));
        }
        out
    }
}

/// Least-squares line through `(ln x, ln y)`: `(slope, intercept)`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return invalid("log-log fit needs at least two paired points");
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return invalid("log-log fit needs positive values");
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return invalid("log-log fit needs distinct x values");
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Archetype mix used for timing: 10% fixed, 30% snapshot, 60% home sites.
pub fn bench_layout(n: usize, n_periods: usize, seed: u64) -> Result<SimLayout> {
    let n_fixed = (n / 10).max(1);
    let n_snapshot = (3 * n) / 10;
    let n_home = n.saturating_sub(n_fixed + n_snapshot);
    make_archetype_layout(n_fixed, n_snapshot, n_home, n_periods, seed)
}

fn truth(m: usize) -> SimTruth {
    SimTruth {
        params: CovParams {
            theta_b: (0..m)
                .map(|j| BetaParams {
                    range: Some(10.0),
                    partial_sill: 0.2 / (j + 1) as f64,
                })
                .collect(),
            theta_p: Some(vec![0.02; m]),
            theta_v: ExpCovParams {
                range: 5.0,
                partial_sill: 0.05,
                nugget: 0.02,
            },
        },
        alpha: (0..m).map(|j| vec![if j == 0 { 3.0 } else { 0.3 }, 0.1, -0.1]).collect(),
    }
}

fn model_spec(basis: BasisKind, rank: usize, nugget: bool, m: usize, seed: u64) -> ModelSpec {
    let range = RangeMode::FixedFraction(0.25);
    let b = match basis {
        BasisKind::Lrk => SpatialBasisSpec::lrk(rank, KnotPlacement::MonitorSites, range),
        BasisKind::Tprs => SpatialBasisSpec::tprs(rank),
        BasisKind::Full => SpatialBasisSpec::full(range),
        BasisKind::None => SpatialBasisSpec::none(),
    };
    let mut spec = ModelSpec::new(m, b);
    spec.include_beta_nugget = nugget;
    spec.seed = seed;
    spec
}

fn time_cell(cfg: &BenchConfig, basis: BasisKind, rank: usize, nugget: bool, n: usize) -> Result<(usize, f64)> {
    let layout = bench_layout(n, cfg.n_periods, cfg.seed)?;
    let trends = TemporalBasis::seasonal(layout.anchor, cfg.n_periods, cfg.m)?;
    let sim_spec = SpatialBasisSpec::tprs(10.min(n - 1).max(4));
    let data = simulate(&layout, &sim_spec, &trends, &truth(cfg.m), cfg.seed, 0)?;
    let spec = model_spec(basis, rank, nugget, cfg.m, cfg.seed);
    let prep = prepare(&spec, &data.sites, &data.obs, &trends)?;
    let objective = Objective::new(&prep)?;
    let params = initialize_params(&prep.map, &prep.layout)?;
    objective.eval_params(&params)?;
    let mut times = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let t0 = Instant::now();
        let r = objective.eval_params(&params)?;
        times.push(t0.elapsed().as_secs_f64());
        if !r.value.is_finite() {
            return Err(Error::NonFinite {
                params: format!("{params:?}"),
            });
        }
    }
    Ok((prep.layout.n_obs(), median(&mut times)))
}

/// Time every `(model, nugget, n)` cell on one worker thread. A failing cell
/// is recorded and the run continues.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps < 1 || cfg.sizes.is_empty() || cfg.models.is_empty() || cfg.nugget.is_empty() {
        return invalid("bench needs sizes, models, nugget settings and at least one repetition");
    }
    if cfg.sizes.iter().any(|&n| n < 10) {
        return invalid("bench sizes must be at least 10 sites");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let mut cells = Vec::new();
    let mut slopes = Vec::new();
    for &(basis, rank) in &cfg.models {
        for &nugget in &cfg.nugget {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for &n in &cfg.sizes {
                let res = pool.install(|| time_cell(cfg, basis, rank, nugget, n));
                let (n_obs, t, err) = match res {
                    Ok((n_obs, t)) => {
                        xs.push(n as f64);
                        ys.push(t);
                        (n_obs, Some(t), None)
                    }
                    Err(e) => {
                        log::warn!("bench cell {basis} rank {rank} nugget {nugget} n {n} failed: {e}");
                        (0, None, Some(e.to_string()))
                    }
                };
                log::info!("bench {basis} rank {rank} nugget {nugget} n {n}: {t:?}");
                cells.push(BenchCell {
                    basis,
                    rank,
                    nugget,
                    n,
                    n_obs,
                    reps: cfg.reps,
                    median_seconds: t,
                    error: err,
                });
            }
            if let Ok((slope, intercept)) = loglog_slope(&xs, &ys) {
                slopes.push(SlopeFit {
                    basis,
                    rank,
                    nugget,
                    slope,
                    intercept,
                });
            }
        }
    }
    Ok(BenchReport {
        config: cfg.clone(),
        cells,
        slopes,
    })
}
