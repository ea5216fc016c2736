//! Synthetic data drawn from the model, on unbalanced monitoring schedules.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{corr, CovParams};
use crate::error::{invalid, Error, Result};
use crate::fit::build_basis;
use crate::basis::{SpatialBasis, SpatialBasisSpec};
use crate::geometry::{Coord, Site, SiteKind, SiteTable};
use crate::linalg::cholesky_with_jitter;
use crate::temporal::{Observation, ObservationSet, TemporalBasis};

/// Identity of the pseudorandom stream, recorded with every simulated dataset.
pub const GENERATOR: &str = "chacha8/rand_chacha-0.9/standard-normal-ziggurat/v1";

pub const DEFAULT_DOMAIN_KM: f64 = 50.0;
pub const COVARIATE_NAMES: [&str; 2] = ["lu_a", "lu_b"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLayout {
    pub sites: SiteTable,
    /// Observed periods of each site, ascending.
    pub schedule: Vec<Vec<usize>>,
    pub n_periods: usize,
    pub anchor: NaiveDate,
    pub seed: u64,
}

impl SimLayout {
    pub fn n_obs(&self) -> usize {
        self.schedule.iter().map(|s| s.len()).sum()
    }

    pub fn coords(&self) -> Vec<Coord> {
        self.sites.coords()
    }
}

/// True parameters: `alpha[j]` holds the intercept and covariate effects of
/// trend `j` (no spatial polynomial terms).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub params: CovParams,
    pub alpha: Vec<Vec<f64>>,
}

impl SimTruth {
    pub fn validate(&self, m: usize, n_cov: usize) -> Result<()> {
        self.params.validate(m)?;
        if self.alpha.len() != m || self.alpha.iter().any(|a| a.len() != n_cov + 1) {
            return invalid(format!(
                "alpha must hold {m} vectors of length {}",
                n_cov + 1
            ));
        }
        if self.alpha.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("non-finite alpha");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetadata {
    pub generator: String,
    pub seed: u64,
    pub replicate: u64,
    pub basis: SpatialBasisSpec,
    pub truth: SimTruth,
    pub trends: TemporalBasis,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub sites: SiteTable,
    pub obs: ObservationSet,
    pub metadata: SimMetadata,
    /// Realized `β_j(s) + ψ_j(s)` at every site, `n x m`.
    pub beta: DMatrix<f64>,
}

fn anchor_default() -> NaiveDate {
    NaiveDate::from_ymd_opt(2005, 1, 3).expect("valid date")
}

/// Uniform sites over a `domain_km` square with two covariates, and the
/// fixed / snapshot / home sampling archetypes: fixed sites every period,
/// snapshot sites in three shared periods, home sites in two random periods.
pub fn make_archetype_layout(
    n_fixed: usize,
    n_snapshot: usize,
    n_home: usize,
    n_periods: usize,
    seed: u64,
) -> Result<SimLayout> {
    make_archetype_layout_in(n_fixed, n_snapshot, n_home, n_periods, seed, DEFAULT_DOMAIN_KM)
}

pub fn make_archetype_layout_in(
    n_fixed: usize,
    n_snapshot: usize,
    n_home: usize,
    n_periods: usize,
    seed: u64,
    domain_km: f64,
) -> Result<SimLayout> {
    if n_fixed + n_snapshot + n_home == 0 {
        return Err(Error::Empty("all archetype counts are zero".into()));
    }
    if n_periods < 4 {
        return invalid(format!("need at least 4 periods, got {n_periods}"));
    }
    if !(domain_km > 0.0) {
        return invalid("domain size must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sites = Vec::new();
    let mut schedule = Vec::new();
    let mut periods: Vec<usize> = (0..n_periods).collect();
    periods.shuffle(&mut rng);
    let mut snapshot_periods = periods[..3].to_vec();
    snapshot_periods.sort_unstable();

    let mut add = |prefix: &str, count: usize, kind: SiteKind, rng: &mut ChaCha8Rng, schedule: &mut Vec<Vec<usize>>| {
        for i in 0..count {
            let c = Coord::new(rng.random_range(0.0..domain_km), rng.random_range(0.0..domain_km));
            let a: f64 = rng.sample(StandardNormal);
            let b = (c.x / (0.3 * domain_km)).sin() + (c.y / (0.4 * domain_km)).cos();
            sites.push(Site {
                id: format!("{prefix}{:04}", i + 1),
                coord: c,
                kind,
                covariates: vec![a, b],
            });
            let sched = match kind {
                SiteKind::Fixed => (0..n_periods).collect(),
                SiteKind::Snapshot => snapshot_periods.clone(),
                SiteKind::Home => {
                    let mut p: Vec<usize> = (0..n_periods).collect();
                    p.shuffle(rng);
                    let mut two = p[..2].to_vec();
                    two.sort_unstable();
                    two
                }
            };
            schedule.push(sched);
        }
    };
    add("F", n_fixed, SiteKind::Fixed, &mut rng, &mut schedule);
    add("S", n_snapshot, SiteKind::Snapshot, &mut rng, &mut schedule);
    add("H", n_home, SiteKind::Home, &mut rng, &mut schedule);
    let names = COVARIATE_NAMES.iter().map(|s| s.to_string()).collect();
    Ok(SimLayout {
        sites: SiteTable::new(names, sites)?,
        schedule,
        n_periods,
        anchor: anchor_default(),
        seed,
    })
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Draw one dataset. The stream is selected by `(seed, replicate)`, so
/// replicates are independent and individually reproducible.
pub fn simulate(
    layout: &SimLayout,
    basis_truth: &SpatialBasisSpec,
    trend_truth: &TemporalBasis,
    truth: &SimTruth,
    seed: u64,
    replicate: u64,
) -> Result<SimOutput> {
    let m = trend_truth.m();
    let n = layout.sites.len();
    truth.validate(m, layout.sites.covariate_names.len())?;
    if trend_truth.n_periods() < layout.n_periods {
        return invalid("trend grid shorter than the layout's period count");
    }
    let p = &truth.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);

    let coords = layout.coords();
    let basis = build_basis(basis_truth, &coords, seed)?;
    if basis.has_field() && p.theta_b.len() != m {
        return invalid("β-field parameters missing for a basis with a smooth");
    }
    let mut beta = DMatrix::zeros(n, m);
    for j in 0..m {
        if basis.has_field() {
            let b = p.theta_b[j];
            if b.partial_sill > 0.0 {
                let load = match &basis {
                    SpatialBasis::Full { .. } => basis.loading(&coords, b.range)?,
                    _ => basis.penalized_at(&coords, b.range)?,
                };
                let z = normals(&mut rng, load.ncols());
                beta.set_column(j, &(load * z * b.partial_sill.sqrt()));
            }
        }
        if let Some(tp) = &p.theta_p {
            let z = normals(&mut rng, n);
            let col = beta.column(j) + z * tp[j].sqrt();
            beta.set_column(j, &col);
        }
    }

    let v = p.theta_v;
    let mut by_period: Vec<Vec<usize>> = vec![Vec::new(); layout.n_periods];
    for (s, sched) in layout.schedule.iter().enumerate() {
        for &t in sched {
            if t >= layout.n_periods {
                return invalid(format!("schedule period {t} outside the layout grid"));
            }
            by_period[t].push(s);
        }
    }
    let mut records = Vec::with_capacity(layout.n_obs());
    for (t, sites_t) in by_period.iter().enumerate() {
        if sites_t.is_empty() {
            continue;
        }
        let k = sites_t.len();
        let nu = if v.partial_sill + v.nugget > 0.0 {
            let mut s = DMatrix::from_fn(k, k, |a, b| {
                v.partial_sill * corr(coords[sites_t[a]].dist(&coords[sites_t[b]]), v.range)
            });
            for a in 0..k {
                s[(a, a)] += v.nugget;
            }
            let (c, _) = cholesky_with_jitter(s, v.partial_sill, &format!("simulated Σ_ν period {t}"))?;
            c.l() * normals(&mut rng, k)
        } else {
            DVector::zeros(k)
        };
        for (a, &s) in sites_t.iter().enumerate() {
            let site = &layout.sites.sites[s];
            let mut y = nu[a];
            for j in 0..m {
                let al = &truth.alpha[j];
                let mean = al[0] + site.covariates.iter().zip(&al[1..]).map(|(x, c)| x * c).sum::<f64>();
                y += trend_truth.value(t, j) * (mean + beta[(s, j)]);
            }
            records.push(Observation {
                site_id: site.id.clone(),
                period: t,
                value: y,
            });
        }
    }
    Ok(SimOutput {
        sites: layout.sites.clone(),
        obs: ObservationSet::new(layout.anchor, records)?,
        metadata: SimMetadata {
            generator: GENERATOR.into(),
            seed,
            replicate,
            basis: basis_truth.clone(),
            truth: truth.clone(),
            trends: trend_truth.clone(),
        },
        beta,
    })
}
