//! Run configuration: one JSON document, overridable from the command line.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use stkrige::basis::{BasisKind, KnotPlacement, RangeMode, SpatialBasisSpec};
use stkrige::bench::BenchConfig;
use stkrige::covariance::{BetaParams, CovParams, ExpCovParams};
use stkrige::fit::ModelSpec;
use stkrige::geometry::SiteKind;
use stkrige::optimize::OptimizerOptions;
use stkrige::simulate::{SimTruth, DEFAULT_DOMAIN_KM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sites: Option<PathBuf>,
    pub obs: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Fitted model file read by `predict`.
    pub model_file: Option<PathBuf>,
    /// `site_id,period_start_date` cells to predict.
    pub targets: Option<PathBuf>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub dump_basis: bool,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub log_level: String,
    pub model: ModelConfig,
    pub cv: CvConfig,
    pub simulate: SimulateConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sites: None,
            obs: None,
            out: None,
            model_file: None,
            targets: None,
            seed: 1,
            threads: None,
            dump_basis: false,
            log_level: "warn".into(),
            model: ModelConfig::default(),
            cv: CvConfig::default(),
            simulate: SimulateConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub m: usize,
    pub basis: BasisKind,
    pub rank: usize,
    /// `est`, `fixed:<km>`, `fixed:max`, `fixed:max/2`, `fixed:max/4` or `fixed:max/8`.
    pub range_mode: String,
    pub beta_nugget: bool,
    /// `sites` or `grid`.
    pub knots: String,
    pub knot_grid_km: f64,
    pub covariates: Option<Vec<Vec<String>>>,
    pub multistart: usize,
    pub smooth_df: Option<f64>,
    pub optimizer: OptimizerOptions,
    /// Evaluate the model at these covariance parameters instead of estimating them.
    pub params: Option<CovParams>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m: 2,
            basis: BasisKind::Tprs,
            rank: 10,
            range_mode: "est".into(),
            beta_nugget: true,
            knots: "sites".into(),
            knot_grid_km: 2.5,
            covariates: None,
            multistart: 1,
            smooth_df: None,
            optimizer: OptimizerOptions::default(),
            params: None,
        }
    }
}

impl ModelConfig {
    /// Model specification at the given rank (`None` keeps the configured rank).
    pub fn spec(&self, rank: Option<usize>, seed: u64) -> Result<ModelSpec> {
        let rank = rank.unwrap_or(self.rank);
        let range: RangeMode = self.range_mode.parse()?;
        let knots = match self.knots.as_str() {
            "sites" => KnotPlacement::MonitorSites,
            "grid" => KnotPlacement::Grid {
                cell_km: self.knot_grid_km,
            },
            other => bail!("unknown knot placement `{other}` (expected sites or grid)"),
        };
        let basis = match self.basis {
            _ if rank == 0 && self.basis != BasisKind::Full => SpatialBasisSpec::none(),
            BasisKind::None => SpatialBasisSpec::none(),
            BasisKind::Tprs => SpatialBasisSpec::tprs(rank),
            BasisKind::Lrk => SpatialBasisSpec::lrk(rank, knots, range),
            BasisKind::Full => SpatialBasisSpec::full(range),
        };
        let mut spec = ModelSpec::new(self.m, basis);
        spec.include_beta_nugget = self.beta_nugget;
        spec.covariates = self.covariates.clone();
        spec.multistart = self.multistart;
        spec.smooth_df = self.smooth_df;
        spec.optimizer = self.optimizer;
        spec.seed = seed;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub class: SiteKind,
    pub folds: usize,
    /// Ranks to cross-validate; empty uses the model rank.
    pub ranks: Vec<usize>,
    pub refit_trends: bool,
    pub cluster_folds: bool,
    pub cluster_km: f64,
    pub native_two_week: bool,
    pub perfect_predictor: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            class: SiteKind::Fixed,
            folds: stkrige::evaluation::DEFAULT_FOLDS,
            ranks: Vec::new(),
            refit_trends: false,
            cluster_folds: false,
            cluster_km: stkrige::evaluation::DEFAULT_CLUSTER_KM,
            native_two_week: true,
            perfect_predictor: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_fixed: usize,
    pub n_snapshot: usize,
    pub n_home: usize,
    pub n_periods: usize,
    pub domain_km: f64,
    pub replicate: u64,
    /// Basis used to draw the β-fields (`tprs`, `lrk`, `full` or `none`).
    pub basis: BasisKind,
    pub rank: usize,
    /// Trends are the seasonal family with this many columns.
    pub m: usize,
    pub truth: Option<SimTruth>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_fixed: 10,
            n_snapshot: 30,
            n_home: 60,
            n_periods: 52,
            domain_km: DEFAULT_DOMAIN_KM,
            replicate: 0,
            basis: BasisKind::Tprs,
            rank: 10,
            m: 2,
            truth: None,
        }
    }
}

impl SimulateConfig {
    pub fn basis_spec(&self) -> SpatialBasisSpec {
        match self.basis {
            BasisKind::None => SpatialBasisSpec::none(),
            BasisKind::Tprs => SpatialBasisSpec::tprs(self.rank),
            BasisKind::Lrk => SpatialBasisSpec::lrk(self.rank, KnotPlacement::MonitorSites, RangeMode::Estimated),
            BasisKind::Full => SpatialBasisSpec::full(RangeMode::Estimated),
        }
    }

    /// The configured truth, or a default with moderate spatial structure.
    pub fn truth(&self) -> SimTruth {
        if let Some(t) = &self.truth {
            return t.clone();
        }
        let m = self.m;
        let field = self.basis != BasisKind::None;
        let range = matches!(self.basis, BasisKind::Lrk | BasisKind::Full).then_some(self.domain_km / 4.0);
        SimTruth {
            params: CovParams {
                theta_b: if field {
                    (0..m)
                        .map(|j| BetaParams {
                            range,
                            partial_sill: 0.5 / (j + 1) as f64,
                        })
                        .collect()
                } else {
                    Vec::new()
                },
                theta_p: Some(vec![0.02; m]),
                theta_v: ExpCovParams {
                    range: self.domain_km / 10.0,
                    partial_sill: 0.05,
                    nugget: 0.02,
                },
            },
            alpha: (0..m)
                .map(|j| vec![if j == 0 { 3.0 } else { 0.4 }, 0.1, -0.1])
                .collect(),
        }
    }
}

/// Set `path` (dot separated) in a JSON tree to `raw`, parsed as JSON when
/// possible and as a string otherwise.
pub fn set_dotted(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("`{}` is not a section", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    bail!("empty option name")
}

pub fn load(path: Option<&Path>) -> Result<Value> {
    match path {
        None => Ok(serde_json::to_value(RunConfig::default())?),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let mut base = serde_json::to_value(RunConfig::default())?;
            let user: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            merge(&mut base, user);
            Ok(base)
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

pub fn finish(value: Value) -> Result<RunConfig> {
    serde_json::from_value(value).context("invalid configuration")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides() {
        let mut v = load(None).unwrap();
        set_dotted(&mut v, "model.rank", "25").unwrap();
        set_dotted(&mut v, "cv.class", "home").unwrap();
        set_dotted(&mut v, "model.range_mode", "fixed:max/2").unwrap();
        let c = finish(v).unwrap();
        assert_eq!(c.model.rank, 25);
        assert_eq!(c.cv.class, SiteKind::Home);
        assert_eq!(c.model.range_mode, "fixed:max/2");
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = load(None).unwrap();
        set_dotted(&mut v, "model.rnak", "3").unwrap();
        assert!(finish(v).is_err());
    }

    #[test]
    fn rank_zero_means_no_basis() {
        let c = ModelConfig::default();
        let s = c.spec(Some(0), 1).unwrap();
        assert_eq!(s.basis.kind, BasisKind::None);
        let s = c.spec(None, 1).unwrap();
        assert_eq!(s.basis.rank, 10);
    }
}
