use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};

use stkrige::basis::BasisKind;
use stkrige::bench::run_bench;
use stkrige::evaluation::{cross_validate, cv_table, make_cluster_folds, make_folds, CvOptions};
use stkrige::fit::{fit as fit_model, model_at, FittedModel};
use stkrige::geometry::{SiteKind, SiteTable};
use stkrige::io;
use stkrige::predict::{predict as predict_cells, PredictionRequest};
use stkrige::simulate::{make_archetype_layout_in, simulate as simulate_data};
use stkrige::temporal::{default_smooth_df, estimate_temporal_basis, ObservationSet, TemporalBasis};

use crate::config::RunConfig;

/// Files are written into a staging directory and moved into place only when
/// the whole command succeeds.
struct Staged {
    dir: PathBuf,
    staging: PathBuf,
    names: Vec<String>,
    committed: bool,
}

impl Staged {
    fn new(dir: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        let staging = dir.join(format!(".staging-{command}-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).with_context(|| format!("clearing {}", staging.display()))?;
        }
        fs::create_dir(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            staging,
            names: Vec::new(),
            committed: false,
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.names.push(name.to_string());
        self.staging.join(name)
    }

    fn commit(mut self) -> Result<()> {
        for n in &self.names {
            let to = self.dir.join(n);
            fs::rename(self.staging.join(n), &to).with_context(|| format!("moving output to {}", to.display()))?;
        }
        self.committed = true;
        fs::remove_dir_all(&self.staging).ok();
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.committed {
            fs::remove_dir_all(&self.staging).ok();
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("no {what} given (use --{what} or the config file)"))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    required(&cfg.out, "out")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Mean and sample standard deviation.
pub fn summarize(v: &[f64]) -> Option<Summary> {
    let n = v.len();
    if n == 0 {
        return None;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary { n, mean, sd })
}

fn data_summary(sites: &SiteTable, obs: &ObservationSet) -> String {
    let mut s = String::new();
    let by_id: BTreeMap<&str, SiteKind> = sites.sites.iter().map(|s| (s.id.as_str(), s.kind)).collect();
    let mut by_kind: BTreeMap<SiteKind, Vec<f64>> = BTreeMap::new();
    let all: Vec<f64> = obs.records().iter().map(|r| r.value).collect();
    for r in obs.records() {
        if let Some(k) = by_id.get(r.site_id.as_str()) {
            by_kind.entry(*k).or_default().push(r.value);
        }
    }
    let _ = writeln!(
        s,
        "data: {} sites, {} observations, {} periods from {}",
        obs.site_ids().len(),
        obs.len(),
        obs.n_periods(),
        obs.anchor
    );
    let line = |label: &str, v: &[f64]| match summarize(v) {
        Some(x) => format!("  {label:<9} n {:>7}  mean {:.4}  sd {:.4}\n", x.n, x.mean, x.sd),
        None => String::new(),
    };
    s.push_str("log values:\n");
    s.push_str(&line("all", &all));
    for (k, v) in &by_kind {
        s.push_str(&line(k.as_str(), v));
    }
    s
}

fn fit_report(model: &FittedModel, summary: &str) -> String {
    let mut s = String::new();
    let spec = &model.spec;
    let _ = writeln!(s, "model: {} (m = {}, beta nugget {})", spec.basis.label(), spec.m, if spec.include_beta_nugget { "on" } else { "off" });
    s.push_str(summary);
    let _ = writeln!(s, "fingerprint: {}", model.fingerprint);
    let _ = writeln!(s, "log-likelihood: {:.6}", model.loglik);
    let _ = writeln!(s, "initial log-likelihood: {:.6}", model.initial_loglik);
    let _ = writeln!(s, "AIC: {:.6}", model.aic);
    let _ = writeln!(s, "iterations: {}", model.iterations);
    if let Some(r) = model.param_map.fixed_range {
        let _ = writeln!(s, "fixed beta-field range: {r:.6}");
    }
    s.push_str("\ncovariance parameters:\n");
    let _ = writeln!(s, "{:<12} {:>14} {:>14} {:>14}", "name", "estimate", "lower", "upper");
    let x = model.param_map.from_params(&model.params);
    for (i, slot) in model.param_map.slots.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:<12} {:>14.6e} {:>14.6e} {:>14.6e}",
            slot.to_string(),
            x[i].exp(),
            model.param_map.lower[i].exp(),
            model.param_map.upper[i].exp()
        );
    }
    s.push_str("\nfixed effects:\n");
    let _ = writeln!(s, "{:<24} {:>14} {:>14}", "name", "estimate", "std.error");
    for ((n, a), se) in model.alpha_names.iter().zip(&model.alpha_hat).zip(&model.alpha_se) {
        let _ = writeln!(s, "{n:<24} {a:>14.6e} {se:>14.6e}");
    }
    if !model.warnings.is_empty() {
        s.push_str("\nwarnings:\n");
        for w in &model.warnings {
            let _ = writeln!(s, "  {w}");
        }
    }
    s
}

fn trends_for(cfg: &RunConfig, obs: &ObservationSet) -> Result<TemporalBasis> {
    let df = cfg.model.smooth_df.unwrap_or_else(|| default_smooth_df(obs.n_periods()));
    Ok(estimate_temporal_basis(obs, cfg.model.m, df)?)
}

pub fn fit(cfg: &RunConfig) -> Result<()> {
    let sites_path = required(&cfg.sites, "sites")?;
    let obs_path = required(&cfg.obs, "obs")?;
    let out = out_dir(cfg)?;
    let sites = io::read_sites(sites_path)?;
    let obs = io::read_observations(obs_path, None)?;
    let summary = data_summary(&sites, &obs);
    print!("{summary}");

    let spec = cfg.model.spec(None, cfg.seed)?;
    let model = match &cfg.model.params {
        Some(p) => model_at(&spec, &sites, &obs, &trends_for(cfg, &obs)?, p)?,
        None => fit_model(&spec, &sites, &obs)?,
    };
    let report = fit_report(&model, &summary);

    let mut staged = Staged::new(out, "fit")?;
    io::write_json(&staged.path("model.json"), &model)?;
    io::write_string(&staged.path("report.txt"), &report)?;
    io::write_trends(&staged.path("trends.csv"), &model.trends)?;
    if cfg.dump_basis {
        let ids: Vec<String> = model.training_sites.sites.iter().map(|s| s.id.clone()).collect();
        let coords = model.training_sites.coords();
        let range = model.params.theta_b.first().and_then(|b| b.range);
        let z = model.basis.penalized_at(&coords, range)?;
        io::write_matrix(&staged.path("basis.csv"), &ids, "z", &z)?;
        let t = model.basis.unpenalized_at(&coords);
        if t.ncols() > 0 {
            io::write_matrix(&staged.path("basis_unpenalized.csv"), &ids, "t", &t)?;
        }
    }
    staged.commit()?;
    println!("log-likelihood {:.6}  AIC {:.6}  ({} iterations)", model.loglik, model.aic, model.iterations);
    Ok(())
}

pub fn predict(cfg: &RunConfig) -> Result<()> {
    let model_path = required(&cfg.model_file, "model")?;
    let sites_path = required(&cfg.sites, "sites")?;
    let obs_path = required(&cfg.obs, "obs")?;
    let out = out_dir(cfg)?;
    let model: FittedModel = io::read_json(model_path)?;
    let anchor = model.trends.anchor;
    let sites = io::read_sites(sites_path)?;
    let obs = io::read_observations(obs_path, Some(anchor))?;

    let req = match &cfg.targets {
        Some(t) => {
            let targets = io::read_targets(t, anchor)?;
            let mut index: BTreeMap<String, usize> = BTreeMap::new();
            let mut req_sites = Vec::new();
            let mut cells = Vec::with_capacity(targets.len());
            for (id, period) in targets {
                let i = match index.get(&id) {
                    Some(&i) => i,
                    None => {
                        let s = sites.get(&id).ok_or_else(|| stkrige::Error::UnknownSite(id.clone()))?;
                        req_sites.push(s.clone());
                        index.insert(id, req_sites.len() - 1);
                        req_sites.len() - 1
                    }
                };
                cells.push((i, period));
            }
            PredictionRequest {
                sites: req_sites,
                cells,
                want_variance: true,
                want_lta: true,
            }
        }
        None => PredictionRequest::all_periods(sites.sites.clone(), model.trends.n_periods()),
    };
    let res = predict_cells(&model, &obs, &req)?;

    let mut staged = Staged::new(out, "predict")?;
    io::write_predictions(&staged.path("predictions.csv"), anchor, &res)?;
    io::write_lta(&staged.path("lta.csv"), &res)?;
    staged.commit()?;
    println!("predicted {} cells at {} sites", res.cells.len(), res.lta.len());
    Ok(())
}

pub fn cv(cfg: &RunConfig) -> Result<()> {
    let sites_path = required(&cfg.sites, "sites")?;
    let obs_path = required(&cfg.obs, "obs")?;
    let out = out_dir(cfg)?;
    let sites = io::read_sites(sites_path)?;
    let obs = io::read_observations(obs_path, None)?;
    print!("{}", data_summary(&sites, &obs));

    let c = &cfg.cv;
    let plan = if c.cluster_folds {
        make_cluster_folds(&sites, c.class, c.folds, cfg.seed, c.cluster_km)?
    } else {
        make_folds(&sites, c.class, c.folds, cfg.seed)?
    };
    let opts = CvOptions {
        refit_trends: c.refit_trends,
        native_two_week: c.native_two_week,
        perfect_predictor: c.perfect_predictor,
        parallel: true,
    };
    let ranks: Vec<usize> = if cfg.model.basis == BasisKind::Full || c.ranks.is_empty() {
        vec![cfg.model.rank]
    } else {
        c.ranks.clone()
    };
    let mut reports = Vec::with_capacity(ranks.len());
    for k in ranks {
        let spec = cfg.model.spec(Some(k), cfg.seed)?;
        log::info!("cross-validating {} rank {k}", spec.basis.label());
        reports.push(cross_validate(&spec, &sites, &obs, &plan, &opts)?);
    }
    let table = cv_table(&reports);

    let mut staged = Staged::new(out, "cv")?;
    io::write_json(&staged.path("cv_report.json"), &reports)?;
    io::write_string(&staged.path("cv_table.csv"), &table)?;
    staged.commit()?;
    print!("{table}");
    Ok(())
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let s = &cfg.simulate;
    let layout = make_archetype_layout_in(s.n_fixed, s.n_snapshot, s.n_home, s.n_periods, cfg.seed, s.domain_km)?;
    let trends = TemporalBasis::seasonal(layout.anchor, s.n_periods, s.m)?;
    let data = simulate_data(&layout, &s.basis_spec(), &trends, &s.truth(), cfg.seed, s.replicate)?;

    let mut staged = Staged::new(out, "simulate")?;
    io::write_sites(&staged.path("sites.csv"), &data.sites)?;
    io::write_observations(&staged.path("obs.csv"), &data.obs)?;
    io::write_json(&staged.path("truth.json"), &data.metadata)?;
    staged.commit()?;
    println!("simulated {} observations at {} sites", data.obs.len(), data.sites.len());
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let report = run_bench(&cfg.bench)?;
    let mut staged = Staged::new(out, "bench")?;
    io::write_json(&staged.path("bench.json"), &report)?;
    io::write_string(&staged.path("bench_cells.csv"), &report.cells_csv())?;
    io::write_string(&staged.path("bench_slopes.csv"), &report.slopes_csv())?;
    staged.commit()?;
    print!("{}", report.slopes_csv());
    Ok(())
}
