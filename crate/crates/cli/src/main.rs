mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use config::{set_dotted, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "stkrige", version, about = "Reduced-rank spatio-temporal models for two-week pollution data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Estimate a model and write model.json, report.txt and trends.csv.
    Fit,
    /// Predict at target cells from a fitted model and its training data.
    Predict,
    /// Cross-validate one or more ranks and write cv_report.json and cv_table.csv.
    Cv,
    /// Draw a synthetic dataset: sites.csv, obs.csv and truth.json.
    Simulate,
    /// Time single likelihood evaluations across problem sizes.
    Bench,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug, Default)]
struct Opts {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    sites: Option<PathBuf>,
    #[arg(long, global = true)]
    obs: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fitted model JSON (predict).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Prediction targets, `site_id,period_start_date` (predict).
    #[arg(long, global = true)]
    targets: Option<PathBuf>,
    /// none, lrk, tprs or full.
    #[arg(long, global = true)]
    basis: Option<String>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    /// est, fixed:KM, fixed:max, fixed:max/2, fixed:max/4 or fixed:max/8.
    #[arg(long, global = true)]
    range_mode: Option<String>,
    #[arg(long, global = true, value_enum)]
    beta_nugget: Option<OnOff>,
    /// sites or grid.
    #[arg(long, global = true)]
    knots: Option<String>,
    /// fixed, snapshot or home.
    #[arg(long, global = true)]
    cv_class: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write the spatial basis matrices (fit).
    #[arg(long, global = true)]
    dump_basis: bool,
    /// Re-estimate trends inside each CV fold.
    #[arg(long, global = true)]
    refit_trends: bool,
    /// Keep sites within the cluster distance in the same CV fold.
    #[arg(long, global = true)]
    cluster_folds: bool,
    /// Score held-out data against itself (harness check).
    #[arg(long, global = true)]
    perfect_predictor: bool,
    /// Set any configuration value by its dotted name, e.g. `model.multistart=3`.
    /// `--model.multistart 3` is accepted as a shorthand.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Rewrite `--a.b VALUE` and `--a.b=VALUE` into `--set a.b=VALUE`.
fn expand_dotted(args: Vec<OsString>) -> Vec<OsString> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(s) = a.to_str().and_then(|s| s.strip_prefix("--")) else {
            out.push(a);
            continue;
        };
        let name = s.split('=').next().unwrap_or("");
        if !name.contains('.') {
            out.push(a);
            continue;
        }
        let pair = if s.contains('=') {
            s.to_string()
        } else {
            let v = it.next().map(|v| v.to_string_lossy().into_owned()).unwrap_or_default();
            format!("{s}={v}")
        };
        out.push("--set".into());
        out.push(pair.into());
    }
    out
}

fn build_config(opts: &Opts) -> Result<RunConfig> {
    let mut v: Value = config::load(opts.config.as_deref())?;
    let mut set = |k: &str, val: Value| set_dotted(&mut v, k, &val.to_string());
    let path = |p: &PathBuf| Value::String(p.display().to_string());
    if let Some(p) = &opts.sites {
        set("sites", path(p))?;
    }
    if let Some(p) = &opts.obs {
        set("obs", path(p))?;
    }
    if let Some(p) = &opts.out {
        set("out", path(p))?;
    }
    if let Some(p) = &opts.model {
        set("model_file", path(p))?;
    }
    if let Some(p) = &opts.targets {
        set("targets", path(p))?;
    }
    if let Some(b) = &opts.basis {
        let kind: stkrige::basis::BasisKind = b.parse()?;
        set("model.basis", serde_json::to_value(kind)?)?;
    }
    if let Some(k) = opts.rank {
        set("model.rank", k.into())?;
    }
    if let Some(r) = &opts.range_mode {
        r.parse::<stkrige::basis::RangeMode>()?;
        set("model.range_mode", Value::String(r.clone()))?;
    }
    if let Some(n) = opts.beta_nugget {
        set("model.beta_nugget", matches!(n, OnOff::On).into())?;
    }
    if let Some(k) = &opts.knots {
        set("model.knots", Value::String(k.clone()))?;
    }
    if let Some(c) = &opts.cv_class {
        let kind: stkrige::geometry::SiteKind = c.parse()?;
        set("cv.class", serde_json::to_value(kind)?)?;
    }
    if let Some(s) = opts.seed {
        set("seed", s.into())?;
    }
    if let Some(t) = opts.threads {
        set("threads", t.into())?;
    }
    if opts.dump_basis {
        set("dump_basis", true.into())?;
    }
    if opts.refit_trends {
        set("cv.refit_trends", true.into())?;
    }
    if opts.cluster_folds {
        set("cv.cluster_folds", true.into())?;
    }
    if opts.perfect_predictor {
        set("cv.perfect_predictor", true.into())?;
    }
    for kv in &opts.set {
        let (k, val) = kv
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        set_dotted(&mut v, k.trim(), val)?;
    }
    config::finish(v)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli.opts)?;
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(cfg.log_level.as_str())).init();
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Fit => commands::fit(&cfg),
        Command::Predict => commands::predict(&cfg),
        Command::Cv => commands::cv(&cfg),
        Command::Simulate => commands::simulate(&cfg),
        Command::Bench => commands::bench(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse_from(expand_dotted(std::env::args_os().collect()));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
