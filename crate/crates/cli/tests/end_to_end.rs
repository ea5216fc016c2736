use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn stkrige(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stkrige"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_SIM: &str = r#"{
  "simulate": {"n_fixed": 8, "n_snapshot": 8, "n_home": 12, "n_periods": 20, "domain_km": 30.0}
}"#;

/// Simulate into `dir/data` using `config`; returns the data directory.
fn simulate(dir: &Path, config: &str, seed: u64) -> PathBuf {
    let cfg = dir.join("sim.json");
    fs::write(&cfg, config).unwrap();
    let data = dir.join("data");
    let seed = seed.to_string();
    ok(&stkrige(&["simulate", "--config", s(&cfg), "--out", s(&data), "--seed", &seed]));
    data
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn missing_observation_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), SMALL_SIM, 1);
    let missing = dir.path().join("nowhere").join("obs.csv");
    let out_dir = dir.path().join("fit");
    let out = stkrige(&["fit", "--sites", s(&data.join("sites.csv")), "--obs", s(&missing), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(s(&missing)), "stderr: {err}");
    assert!(!out_dir.join("model.json").exists());
}

#[test]
fn simulate_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = simulate(a.path(), SMALL_SIM, 9);
    let db = simulate(b.path(), SMALL_SIM, 9);
    for f in ["sites.csv", "obs.csv", "truth.json"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f} differs");
    }
    let c = tempfile::tempdir().unwrap();
    let dc = simulate(c.path(), SMALL_SIM, 10);
    assert_ne!(fs::read(da.join("obs.csv")).unwrap(), fs::read(dc.join("obs.csv")).unwrap());
}

#[test]
fn fit_report_is_finite_and_within_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), SMALL_SIM, 3);
    let fit_dir = dir.path().join("fit");
    ok(&stkrige(&[
        "fit",
        "--sites",
        s(&data.join("sites.csv")),
        "--obs",
        s(&data.join("obs.csv")),
        "--out",
        s(&fit_dir),
        "--basis",
        "tprs",
        "--rank",
        "10",
        "--dump-basis",
    ]));
    let report = fs::read_to_string(fit_dir.join("report.txt")).unwrap();
    let ll: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("log-likelihood: "))
        .expect("log-likelihood line")
        .parse()
        .unwrap();
    assert!(ll.is_finite());

    let mut lines = report.lines().skip_while(|l| *l != "covariance parameters:").skip(2);
    let mut n = 0;
    for l in lines.by_ref().take_while(|l| !l.is_empty()) {
        let f: Vec<&str> = l.split_whitespace().collect();
        let v: Vec<f64> = f[1..4].iter().map(|x| x.parse().unwrap()).collect();
        assert!(v[0].is_finite() && v[1] <= v[0] && v[0] <= v[2], "{l}");
        n += 1;
    }
    // Two β sills, two β nuggets and the three ν parameters.
    assert_eq!(n, 7);
    for f in ["model.json", "trends.csv", "basis.csv", "basis_unpenalized.csv"] {
        assert!(fit_dir.join(f).exists(), "{f} missing");
    }
    let basis = fs::read_to_string(fit_dir.join("basis.csv")).unwrap();
    assert!(basis.starts_with("site_id,z1,"));
    assert_eq!(basis.lines().count(), 29);
}

#[test]
fn zero_nugget_prediction_reproduces_training_data() {
    let params = r#"{
      "theta_b": [{"range": null, "partial_sill": 0.3}, {"range": null, "partial_sill": 0.1}],
      "theta_p": null,
      "theta_v": {"range": 3.0, "partial_sill": 0.05, "nugget": 0.0}
    }"#;
    let config = format!(
        r#"{{
      "simulate": {{"n_fixed": 8, "n_snapshot": 8, "n_home": 12, "n_periods": 20, "domain_km": 30.0,
                    "truth": {{"params": {params}, "alpha": [[3.0, 0.1, -0.1], [0.4, 0.1, -0.1]]}}}},
      "model": {{"basis": "tprs", "rank": 10, "beta_nugget": false, "params": {params}}}
    }}"#
    );
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), &config, 5);
    let cfg = dir.path().join("sim.json");
    let fit_dir = dir.path().join("fit");
    let (sites, obs) = (data.join("sites.csv"), data.join("obs.csv"));
    ok(&stkrige(&["fit", "--config", s(&cfg), "--sites", s(&sites), "--obs", s(&obs), "--out", s(&fit_dir)]));

    let rows = csv_rows(&obs);
    let targets = dir.path().join("targets.csv");
    let mut t = String::from("site_id,period_start_date\n");
    for r in &rows {
        t.push_str(&format!("{},{}\n", r[0], r[1]));
    }
    fs::write(&targets, t).unwrap();
    let pred_dir = dir.path().join("pred");
    ok(&stkrige(&[
        "predict",
        "--model",
        s(&fit_dir.join("model.json")),
        "--sites",
        s(&sites),
        "--obs",
        s(&obs),
        "--targets",
        s(&targets),
        "--out",
        s(&pred_dir),
    ]));
    let pred = csv_rows(&pred_dir.join("predictions.csv"));
    assert_eq!(pred.len(), rows.len());
    let mut worst = 0.0f64;
    for (p, o) in pred.iter().zip(&rows) {
        assert_eq!((&p[0], &p[1]), (&o[0], &o[1]));
        let d: f64 = p[2].parse::<f64>().unwrap() - o[2].parse::<f64>().unwrap();
        worst = worst.max(d.abs());
    }
    assert!(worst < 1e-6, "max |prediction - observation| = {worst:e}");
    assert!(pred_dir.join("lta.csv").exists());
}

#[test]
fn period_outside_grid_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), SMALL_SIM, 4);
    let (sites, obs) = (data.join("sites.csv"), data.join("obs.csv"));
    let fit_dir = dir.path().join("fit");
    ok(&stkrige(&["fit", "--sites", s(&sites), "--obs", s(&obs), "--out", s(&fit_dir), "--rank", "0", "--model.m", "1"]));
    let site = csv_rows(&sites)[0][0].clone();
    for date in ["2031-06-02", "1999-01-04"] {
        let targets = dir.path().join("targets.csv");
        fs::write(&targets, format!("site_id,period_start_date\n{site},{date}\n")).unwrap();
        let pred_dir = dir.path().join("pred");
        let out = stkrige(&[
            "predict",
            "--model",
            s(&fit_dir.join("model.json")),
            "--sites",
            s(&sites),
            "--obs",
            s(&obs),
            "--targets",
            s(&targets),
            "--out",
            s(&pred_dir),
        ]);
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(date), "stderr: {err}");
        assert!(!pred_dir.join("predictions.csv").exists());
    }
}

#[test]
fn perfect_predictor_table_has_unit_r2_and_descending_ranks() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), SMALL_SIM, 6);
    let cv_dir = dir.path().join("cv");
    let stdout = ok(&stkrige(&[
        "cv",
        "--sites",
        s(&data.join("sites.csv")),
        "--obs",
        s(&data.join("obs.csv")),
        "--out",
        s(&cv_dir),
        "--cv-class",
        "fixed",
        "--cv.folds",
        "4",
        "--cv.ranks",
        "[0,5,10]",
        "--perfect-predictor",
    ]));
    let table = fs::read_to_string(cv_dir.join("cv_table.csv")).unwrap();
    assert!(stdout.contains(&table));
    let header = table.lines().next().unwrap();
    assert_eq!(header, "model,metric,10,5,0");
    let r2 = table.lines().find(|l| l.contains(",lta_r2,")).unwrap();
    let cells: Vec<&str> = r2.split(',').skip(2).collect();
    assert_eq!(cells, vec!["1.000000"; 3]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(cv_dir.join("cv_report.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 3);
}

fn date(period: usize) -> String {
    // 14-day bins from 2005-01-03; stays within 2005 for the periods used here.
    let month_days = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
    let mut day = 2 + 14 * period;
    let mut month = 0;
    while day >= month_days[month] {
        day -= month_days[month];
        month += 1;
    }
    format!("2005-{:02}-{:02}", month + 1, day + 1)
}

#[test]
fn ingested_data_summary_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let n_sites = 6;
    let n_periods = 12;
    let z: Vec<f64> = (0..n_sites * n_periods).map(|i| (i as f64 * 1.37).sin() + 0.1 * (i % 5) as f64).collect();
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sites = String::from("site_id,x_km,y_km,kind,lu\n");
    let mut obs = String::from("site_id,period_start_date,log_value\n");
    for i in 0..n_sites {
        sites.push_str(&format!("a{i},{},{},fixed,{}\n", 3.0 * i as f64, (i * i % 7) as f64, 0.2 * i as f64));
        for t in 0..n_periods {
            let v = 3.72 + 0.75 * (z[i * n_periods + t] - mean) / sd;
            obs.push_str(&format!("a{i},{},{v}\n", date(t)));
        }
    }
    let (sp, op) = (dir.path().join("sites.csv"), dir.path().join("obs.csv"));
    fs::write(&sp, sites).unwrap();
    fs::write(&op, obs).unwrap();
    let fit_dir = dir.path().join("fit");
    let stdout = ok(&stkrige(&["fit", "--sites", s(&sp), "--obs", s(&op), "--out", s(&fit_dir), "--rank", "0", "--set", "model.m=1"]));
    let report = fs::read_to_string(fit_dir.join("report.txt")).unwrap();
    for text in [&stdout, &report] {
        let all = text.lines().find(|l| l.trim_start().starts_with("all ")).unwrap();
        assert!(all.contains("mean 3.7200") && all.contains("sd 0.7500"), "{all}");
        let fixed = text.lines().find(|l| l.trim_start().starts_with("fixed ")).unwrap();
        assert!(fixed.contains("mean 3.7200"), "{fixed}");
    }
}
