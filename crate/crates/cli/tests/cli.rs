use std::path::Path;
use std::process::{Command, Output};

use btw_cli::plot::{emit_plot, render_svg};
use btw_core::stats::{loglog_fit, SurvivalPoint};
use serde_json::Value;

fn btw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btw")).args(args).output().expect("run btw")
}

fn btw_threads(threads: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btw")).env("BTW_THREADS", threads).args(args).output().expect("run btw")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn summary(dir: &Path, scenario: &str) -> Value {
    let text = std::fs::read_to_string(dir.join(format!("{scenario}.summary.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Data rows of a CSV with `#` comment lines, keyed by header.
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(str::to_string).collect();
    let rows = rdr.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn env_report_on_env_a() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = btw(&["env-report", "--law", "ENV-A", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = summary(dir.path(), "env-report");
    assert!((s["kappa"].as_f64().unwrap() - 3.0).abs() < 1e-9);
    assert_eq!(s["conditions"]["all_required_hold"], Value::Bool(true));
    let (header, rows) = read_csv(&dir.path().join("env-report_conditions.csv"));
    assert_eq!(header, ["condition", "value", "holds"]);
    assert!(rows.iter().all(|r| r[2] == "true"), "{rows:?}");
    let (_, psi) = read_csv(&dir.path().join("env-report.csv"));
    let at = |t: &str| psi.iter().find(|r| r[0] == t).unwrap().clone();
    assert_eq!(at("1")[2], "1");
    assert_eq!(at("3")[2], "1");
}

#[test]
fn unnormalized_law_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let law = write(dir.path(), "law.json", r#"{"branches":[{"prob":"1","weights":["0.5","0.4"]}]}"#);
    let out = dir.path().join("out");
    let o = btw(&["env-report", "--law", &law, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("`law`") && err.contains("normalization"), "{err}");
    // the report is still written
    assert!(out.join("env-report_conditions.csv").exists());
    let o = btw(&["tail-maxl", "--law", &law, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn lattice_law_warns() {
    let dir = tempfile::tempdir().unwrap();
    let law = write(dir.path(), "law.json", r#"{"branches":[{"prob":"1","weights":["0.5","0.5"]}]}"#);
    let o = btw(&["env-report", "--law", &law, "--out", dir.path().to_str().unwrap()]);
    let err = stderr(&o);
    assert_eq!(o.status.code(), Some(0), "{err}");
    assert!(err.contains("lattice"), "{err}");
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write(dir.path(), "typo.json", r#"{"law":"ENV-A","sampels":10}"#);
    let o = btw(&["tail-maxl", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("sampels"), "{}", stderr(&o));

    let cfg = write(dir.path(), "caps.json", r#"{"law":"ENV-A","caps":{"barrier":-1}}"#);
    let o = btw(&["tail-w-m", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("caps.barrier"), "{}", stderr(&o));

    let cfg = write(dir.path(), "other.json", r#"{"scenario":"pij-table","law":"ENV-A"}"#);
    let o = btw(&["env-report", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("`scenario`"), "{}", stderr(&o));

    let o = btw(&["pij-table", "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("`law`"), "{}", stderr(&o));

    let o = btw(&["pij-table", "--law", "no/such/file.json", "--out", out]);
    assert_eq!(o.status.code(), Some(3));

    let o = btw(&["no-such-scenario"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_law_path_is_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("cfg")).unwrap();
    write(&dir.path().join("cfg"), "law.json", include_str!("../../core/fixtures/env_c.json"));
    let cfg = write(&dir.path().join("cfg"), "run.json", r#"{"scenario":"pij-table","law":"law.json","params":{"i_max":3}}"#);
    let out = dir.path().join("out");
    let o = btw(&["pij-table", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn pij_table_rows_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = btw(&["pij-table", "--law", "ENV-B", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("pij-table.csv"));
    assert_eq!(header, ["i", "j", "p_ij", "row_tail_bound"]);
    for i in 1..=10 {
        let sum: f64 = rows.iter().filter(|r| r[0] == i.to_string()).map(|r| r[2].parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6, "row {i}: {sum}");
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = |d: &Path| {
        vec![
            "tail-maxl".to_string(),
            "--law".into(),
            "ENV-B".into(),
            "--samples".into(),
            "1000".into(),
            "--replicas".into(),
            "3".into(),
            "--seed".into(),
            "42".into(),
            "--out".into(),
            d.to_str().unwrap().into(),
            "--plot".into(),
            d.join("p.svg").to_str().unwrap().into(),
        ]
    };
    let aa = args(a.path());
    let bb = args(b.path());
    let o1 = btw_threads("1", &aa.iter().map(String::as_str).collect::<Vec<_>>());
    let o2 = btw_threads("3", &bb.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o1.status.code(), Some(0), "{}", stderr(&o1));
    assert_eq!(o2.status.code(), Some(0), "{}", stderr(&o2));
    for f in ["tail-maxl.csv", "tail-maxl_fits.csv", "tail-maxl.summary.json", "p.svg"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let text = std::fs::read_to_string(a.path().join("tail-maxl.csv")).unwrap();
    assert!(text.starts_with("# "), "header comment missing");
    assert!(text.contains("censored"));
}

#[test]
fn tail_maxl_env_b_slope_near_minus_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = btw(&["tail-maxl", "--law", "ENV-B", "--samples", "100000", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (_, rows) = read_csv(&dir.path().join("tail-maxl_fits.csv"));
    let slope: f64 = rows.iter().find(|r| r[0] == "loglog_slope").unwrap()[1].parse().unwrap();
    assert!((slope + 1.0).abs() < 0.2, "slope {slope}");
    assert!(rows.iter().any(|r| r[0] == "c_star"));
}

#[test]
fn assertion_scenarios_pass_on_reference_laws() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["nbm-check", "--samples", "20000", "--out", out],
        vec!["tree-equivalence", "--law", "ENV-B", "--samples", "20000", "--out", out],
        vec!["mto-check", "--law", "ENV-A", "--samples", "200000", "--out", out],
        vec!["spine-check", "--law", "ENV-A", "--samples", "2000", "--out", out],
    ] {
        let o = btw(&args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        let s = summary(dir.path(), args[0]);
        assert_eq!(s["assertion"]["passed"], Value::Bool(true), "{args:?}");
    }
    let (header, _) = read_csv(&dir.path().join("spine-check_ka.csv"));
    assert_eq!(header, ["a", "estimate", "se", "hit_fraction", "exact"]);
}

#[test]
fn ladder_report_columns_and_json_format() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = btw(&["ladder-report", "--law", "ENV-A", "--samples", "20000", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("ladder-report.csv"));
    assert_eq!(header, ["x", "estimate", "se", "kind"]);
    for kind in ["strict+", "strict-", "weak+", "weak-"] {
        assert_eq!(rows.iter().filter(|r| r[3] == kind).count(), 21);
    }
    let o = btw(&["ladder-report", "--law", "ENV-A", "--samples", "2000", "--format", "json", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ladder-report.json")).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 84);
    // κ = ∞ needs an explicit tilt
    let o = btw(&["ladder-report", "--law", "ENV-C", "--samples", "100", "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("params.tilt_exponent"));
}

#[test]
fn tail_w_m_and_maxln_converge_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = btw(&["tail-w-m", "--law", "ENV-A", "--samples", "5000", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = summary(dir.path(), "tail-w-m");
    assert!((s["mean_w_inf"].as_f64().unwrap() - 1.0).abs() < 0.1);
    let cfg = write(dir.path(), "m.json", r#"{"law":"ENV-A","samples":50,"params":{"n_excursions":50,"c_star":1.0}}"#);
    let svg = dir.path().join("m.svg");
    let o = btw(&["maxln-converge", "--config", &cfg, "--out", out, "--plot", svg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(svg).unwrap();
    assert!(text.contains("max_over_n") && text.contains("m_e"), "overlay needs both series");
}

#[test]
fn emit_plot_slope_matches_loglog_fit() {
    let dir = tempfile::tempdir().unwrap();
    // exact Pareto(1.5) survival on a log grid
    let pts: Vec<SurvivalPoint> = (0..20)
        .map(|i| {
            let x = 10f64.powf(i as f64 / 6.0);
            SurvivalPoint { x, s: x.powf(-1.5), exceedances: 1000 }
        })
        .collect();
    let mut csv = String::from("# synthetic Pareto survival\nx,survival,exceedances\n");
    for p in &pts {
        csv.push_str(&format!("{},{},{}\n", p.x, p.s, p.exceedances));
    }
    let path = Path::new(&write(dir.path(), "pareto.csv", &csv)).to_path_buf();
    let svg = dir.path().join("pareto.svg");
    let plot = emit_plot(&path, &svg).unwrap();
    let fit = loglog_fit(&pts, (1.0, 1e4)).unwrap();
    let line = plot.fit.unwrap();
    assert!((line.slope - fit.slope).abs() < 1e-12);
    assert!((fit.slope + 1.5).abs() < 1e-9);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.contains(&format!("slope {:.4}", fit.slope)));
    assert_eq!(text, render_svg(&plot));

    let bad = write(dir.path(), "bad.csv", "a,b\n1,2\n");
    assert!(emit_plot(Path::new(&bad), &svg).is_err());
    let empty = write(dir.path(), "empty.csv", "x,survival\n");
    let plot = emit_plot(Path::new(&empty), &svg).unwrap();
    assert!(plot.series.is_empty());
    assert!(!std::fs::read_to_string(&svg).unwrap().contains("<circle"));
}
