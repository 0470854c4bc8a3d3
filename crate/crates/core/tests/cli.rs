use std::path::Path;
use std::process::{Command, Output};

use kinkreg::cli::fmt_f64;
use kinkreg::fit::fit;
use kinkreg::model::{Dataset, ModelSpec};
use kinkreg::simulation::{generate, DgpKind, DgpSpec};

fn kinkreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinkreg"))
        .args(args)
        .env_clear()
        .output()
        .unwrap()
}

fn write_dataset(path: &Path, d: &Dataset) {
    let mut w = csv::Writer::from_path(path).unwrap();
    let mut header = vec!["pi", "g", "m", "x", "flag"];
    if d.instruments.is_some() {
        header.push("w");
    }
    w.write_record(&header).unwrap();
    let x = d.column("x").unwrap();
    for i in 0..d.n() {
        let mut row = vec![
            fmt_f64(d.outcome[i]),
            fmt_f64(d.running[i]),
            fmt_f64(d.shifter[i]),
            fmt_f64(x[i]),
            d.export_flag.as_ref().unwrap()[i].to_string(),
        ];
        if let Some(inst) = &d.instruments {
            row.push(fmt_f64(inst[0].values[i]));
        }
        w.write_record(&row).unwrap();
    }
    w.flush().unwrap();
}

fn data_flags<'a>(input: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "--input", input, "--output-dir", out, "--outcome-col", "pi", "--running-col", "g",
        "--shifter-col", "m", "--covariate-cols", "x",
    ]
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_round_trips_the_library_result() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(&DgpSpec::new(DgpKind::Exogenous, 2.0, 300, 21)).unwrap();
    let csv = dir.path().join("data.csv");
    write_dataset(&csv, &d);
    let out = dir.path().join("out");
    let (input, outs) = (csv.to_str().unwrap(), out.to_str().unwrap());
    let o = kinkreg(&[&["fit"][..], &data_flags(input, outs)].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let direct = fit(&d, &ModelSpec::default(), None).unwrap();
    let coef = json(&out.join("coefficients.json"));
    assert_eq!(coef["beta_g"].as_f64().unwrap(), direct.coefficients.beta_g);
    assert_eq!(coef["beta_x"].as_f64().unwrap(), direct.coefficients.beta_x);
    assert_eq!(coef["n_used"].as_u64().unwrap() as usize, direct.coefficients.n_used);
    // intercept suppressed in the report
    let names: Vec<&str> = coef["coefficients"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, vec!["beta_g", "beta_x", "x"]);

    let contour = std::fs::read_to_string(out.join("contour.csv")).unwrap();
    let mut lines = contour.lines();
    assert_eq!(lines.next().unwrap(), "m_quantile,m,gamma_hat,effective_mass,missing_flag");
    for (line, g) in lines.zip(&direct.contour.gamma_hat) {
        let field = line.split(',').nth(2).unwrap();
        match g {
            Some(g) => assert_eq!(field.parse::<f64>().unwrap(), *g),
            None => assert_eq!(field, "NA"),
        }
    }
    assert!(out.join("manifest.json").exists());
}

#[test]
fn model_two_on_endogenous_design() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(&DgpSpec::new(DgpKind::Endogenous, 4.0, 1000, 5)).unwrap();
    let csv = dir.path().join("data.csv");
    write_dataset(&csv, &d);
    let out = dir.path().join("out");
    let (input, outs) = (csv.to_str().unwrap(), out.to_str().unwrap());
    let args = [
        &["fit"][..],
        &data_flags(input, outs),
        &["--model", "2", "--instrument-cols", "w", "--bandwidth", "under"],
    ]
    .concat();
    let o = kinkreg(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let coef = json(&out.join("coefficients.json"));
    let bg = coef["beta_g"].as_f64().unwrap();
    // three times the Monte Carlo RMSE of this design at n = 500
    assert!((bg - 4.0).abs() < 0.45, "{bg}");
    assert_eq!(coef["first_stage"]["residual_columns"][0], "v_g");
}

#[test]
fn five_row_file_exits_nonzero_with_record() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("tiny.csv");
    std::fs::write(&csv, "pi,g,m,x\n1,0.1,0,1\n2,0.5,1,2\n0.5,-0.3,2,0\n3,1.2,3,1\n1,0.8,4,2\n").unwrap();
    let out = dir.path().join("out");
    let o = kinkreg(&[&["fit"][..], &data_flags(csv.to_str().unwrap(), out.to_str().unwrap())].concat());
    assert_eq!(o.status.code(), Some(3));
    let rec: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(rec["error"], "degenerate_window");
    assert_eq!(rec["exit_code"], 3);
}

#[test]
fn missing_column_and_file_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    std::fs::write(&csv, "pi,g,m\n1,2,3\n").unwrap();
    let out = dir.path().join("out");
    let o = kinkreg(&[&["fit"][..], &data_flags(csv.to_str().unwrap(), out.to_str().unwrap())].concat());
    assert_eq!(o.status.code(), Some(2));
    let rec: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(rec["column"], "x");

    let o = kinkreg(&[&["fit"][..], &data_flags("/nonexistent.csv", out.to_str().unwrap())].concat());
    assert_eq!(o.status.code(), Some(4));
    let o = kinkreg(&["fit", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn heatmap_without_flag_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(&DgpSpec::new(DgpKind::Exogenous, 2.0, 300, 2)).unwrap();
    let csv = dir.path().join("data.csv");
    write_dataset(&csv, &d);
    let out = dir.path().join("out");
    let (input, outs) = (csv.to_str().unwrap(), out.to_str().unwrap());
    let o = kinkreg(&[&["heatmap"][..], &data_flags(input, outs)].concat());
    assert_eq!(o.status.code(), Some(2));

    let o = kinkreg(&[&["heatmap"][..], &data_flags(input, outs), &["--export-flag-col", "flag"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cells = std::fs::read_to_string(out.join("heatmap_cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 101);
    let overlay = std::fs::read_to_string(out.join("heatmap_overlay.csv")).unwrap();
    assert!(overlay.starts_with("m_percentile,gamma_percentile,m,gamma_hat"));
}

#[test]
fn env_vars_mirror_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("snr");
    let o = Command::new(env!("CARGO_BIN_EXE_kinkreg"))
        .arg("snr")
        .env_clear()
        .env("KINKREG_OUTPUT_DIR", &out)
        .env("KINKREG_KINDS", "exogenous")
        .env("KINKREG_BETAS", "1,2")
        .env("KINKREG_M_POINTS", "0")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("snr.csv")).unwrap();
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn one_replication_simulation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = kinkreg(&[
            "simulate", "--output-dir", out.to_str().unwrap(), "--replications", "1", "--seed", "3",
            "--kinds", "exogenous", "--sizes", "120", "--betas", "2",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out.join("table_beta_exogenous.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert_eq!(a.lines().count(), 2);
}
