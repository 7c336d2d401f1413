use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fracimp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn toy_csv(dir: &Path, complete: bool) -> PathBuf {
    let mut s = String::from("id,w,x,y\n");
    for i in 0..40 {
        let x = (i as f64) * 0.25;
        let y = 1.0 + 0.5 * x + ((i * 7 % 11) as f64 - 5.0) * 0.1;
        let y = if !complete && i % 4 == 1 { "NA".to_string() } else { y.to_string() };
        s.push_str(&format!("u{i},{},{x},{y}\n", 1.0 + (i % 3) as f64));
    }
    let p = dir.join("toy.csv");
    std::fs::write(&p, s).unwrap();
    p
}

fn toy_config(dir: &Path, data: &Path, method: &str) -> PathBuf {
    let cfg = format!(
        r#"
seed = 1
[data]
path = "{}"
id = "id"
weight = "w"
items = ["x", "y"]

[impute]
method = "{method}"

[impute.model]
kind = "normal"
target = "y"
covariates = ["x"]

[impute.pfi]
m = 50

[[impute.targets]]
item = "y"

[[impute.targets]]
kind = "median"
item = "y"
"#,
        data.display()
    );
    let p = dir.join("run.toml");
    std::fs::write(&p, cfg).unwrap();
    p
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pfi_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_csv(dir.path(), false);
    let cfg = toy_config(dir.path(), &data, "pfi");
    let mut outs = Vec::new();
    for (k, threads) in ["1", "2"].iter().enumerate() {
        let out = dir.path().join(format!("out{k}"));
        let o = run(&[
            "impute",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
            "--quiet",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(out);
    }
    for name in ["fractional.csv", "theta.json", "em_trace.csv", "weights.csv", "estimates.csv"] {
        assert_eq!(read(&outs[0].join(name)), read(&outs[1].join(name)), "{name} differs");
    }
}

#[test]
fn missing_input_exits_with_code_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let cfg = toy_config(dir.path(), &missing, "pfi");
    let out = dir.path().join("out");
    let o = run(&["impute", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("nope.csv"), "{err}");
    assert!(err.contains("error[E_INPUT]"), "{err}");
    assert!(!out.exists(), "no output on failure");

    let o = run(&["impute", "--input", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.csv"));

    let o = run(&["impute", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.toml"));
}

#[test]
fn complete_data_gives_unit_weights_and_the_pseudo_mle() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_csv(dir.path(), true);
    let cfg = toy_config(dir.path(), &data, "pfi");
    let out = dir.path().join("out");
    let o = run(&["impute", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let mut rdr = csv::Reader::from_path(out.join("fractional.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let wcol = headers.iter().position(|h| h == "fractional_weight").unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        assert_eq!(rec.unwrap()[wcol].parse::<f64>().unwrap(), 1.0);
        rows += 1;
    }
    assert_eq!(rows, 40);

    // Weighted least squares computed here, independently of the library.
    let mut rdr = csv::Reader::from_path(&data).unwrap();
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut pts = Vec::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let (w, x, y): (f64, f64, f64) = (rec[1].parse().unwrap(), rec[2].parse().unwrap(), rec[3].parse().unwrap());
        sw += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
        pts.push((w, x, y));
    }
    let b1 = (sxy - sx * sy / sw) / (sxx - sx * sx / sw);
    let b0 = (sy - b1 * sx) / sw;
    let s2 = pts.iter().map(|(w, x, y)| w * (y - b0 - b1 * x).powi(2)).sum::<f64>() / sw;

    let theta: serde_json::Value = serde_json::from_slice(&read(&out.join("theta.json"))).unwrap();
    let t: Vec<f64> = theta["theta"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((t[0] - b0).abs() < 1e-8 && (t[1] - b1).abs() < 1e-8, "{t:?} vs {b0} {b1}");
    // The normal model's last parameter is log σ².
    let s = *t.last().unwrap();
    assert!((s.exp() - s2).abs() < 1e-8, "{s} vs ln {s2}");
}

#[test]
fn every_impute_method_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_csv(dir.path(), false);
    for method in ["pfi", "kernel", "sfi", "dr", "fhdi"] {
        let cfg = toy_config(dir.path(), &data, method);
        let out = dir.path().join(method);
        let o = run(&["impute", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
        assert!(o.status.success(), "{method}: {}", String::from_utf8_lossy(&o.stderr));
        let est = String::from_utf8(read(&out.join("estimates.csv"))).unwrap();
        assert!(est.starts_with("target,estimate\nmean_y,"), "{method}: {est}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_csv(dir.path(), false);
    let cfg = toy_config(dir.path(), &data, "pfi");
    let out = dir.path().join("out");
    let o = run(&[
        "impute",
        "--config",
        cfg.to_str().unwrap(),
        "--method",
        "kernel",
        "--bandwidth",
        "0.7",
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let theta: serde_json::Value = serde_json::from_slice(&read(&out.join("theta.json"))).unwrap();
    assert_eq!(theta["method"], "kernel");
    assert_eq!(theta["theta"][0].as_f64(), Some(0.7));
}

#[test]
fn variance_command_writes_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_csv(dir.path(), false);
    let cfg = toy_config(dir.path(), &data, "pfi");
    let out = dir.path().join("out");
    let o = run(&["variance", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("variance.csv")).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["target", "estimate", "variance", "se", "ci_lower", "ci_upper"]
    );
    let rec = rdr.records().next().unwrap().unwrap();
    let v: f64 = rec[2].parse().unwrap();
    assert!(v > 0.0 && v.is_finite());
    let reps = String::from_utf8(read(&out.join("replicates.csv"))).unwrap();
    assert_eq!(reps.lines().count(), 41);
}

#[test]
fn module_errors_carry_codes_and_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_csv(dir.path(), false);
    let cfg = toy_config(dir.path(), &data, "kernel");
    let out = dir.path().join("out");
    let o = run(&[
        "impute",
        "--config",
        cfg.to_str().unwrap(),
        "--bandwidth=-1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.lines().any(|l| l.starts_with("error[E_VALIDATION]: ")), "{err}");
    assert!(!out.exists());
}

#[test]
fn twophase_fefi_matches_the_regression_total() {
    let dir = tempfile::tempdir().unwrap();
    let mut p1 = String::from("id,w,x\n");
    let mut p2 = String::from("id,w,x,y\n");
    for i in 0..30 {
        let x = (i as f64).sqrt();
        p1.push_str(&format!("a{i},10,{x}\n"));
        if i % 3 == 0 {
            p2.push_str(&format!("a{i},30,{x},{}\n", 2.0 * x + (i % 5) as f64 * 0.3));
        }
    }
    std::fs::write(dir.path().join("p1.csv"), p1).unwrap();
    std::fs::write(dir.path().join("p2.csv"), p2).unwrap();
    let cfg = r#"
[twophase]
x = ["x"]
y = "y"
[twophase.phase1]
path = "p1.csv"
id = "id"
weight = "w"
items = ["x"]
[twophase.phase2]
path = "p2.csv"
id = "id"
weight = "w"
items = ["x", "y"]
"#;
    let cp = dir.path().join("tp.toml");
    std::fs::write(&cp, cfg).unwrap();
    let out = dir.path().join("out");
    let o = run(&["twophase", "--config", cp.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("estimates.csv")).unwrap();
    let vals: Vec<f64> = rdr.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert!((vals[0] - vals[2]).abs() <= 1e-10 * vals[2].abs(), "{vals:?}");

    let out_m = dir.path().join("out_m");
    let o = run(&[
        "twophase",
        "--config",
        cp.to_str().unwrap(),
        "--m",
        "3",
        "--out",
        out_m.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out_m.join("estimates.csv")).unwrap();
    let reduced: f64 = rdr.records().next().unwrap().unwrap()[1].parse().unwrap();
    assert!((reduced - vals[0]).abs() <= 1e-10 * vals[0].abs());
}

#[test]
fn simulate_smoke_run_is_fast_and_has_the_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let start = Instant::now();
    let o = run(&["simulate", "--replicates", "2", "--seed", "5", "--out", out.to_str().unwrap(), "--quiet"]);
    let elapsed = start.elapsed();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");

    let mut rdr = csv::Reader::from_path(out.join("report.csv")).unwrap();
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers, ["method", "parameter", "truth", "Mean", "Var", "RB_pct", "CI_width", "Coverage"]);
    let methods: Vec<String> = rdr.records().map(|r| r.unwrap()[0].to_string()).collect();
    for m in ["FULL", "MI", "PFI"] {
        assert_eq!(methods.iter().filter(|x| *x == m).count(), 6, "{m}");
    }
    let table = String::from_utf8(read(&out.join("report.txt"))).unwrap();
    for col in ["Mean", "Var", "RB_pct", "CI_width", "Coverage"] {
        assert!(table.contains(col));
    }

    let again = dir.path().join("again");
    let o = run(&["simulate", "--replicates", "2", "--seed", "5", "--out", again.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success());
    assert_eq!(read(&out.join("report.csv")), read(&again.join("report.csv")));
}
