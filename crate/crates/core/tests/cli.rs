use std::path::Path;
use std::process::{Command, Output};

fn svyconform(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svyconform"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect();
    (header, rows)
}

fn generate(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "generate",
        "--n-units",
        "800",
        "--covariate-dim",
        "2",
        "--seed",
        "5",
        "--out",
        "pop.csv",
    ];
    args.extend_from_slice(extra);
    ok(svyconform(&args, dir));
}

#[test]
fn generate_draw_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, &["--n-strata", "2"]);
    let (header, rows) = csv_rows(&d.join("pop.csv"));
    assert_eq!(
        header,
        ["id", "y", "x1", "x2", "stratum", "cluster", "size"]
    );
    assert_eq!(rows.len(), 800);

    ok(svyconform(
        &[
            "draw",
            "--population",
            "pop.csv",
            "--design",
            "pps-wor",
            "--n",
            "120",
            "--seed",
            "1",
            "--out",
            "s.csv",
        ],
        d,
    ));
    let (header, rows) = csv_rows(&d.join("s.csv"));
    assert_eq!(header, ["id", "label", "weight", "stratum", "cluster"]);
    assert_eq!(rows.len(), 120);

    ok(svyconform(
        &[
            "predict",
            "--population",
            "pop.csv",
            "--design",
            "pps-wor",
            "--n",
            "120",
            "--sample",
            "s.csv",
            "--alpha",
            "0.2",
            "--out",
            "pred.csv",
        ],
        d,
    ));
    let (header, rows) = csv_rows(&d.join("pred.csv"));
    assert_eq!(
        header,
        [
            "id",
            "test_weight",
            "lower",
            "upper",
            "labels",
            "level",
            "method",
            "vacuous"
        ]
    );
    assert_eq!(rows.len(), 680);
    for r in &rows {
        let (lo, hi): (f64, f64) = (r[2].parse().unwrap(), r[3].parse().unwrap());
        assert!(lo <= hi);
        assert_eq!(r[5], "0.8");
        assert_eq!(r[6], "split-weighted");
    }
}

#[test]
fn predict_with_test_file_and_weight_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, &[]);
    std::fs::write(d.join("test.csv"), "id,x1,x2\na,0.0,0.0\nb,1.0,-1.0\n").unwrap();
    ok(svyconform(
        &[
            "predict",
            "--population",
            "pop.csv",
            "--design",
            "pps-wr",
            "--n",
            "200",
            "--seed",
            "3",
            "--test",
            "test.csv",
            "--weight-grid",
            "1,10,100",
            "--out",
            "pred.csv",
        ],
        d,
    ));
    let (_, rows) = csv_rows(&d.join("pred.csv"));
    assert_eq!(rows.len(), 6);
    let width = |r: &Vec<String>| r[3].parse::<f64>().unwrap() - r[2].parse::<f64>().unwrap();
    for unit in rows.chunks(3) {
        assert!(width(&unit[0]) <= width(&unit[1]) && width(&unit[1]) <= width(&unit[2]));
    }
}

#[test]
fn predict_exchangeable_and_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, &[]);
    let out = ok(svyconform(
        &[
            "predict",
            "--population",
            "pop.csv",
            "--design",
            "srs-wor",
            "--n",
            "100",
            "--mode",
            "unsupervised",
        ],
        d,
    ));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 701);
    assert!(lines[1].contains(",-inf,"));
}

#[test]
fn weighted_engine_needs_a_test_weight_source() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, &[]);
    std::fs::write(d.join("test.csv"), "x1,x2\n0.0,0.0\n").unwrap();
    let out = svyconform(
        &[
            "predict",
            "--population",
            "pop.csv",
            "--design",
            "pps-wor",
            "--n",
            "100",
            "--test",
            "test.csv",
        ],
        d,
    );
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = svyconform(
        &[
            "draw",
            "--population",
            "missing.csv",
            "--design",
            "srs-wor",
            "--n",
            "3",
        ],
        d,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
    generate(d, &[]);
    let out = svyconform(
        &[
            "draw",
            "--population",
            "pop.csv",
            "--design",
            "cluster",
            "--k",
            "2",
        ],
        d,
    );
    assert!(!out.status.success());
}

#[test]
fn simulate_writes_every_report_format() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("tiny.toml"),
        r#"
name = "tiny"
seed = 1
replicates = 20
alphas = [0.2]

[population]
source = "synthetic"
n_units = 300
noise_scale = 10.0
seed = 2

[design]
kind = "srs-wor"
n = 40

[[methods]]
name = "conformal"
engine = "split"

[[checks]]
method = "conformal"
alpha = 0.2
metric = "coverage"
min = 0.0
max = 1.0
"#,
    )
    .unwrap();
    let stdout = ok(svyconform(&["simulate", "--config", "tiny.toml"], d));
    assert!(stdout.contains("conformal"));
    let res = d.join("results/tiny");
    for f in ["config.toml", "report.txt", "report.csv", "report.json"] {
        assert!(res.join(f).is_file(), "{f}");
    }

    let impossible = std::fs::read_to_string(d.join("tiny.toml"))
        .unwrap()
        .replace("min = 0.0", "min = 0.999");
    std::fs::write(d.join("tiny.toml"), impossible).unwrap();
    let out = svyconform(&["simulate", "--config", "tiny.toml", "--quiet"], d);
    assert_eq!(out.status.code(), Some(2));
}
