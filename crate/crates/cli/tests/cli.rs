use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn flowfit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowfit"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env("FLOWFIT_THREADS", "2")
        .output()
        .expect("spawn flowfit")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const FIT: &[&str] = &[
    "fit",
    "--covariates",
    "d/covariates.csv",
    "--cytograms",
    "d/cytograms.csv",
    "--k",
    "3",
    "--lambda-alpha",
    "0.01",
    "--lambda-beta",
    "0.01",
    "--radius",
    "1",
    "--restarts",
    "2",
    "--seed",
    "11",
];

fn dataset(dir: &Path) {
    let out = flowfit(&["simulate", "--study", "misspec", "--dataset", "d", "--seed", "3"], dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn fit_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let out = flowfit(&[FIT, &["--out", "m.json"]].concat(), dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(doc["k"], 3);
    assert_eq!(doc["p"], 3);
    assert_eq!(doc["t"], 100);
    assert_eq!(doc["fit"]["seed"], 11);

    let out = flowfit(
        &["predict", "--model", "m.json", "--covariates", "d/covariates.csv", "--out", "p.csv"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(dir.path().join("p.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "time,cluster,probability,mean_y1,lower_y1,upper_y1");
    assert_eq!(lines.len(), 1 + 3 * 100);
    let mass: f64 = lines[1..4]
        .iter()
        .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((mass - 1.0).abs() < 1e-12);
}

#[test]
fn fit_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    for name in ["a.json", "b.json"] {
        let out = flowfit(&[FIT, &["--out", name]].concat(), dir.path());
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let a = fs::read(dir.path().join("a.json")).unwrap();
    let b = fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn binned_input_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let out = flowfit(
        &["bin", "--cytograms", "d/cytograms.csv", "--d-per-axis", "40", "--out", "b.csv"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("b.csv.grid.json").exists());
    let mut args = FIT.to_vec();
    args[4] = "b.csv";
    args.extend(["--format", "binned", "--out", "m.json"]);
    let out = flowfit(&args, dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn cv_writes_scores() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let mut args = vec![
        "cv",
        "--covariates",
        "d/covariates.csv",
        "--cytograms",
        "d/cytograms.csv",
        "--k",
        "2",
        "--radius",
        "1",
        "--restarts",
        "1",
        "--tol",
        "1e-4",
        "--grid-alpha",
        "0.1,0.01",
        "--grid-beta",
        "0.1",
        "--folds",
        "2",
    ];
    args.extend(["--out", "m.json", "--scores", "s.csv"]);
    let out = flowfit(&args, dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let scores = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(scores.lines().count(), 3);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&flowfit(&["fit", "--k", "x"], dir.path())), 1);
    assert_eq!(code(&flowfit(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&flowfit(&["predict", "--model", "m.json", "--covariates", "x.csv", "--lag", "a"], dir.path())), 1);
    assert_eq!(code(&flowfit(&["--help"], dir.path())), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("x.csv"), "time,a\n1,0\n2,1,5\n").unwrap();
    fs::write(dir.path().join("y.csv"), "time,y1\n1,0\n2,1\n").unwrap();
    let args = [
        "fit",
        "--covariates",
        "x.csv",
        "--cytograms",
        "y.csv",
        "--k",
        "1",
        "--lambda-alpha",
        "0",
        "--lambda-beta",
        "0",
        "--radius",
        "1",
        "--out",
        "m.json",
    ];
    let out = flowfit(&args, dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("x.csv:3"), "{}", stderr(&out));

    let mut missing = args;
    missing[2] = "absent.csv";
    assert_eq!(code(&flowfit(&missing, dir.path())), 2);

    fs::write(dir.path().join("m.json"), "{\"schema_version\": 1}").unwrap();
    let out = flowfit(&["predict", "--model", "m.json", "--covariates", "y.csv"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn numerical_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("x.csv"), "time,a\n1,0\n2,1\n3,2\n").unwrap();
    fs::write(dir.path().join("y.csv"), "time,y1\n1,1e300\n2,-1e300\n3,5\n").unwrap();
    let out = flowfit(
        &[
            "fit",
            "--covariates",
            "x.csv",
            "--cytograms",
            "y.csv",
            "--k",
            "2",
            "--lambda-alpha",
            "0",
            "--lambda-beta",
            "0",
            "--radius",
            "1",
            "--out",
            "m.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}
