use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mrgpssm::data::{gen_multiscale, read_csv, write_csv, MultiScaleConfig};
use mrgpssm::model::Dataset;
use mrgpssm::rng::RngStream;
use nalgebra::DMatrix;

const DESK: &str = "../../configs/desk.json";

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrgpssm"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn desk_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join(DESK)
        .display()
        .to_string()
}

fn small_multiscale(dir: &Path, t: usize, seed: u64) {
    let cfg = MultiScaleConfig {
        t,
        ..MultiScaleConfig::default()
    };
    write_csv(
        &dir.join("d.csv"),
        &gen_multiscale(&cfg, &RngStream::new(seed)).unwrap().data,
    )
    .unwrap();
}

const QUICK: [&str; 10] = [
    "--cycles",
    "1",
    "--iters",
    "5",
    "--batch",
    "20",
    "--minibatches",
    "1",
    "--inducing",
    "6",
];

fn quick_train(dir: &Path, comps: &str, out: &str) {
    let mut args = vec![
        "train",
        "--data",
        "d.csv",
        "--components",
        comps,
        "--seed",
        "2",
        "--out",
        out,
    ];
    args.extend(QUICK);
    let o = bin(dir, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn simulate_writes_reproducible_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a.csv", "b.csv"] {
        let o = bin(
            d,
            &[
                "simulate",
                "--kind",
                "multiscale",
                "--out",
                out,
                "--seed",
                "5",
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let data = read_csv(&d.join("a.csv")).unwrap();
    assert_eq!(data.len(), MultiScaleConfig::default().t);
    assert_eq!(
        fs::read(d.join("a.csv")).unwrap(),
        fs::read(d.join("b.csv")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("a_truth.csv")).unwrap(),
        fs::read(d.join("b_truth.csv")).unwrap()
    );
    let truth = fs::read_to_string(d.join("a_truth.csv")).unwrap();
    assert!(truth.starts_with("t,fast,slow\n"));
    assert_eq!(truth.lines().count(), data.len() + 1);

    let o = bin(
        d,
        &[
            "simulate", "--kind", "pendulum", "--out", "p.csv", "--seed", "5",
        ],
    );
    assert_eq!(code(&o), 0);
    assert!(fs::read_to_string(d.join("p_truth.csv"))
        .unwrap()
        .starts_with("t,theta,omega\n"));
}

#[test]
fn simulate_rejects_bad_kind_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = bin(
        d,
        &[
            "simulate", "--kind", "engine", "--out", "x.csv", "--seed", "1",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    fs::write(d.join("bad.json"), r#"{"slow": {"period": 50.0}}"#).unwrap();
    let o = bin(
        d,
        &[
            "simulate",
            "--kind",
            "multiscale",
            "--config",
            "bad.json",
            "--out",
            "x.csv",
            "--seed",
            "1",
        ],
    );
    assert_eq!(code(&o), 2);
    fs::write(d.join("broken.json"), "{").unwrap();
    let o = bin(
        d,
        &[
            "simulate",
            "--kind",
            "multiscale",
            "--config",
            "broken.json",
            "--out",
            "x.csv",
            "--seed",
            "1",
        ],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn train_guards() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_multiscale(d, 300, 1);
    let o = bin(
        d,
        &[
            "train",
            "--data",
            "d.csv",
            "--components",
            "R=10:d=1",
            "--seed",
            "1",
            "--out",
            "r",
        ],
    );
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("at least 500 rows"), "{}", stderr(&o));
    let o = bin(
        d,
        &[
            "train",
            "--data",
            "d.csv",
            "--components",
            "R=1:d=1",
            "--out",
            "r",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--seed"));
    let o = bin(
        d,
        &[
            "train",
            "--data",
            "d.csv",
            "--components",
            "R=1",
            "--seed",
            "1",
            "--out",
            "r",
        ],
    );
    assert_eq!(code(&o), 2);
    let o = bin(
        d,
        &[
            "train",
            "--data",
            "missing.csv",
            "--components",
            "R=1:d=1",
            "--seed",
            "1",
            "--out",
            "r",
        ],
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn train_writes_manifest_model_and_log() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_multiscale(d, 300, 2);
    quick_train(d, "R=5:d=1,R=1:d=1", "run");
    let man: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(man["seed"], 2);
    assert_eq!(man["components"], "R=5:d=1,R=1:d=1");
    assert_eq!(man["data"]["sha256"].as_str().unwrap().len(), 64);
    assert!(!man["git_describe"].as_str().unwrap().is_empty());
    let log = fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("cycle,component,iter,elbo,lr,wall_ms\n"));
    assert_eq!(log.lines().count(), 1 + 2 * 5);

    // replaying a manifest after the data changed is refused
    small_multiscale(d, 300, 3);
    let o = bin(
        d,
        &["train", "--manifest", "run/manifest.json", "--out", "again"],
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn two_component_training_raises_the_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_multiscale(d, 2000, 4);
    let cfg = desk_config();
    let o = bin(
        d,
        &[
            "train",
            "--data",
            "d.csv",
            "--components",
            "R=30:d=2,R=1:d=2",
            "--seed",
            "1",
            "--out",
            "run",
            "--config",
            &cfg,
            "--cycles",
            "2",
            "--iters",
            "30",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    let rows: Vec<(usize, usize, f64)> = log
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[0].parse().unwrap(),
                f[1].parse().unwrap(),
                f[3].parse().unwrap(),
            )
        })
        .collect();
    let avg = |cycle: usize, first: bool| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.0 == cycle && r.1 == 0)
            .map(|r| r.2)
            .collect();
        let part = if first { &v[..5] } else { &v[v.len() - 5..] };
        part.iter().sum::<f64>() / 5.0
    };
    assert!(
        avg(1, false) > avg(0, true),
        "{} vs {}",
        avg(1, false),
        avg(0, true)
    );
}

#[test]
fn predict_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_multiscale(d, 300, 5);
    quick_train(d, "R=5:d=1,R=1:d=1", "run");
    let p = |out: &str, samples: &str| {
        bin(
            d,
            &[
                "predict",
                "--model",
                "run/model.json",
                "--data",
                "d.csv",
                "--samples",
                samples,
                "--seed",
                "7",
                "--out",
                out,
            ],
        )
    };
    assert_eq!(code(&p("a.csv", "50")), 0);
    assert_eq!(code(&p("b.csv", "50")), 0);
    assert_eq!(code(&p("c.csv", "1")), 0);
    let a = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b.csv")).unwrap());
    assert_ne!(a, fs::read_to_string(d.join("c.csv")).unwrap());
    assert!(a.starts_with("t,mean_y1,var_y1\n"));
    assert_eq!(a.lines().count(), 301);

    let o = bin(
        d,
        &[
            "predict",
            "--model",
            "run/model.json",
            "--data",
            "d.csv",
            "--out",
            "x.csv",
        ],
    );
    assert_eq!(code(&o), 2);
    let two = Dataset::new(DMatrix::zeros(20, 2), DMatrix::zeros(20, 2), 1.0).unwrap();
    write_csv(&d.join("two.csv"), &two).unwrap();
    let o = bin(
        d,
        &[
            "predict",
            "--model",
            "run/model.json",
            "--data",
            "two.csv",
            "--seed",
            "1",
            "--out",
            "x.csv",
        ],
    );
    assert_eq!(code(&o), 3);
    let no_inputs = Dataset::new(DMatrix::zeros(20, 1), DMatrix::zeros(20, 0), 1.0).unwrap();
    write_csv(&d.join("nu.csv"), &no_inputs).unwrap();
    let o = bin(
        d,
        &[
            "predict",
            "--model",
            "run/model.json",
            "--data",
            "nu.csv",
            "--seed",
            "1",
            "--out",
            "x.csv",
        ],
    );
    assert_eq!(code(&o), 3);
}

fn write_predictions(path: &Path, mean: &[f64], var: &[f64]) {
    let mut s = String::from("t,mean_y1,var_y1\n");
    for (i, (m, v)) in mean.iter().zip(var).enumerate() {
        s.push_str(&format!("{i}.0,{m:?},{v:?}\n"));
    }
    fs::write(path, s).unwrap();
}

fn metrics(o: &Output) -> (f64, f64) {
    assert_eq!(code(o), 0, "{}", stderr(o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    (v["rmse"].as_f64().unwrap(), v["nll"].as_f64().unwrap())
}

#[test]
fn eval_closed_forms() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut rng = RngStream::new(9);
    let y: Vec<f64> = rng.normals(400);
    let data = Dataset::new(
        DMatrix::from_column_slice(400, 1, &y),
        DMatrix::zeros(400, 0),
        1.0,
    )
    .unwrap();
    write_csv(&d.join("d.csv"), &data).unwrap();

    write_predictions(&d.join("perfect.csv"), &y, &[1.0; 400]);
    let (rmse, nll) = metrics(&bin(
        d,
        &[
            "eval",
            "--predictions",
            "perfect.csv",
            "--data",
            "d.csv",
            "--raw",
        ],
    ));
    assert_eq!(rmse, 0.0);
    assert!((nll - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);

    write_predictions(&d.join("zero.csv"), &[0.0; 400], &[1.0; 400]);
    let (rmse, _) = metrics(&bin(
        d,
        &[
            "eval",
            "--predictions",
            "zero.csv",
            "--data",
            "d.csv",
            "--raw",
        ],
    ));
    assert!((rmse - 1.0).abs() < 0.1, "{rmse}");

    // hand-computed scores over the last two rows
    let small = Dataset::new(
        DMatrix::from_column_slice(3, 1, &[5.0, 1.0, 2.0]),
        DMatrix::zeros(3, 0),
        1.0,
    )
    .unwrap();
    write_csv(&d.join("s.csv"), &small).unwrap();
    write_predictions(&d.join("sp.csv"), &[0.0, 0.5, 2.5], &[9.0, 0.25, 4.0]);
    let out = bin(
        d,
        &[
            "eval",
            "--predictions",
            "sp.csv",
            "--data",
            "s.csv",
            "--raw",
            "--start",
            "1",
            "--out",
            "m.json",
        ],
    );
    assert_eq!(code(&out), 0);
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let nll = 0.5 * (0.5 * (ln2pi + 0.25f64.ln() + 1.0) + 0.5 * (ln2pi + 4f64.ln() + 0.0625));
    assert!((v["rmse"].as_f64().unwrap() - 0.5).abs() < 1e-15);
    assert!((v["nll"].as_f64().unwrap() - nll).abs() < 1e-14);

    write_predictions(&d.join("short.csv"), &[0.0; 10], &[1.0; 10]);
    let o = bin(
        d,
        &[
            "eval",
            "--predictions",
            "short.csv",
            "--data",
            "d.csv",
            "--raw",
        ],
    );
    assert_eq!(code(&o), 3);
    let o = bin(d, &["eval", "--predictions", "zero.csv", "--data", "d.csv"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_uses_model_normalization() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_multiscale(d, 300, 6);
    quick_train(d, "R=1:d=1", "run");
    let o = bin(
        d,
        &[
            "predict",
            "--model",
            "run/model.json",
            "--data",
            "d.csv",
            "--seed",
            "1",
            "--samples",
            "5",
            "--out",
            "p.csv",
        ],
    );
    assert_eq!(code(&o), 0);
    let (rn, _) = metrics(&bin(
        d,
        &[
            "eval",
            "--predictions",
            "p.csv",
            "--data",
            "d.csv",
            "--model",
            "run/model.json",
        ],
    ));
    let (rr, _) = metrics(&bin(
        d,
        &["eval", "--predictions", "p.csv", "--data", "d.csv", "--raw"],
    ));
    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/model.json")).unwrap()).unwrap();
    let std = model["normalization"]["y"][0]["std"].as_f64().unwrap();
    assert!((rr / rn - std).abs() < 1e-9 * std, "{rr} {rn} {std}");
}

#[test]
fn gridsearch_orders_resolutions_on_slow_data() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = gen_multiscale(&MultiScaleConfig::slow_only(), &RngStream::new(1000))
        .unwrap()
        .data;
    write_csv(&d.join("slow.csv"), &data).unwrap();
    let cfg = desk_config();
    let o = bin(
        d,
        &[
            "gridsearch",
            "--data",
            "slow.csv",
            "--grid",
            "30,1",
            "--seed",
            "0",
            "--config",
            &cfg,
            "--out",
            "grid.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let grid = fs::read_to_string(d.join("grid.csv")).unwrap();
    let rows: Vec<Vec<&str>> = grid
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(grid.lines().next().unwrap(), "R,rmse,nll,diverged");
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0], rows[1][0]), ("1", "30"));
    let rmse = |i: usize| rows[i][1].parse::<f64>().unwrap();
    assert!(rmse(1) < rmse(0), "R=30 {} vs R=1 {}", rmse(1), rmse(0));
    let long = fs::read_to_string(d.join("grid_long.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + 4);
    assert!(long.starts_with("R,metric,value\n"));
}

#[test]
fn verify_report_and_negative_control() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = bin(d, &["verify", "--out", "ok.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("ok.json")).unwrap()).unwrap();
    assert_eq!(r["passed"], true);
    let checks = r["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 7);
    for c in checks {
        for key in ["name", "observed", "tolerance", "passed"] {
            assert!(c.get(key).is_some(), "{key} missing in {c}");
        }
    }

    let o = bin(d, &["verify", "--mutate", "broken-kernel-rescaling"]);
    assert_eq!(code(&o), 1);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let failed: Vec<&str> = r["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, vec!["sde_transition_equivalence"]);
}
