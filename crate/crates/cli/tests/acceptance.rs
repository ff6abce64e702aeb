//! Acceptance criteria 1–8. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mrgpssm::data::{gen_multiscale, write_csv, MultiScaleConfig};
use mrgpssm::experiment::{
    fit_and_score, mean_rmse_with_exclusions, ComponentList, ExperimentConfig,
};
use mrgpssm::rng::RngStream;
use mrgpssm::verify::{run_all, CheckResult, Mutation};

const DESK: &str = include_str!("../../../configs/desk.json");
const SEEDS: [u64; 3] = [0, 1, 2];

// Runtime budgets in seconds.
const BUDGET_TRANSITION: f64 = 5.0;
const BUDGET_BOUND: f64 = 5.0;
const BUDGET_RECURSION: f64 = 60.0;
const BUDGET_GRADIENT: f64 = 30.0;
const BUDGET_ORDERING: f64 = 20.0 * 60.0;
const BUDGET_BATCH: f64 = 15.0 * 60.0;
const BUDGET_CORRELATION: f64 = 60.0;

struct Line {
    id: u32,
    passed: bool,
    text: String,
}

/// Writes past the test harness's output capture so the lines always show.
fn report(line: &Line) {
    let mut err = std::io::stderr();
    let _ = writeln!(
        err,
        "criterion {}: {} {}",
        line.id,
        if line.passed { "PASS" } else { "FAIL" },
        line.text
    );
}

fn check<'a>(checks: &'a [CheckResult], name: &str) -> &'a CheckResult {
    checks
        .iter()
        .find(|c| c.name == name)
        .unwrap_or_else(|| panic!("missing check {name}"))
}

fn desk() -> ExperimentConfig {
    serde_json::from_str(DESK).unwrap()
}

fn dataset(cfg: &MultiScaleConfig, seed: u64) -> mrgpssm::model::Dataset {
    gen_multiscale(cfg, &RngStream::new(1000 + seed))
        .unwrap()
        .data
}

/// Test RMSE of every seed for one arm.
fn arm(data_cfg: &MultiScaleConfig, comps: &str, cfg: &ExperimentConfig) -> Vec<f64> {
    let comps: ComponentList = comps.parse().unwrap();
    SEEDS
        .iter()
        .map(|&s| {
            fit_and_score(&dataset(data_cfg, s), &comps, cfg, s)
                .unwrap()
                .test_metrics
                .rmse
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn verification_lines() -> Vec<Line> {
    let r = run_all(Mutation::None);
    let c = &r.checks;
    let secs = |c: &CheckResult| c.elapsed_ms / 1e3;
    let mut out = Vec::new();

    let t = check(c, "sde_transition_equivalence");
    out.push(Line {
        id: 1,
        passed: t.passed && secs(t) < BUDGET_TRANSITION,
        text: format!(
            "max relative error {:e} (≤ {:e}), {:.2}s (< {BUDGET_TRANSITION}s)",
            t.observed,
            t.tolerance,
            secs(t)
        ),
    });
    let b = check(c, "dilated_bound_equality");
    out.push(Line {
        id: 2,
        passed: b.passed && secs(b) < BUDGET_BOUND,
        text: format!(
            "|bound gap| {:e} (≤ {:e}), {:.2}s (< {BUDGET_BOUND}s)",
            b.observed,
            b.tolerance,
            secs(b)
        ),
    });
    let (p, q) = (
        check(c, "analytic_recursion_posterior"),
        check(c, "analytic_recursion_prior"),
    );
    out.push(Line {
        id: 3,
        passed: p.passed && q.passed && secs(p) + secs(q) < BUDGET_RECURSION,
        text: format!(
            "posterior {:.3}, prior {:.3} (≤ 1 means |z| ≤ 3 and variance within 5%), {:.2}s (< {BUDGET_RECURSION}s)",
            p.observed,
            q.observed,
            secs(p) + secs(q)
        ),
    });
    let g = check(c, "bound_gradient");
    out.push(Line {
        id: 4,
        passed: g.passed && secs(g) < BUDGET_GRADIENT,
        text: format!(
            "max relative error {:e} (< {:e}), {:.2}s (< {BUDGET_GRADIENT}s)",
            g.observed,
            g.tolerance,
            secs(g)
        ),
    });
    let (f, m) = (
        check(c, "fullmc_cross_step_correlation"),
        check(c, "prssm_cross_step_correlation"),
    );
    out.push(Line {
        id: 7,
        passed: f.passed && m.passed && secs(f) + secs(m) < BUDGET_CORRELATION,
        text: format!(
            "FullMC correlation {:.4} (> {}), PRSSM |correlation| {:.4} (< {}), {:.2}s (< {BUDGET_CORRELATION}s)",
            f.observed,
            f.tolerance,
            m.observed,
            m.tolerance,
            secs(f) + secs(m)
        ),
    });
    out
}

fn ordering_line() -> Line {
    let start = Instant::now();
    let cfg = desk();
    let mixed = MultiScaleConfig::default();
    let (slow, fast) = (MultiScaleConfig::slow_only(), MultiScaleConfig::fast_only());
    let mr = mean(&arm(&mixed, "R=20:d=2,R=1:d=2", &cfg));
    let mc1 = mean(&arm(&mixed, "R=1:d=2,R=1:d=2", &cfg));
    let mc20 = mean(&arm(&mixed, "R=20:d=2,R=20:d=2", &cfg));
    let s20 = mean(&arm(&slow, "R=20:d=2", &cfg));
    let s1 = mean(&arm(&slow, "R=1:d=2", &cfg));
    let f1 = mean(&arm(&fast, "R=1:d=2", &cfg));
    let f20 = mean(&arm(&fast, "R=20:d=2", &cfg));
    let secs = start.elapsed().as_secs_f64();
    Line {
        id: 5,
        passed: mr < mc1 && mr < mc20 && s20 < s1 && f1 < f20 && secs <= BUDGET_ORDERING,
        text: format!(
            "mixed MR {mr:.3} < MC[1,1] {mc1:.3} and < MC[20,20] {mc20:.3}; slow R=20 {s20:.3} < R=1 {s1:.3}; \
             fast R=1 {f1:.3} < R=20 {f20:.3}; {secs:.0}s (≤ {BUDGET_ORDERING}s)"
        ),
    }
}

fn batch_line() -> Line {
    let start = Instant::now();
    let slow = MultiScaleConfig::slow_only();
    // Equal compute: both arms simulate about 1000 transitions per iteration.
    let mut coarse = desk();
    coarse.train.batch = 50;
    coarse.train.minibatches_per_iter = 20;
    let mut fine = desk();
    fine.train.batch = 1000;
    fine.train.minibatches_per_iter = 1;
    let a = arm(&slow, "R=20:d=2", &coarse);
    let b = arm(&slow, "R=1:d=2", &fine);
    let secs = start.elapsed().as_secs_f64();
    let (ma, mb) = (
        mean_rmse_with_exclusions(&a, 1),
        mean_rmse_with_exclusions(&b, 1),
    );
    let passed = matches!((ma, mb), (Some((x, _)), Some((y, _))) if x < y) && secs <= BUDGET_BATCH;
    let show = |m: Option<(f64, usize)>| match m {
        Some((v, k)) => format!("{v:.3} ({k} excluded)"),
        None => "too many diverged runs".into(),
    };
    Line {
        id: 6,
        passed,
        text: format!(
            "(R=20, B=50) {} < (R=1, B=1000) {}; {secs:.0}s (≤ {BUDGET_BATCH}s)",
            show(ma),
            show(mb)
        ),
    }
}

fn run_train(dir: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_mrgpssm"))
        .arg("train")
        .args(args)
        .current_dir(dir)
        .status()
        .unwrap();
    assert!(status.success());
}

fn determinism_line() -> Line {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = gen_multiscale(
        &MultiScaleConfig {
            t: 400,
            ..MultiScaleConfig::default()
        },
        &RngStream::new(8),
    )
    .unwrap()
    .data;
    write_csv(&dir.join("d.csv"), &data).unwrap();
    let common = [
        "--cycles",
        "2",
        "--iters",
        "10",
        "--batch",
        "20",
        "--minibatches",
        "2",
        "--inducing",
        "8",
    ];
    let mut first = vec![
        "--data",
        "d.csv",
        "--components",
        "R=5:d=1,R=1:d=1",
        "--seed",
        "4",
        "--out",
        "a",
    ];
    first.extend(common);
    run_train(dir, &first);
    run_train(dir, &["--manifest", "a/manifest.json", "--out", "b"]);
    let (x, y) = (
        std::fs::read(dir.join("a/model.json")).unwrap(),
        std::fs::read(dir.join("b/model.json")).unwrap(),
    );
    Line {
        id: 8,
        passed: x == y,
        text: format!(
            "model JSON from a manifest replay is byte-identical: {} ({} bytes)",
            x == y,
            x.len()
        ),
    }
}

#[test]
fn acceptance_criteria() {
    let mut lines = verification_lines();
    lines.push(ordering_line());
    lines.push(batch_line());
    lines.push(determinism_line());
    lines.sort_by_key(|l| l.id);
    for l in &lines {
        report(l);
    }
    let failed: Vec<u32> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
