use std::fs;
use std::path::{Path, PathBuf};

use mrgpssm::data::{
    apply_normalization, denormalize_outputs, gen_multiscale, gen_pendulum, read_csv,
    write_columns, write_csv, MultiScaleConfig, PendulumConfig,
};
use mrgpssm::experiment::{fit, fit_and_score, prediction_stream, ComponentList, ExperimentConfig};
use mrgpssm::model::{Dataset, Model};
use mrgpssm::predict::{predict as run_predict, score, Prediction};
use mrgpssm::rng::RngStream;
use mrgpssm::trainer::write_log;
use mrgpssm::verify::{run_all, Mutation};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::failure::{CliResult, Failure, EXIT_FAILED};
use crate::manifest::{git_describe, now_unix_ms, sha256_file, FileDigest, RunManifest};
use crate::{
    EvalArgs, GridArgs, Kind, MutationArg, PredictArgs, SimulateArgs, TrainArgs, TrainOpts,
    VerifyArgs,
};

fn io_fail(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_FAILED, format!("{}: {e}", path.display()))
}

fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::config(format!("{}: {e}", p.display())))
        }
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::new(EXIT_FAILED, e.to_string()))?
        + "\n";
    match out {
        Some(p) => fs::write(p, text).map_err(|e| io_fail(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// `dir/name.csv` → `dir/name_<suffix>.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_{suffix}.{ext}"))
}

fn read_data(path: &Path) -> CliResult<Dataset> {
    read_csv(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn read_model(path: &Path) -> CliResult<Model> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    Model::from_json(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn require_seed(seed: Option<u64>, command: &str) -> CliResult<u64> {
    seed.ok_or_else(|| Failure::config(format!("`{command}` needs --seed")))
}

pub fn simulate(a: &SimulateArgs) -> CliResult {
    let rng = RngStream::new(a.seed);
    let (data, truth, names) = match a.kind {
        Kind::Pendulum => {
            let cfg: PendulumConfig = load_json(a.config.as_deref())?;
            let (d, t) = gen_pendulum(&cfg, &rng).map_err(|e| Failure::config(e.to_string()))?;
            (d, t, ["theta", "omega"])
        }
        Kind::Multiscale => {
            let cfg: MultiScaleConfig = load_json(a.config.as_deref())?;
            let m = gen_multiscale(&cfg, &rng).map_err(|e| Failure::config(e.to_string()))?;
            (m.data, m.truth, ["fast", "slow"])
        }
    };
    write_csv(&a.out, &data)?;
    write_columns(&sibling(&a.out, "truth"), &data.times, &names, &truth)?;
    Ok(())
}

fn experiment_config(opts: &TrainOpts) -> CliResult<ExperimentConfig> {
    Ok(apply_overrides(load_json(opts.config.as_deref())?, opts))
}

pub fn train(a: &TrainArgs) -> CliResult {
    let (data_path, components, seed, cfg) = match &a.manifest {
        Some(m) => {
            let man = RunManifest::read(m)?;
            let digest = sha256_file(&man.data.path)?;
            if digest != man.data.sha256 {
                return Err(Failure::data(format!(
                    "{} changed since the manifest was written",
                    man.data.path.display()
                )));
            }
            // flags still override a replayed configuration
            (
                man.data.path,
                man.components,
                man.seed,
                apply_overrides(man.config, &a.opts),
            )
        }
        None => (
            a.data.clone().expect("clap requires --data"),
            a.components.clone().expect("clap requires --components"),
            require_seed(a.seed, "train")?,
            experiment_config(&a.opts)?,
        ),
    };
    let comps: ComponentList = components
        .parse()
        .map_err(|e: mrgpssm::Error| Failure::config(e.to_string()))?;
    cfg.train
        .validate(comps.0.len())
        .map_err(|e| Failure::config(e.to_string()))?;
    let raw = read_data(&data_path)?;

    fs::create_dir_all(&a.out).map_err(|e| io_fail(&a.out, e))?;
    let model_path = a.out.join("model.json");
    let log_path = a.out.join("train_log.csv");
    let manifest = RunManifest {
        command: "train".into(),
        components: comps.to_string(),
        seed,
        config: cfg.clone(),
        git_describe: git_describe(),
        data: FileDigest {
            sha256: sha256_file(&data_path)?,
            path: data_path,
        },
        outputs: vec![model_path.clone(), log_path.clone()],
        started_unix_ms: now_unix_ms(),
    };
    manifest.write(&a.out.join("manifest.json"))?;

    let (model, history) = fit(&raw, &comps, &cfg, seed)?;
    fs::write(&model_path, model.to_json()? + "\n").map_err(|e| io_fail(&model_path, e))?;
    let f = fs::File::create(&log_path).map_err(|e| io_fail(&log_path, e))?;
    write_log(f, &history)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        log::info!("bound {} -> {}", first.elbo.value, last.elbo.value);
    }
    Ok(())
}

fn apply_overrides(mut cfg: ExperimentConfig, opts: &TrainOpts) -> ExperimentConfig {
    let t = &mut cfg.train;
    for (slot, v) in [
        (&mut t.cycles, opts.cycles),
        (&mut t.iters_per_component, opts.iters),
        (&mut t.batch, opts.batch),
        (&mut t.buffer, opts.buffer),
        (&mut t.samples, opts.samples),
        (&mut t.minibatches_per_iter, opts.minibatches),
        (&mut cfg.init.num_inducing, opts.inducing),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(lr) = opts.lr {
        cfg.train.lr0 = lr;
    }
    cfg
}

/// Predictive moments in the units of the model's normalization.
fn normalized_prediction(
    model: &Model,
    raw: &Dataset,
    samples: usize,
    seed: u64,
) -> CliResult<Prediction> {
    let data = match &model.normalization {
        Some(n) => apply_normalization(raw, n)?,
        None => raw.clone(),
    };
    Ok(run_predict(
        model,
        &data,
        samples,
        &prediction_stream(seed),
    )?)
}

fn prediction_columns(dy: usize) -> Vec<String> {
    (1..=dy)
        .map(|o| format!("mean_y{o}"))
        .chain((1..=dy).map(|o| format!("var_y{o}")))
        .collect()
}

pub fn predict(a: &PredictArgs) -> CliResult {
    let seed = require_seed(a.seed, "predict")?;
    let model = read_model(&a.model)?;
    let raw = read_data(&a.data)?;
    if raw.out_dim() != model.out_dim() {
        return Err(Failure::data(format!(
            "model has {} outputs, data has {}",
            model.out_dim(),
            raw.out_dim()
        )));
    }
    let mut p = normalized_prediction(&model, &raw, a.samples, seed)?;
    if let Some(n) = &model.normalization {
        denormalize_outputs(n, &mut p.mean, &mut p.var);
    }
    let dy = model.out_dim();
    let cols = DMatrix::from_fn(raw.len(), 2 * dy, |i, j| {
        if j < dy {
            p.mean[(i, j)]
        } else {
            p.var[(i, j - dy)]
        }
    });
    let names = prediction_columns(dy);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    write_columns(&a.out, &raw.times, &refs, &cols)?;
    Ok(())
}

fn read_predictions(path: &Path) -> CliResult<(Vec<f64>, Prediction)> {
    let bad = |m: String| Failure::data(format!("{}: {m}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 3 || header.len().is_multiple_of(2) || header[0] != "t" {
        return Err(bad("expected columns t, mean_y1.., var_y1..".into()));
    }
    let dy = (header.len() - 1) / 2;
    if header[1..] != prediction_columns(dy)[..] {
        return Err(bad("expected columns t, mean_y1.., var_y1..".into()));
    }
    let mut times = Vec::new();
    let mut vals = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad number at row {row}")))?;
            vals.push(v);
        }
        times.push(vals[vals.len() - 1 - 2 * dy]);
    }
    let w = 1 + 2 * dy;
    let n = times.len();
    let mean = DMatrix::from_fn(n, dy, |i, j| vals[i * w + 1 + j]);
    let var = DMatrix::from_fn(n, dy, |i, j| vals[i * w + 1 + dy + j]);
    Ok((times, Prediction { mean, var }))
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let raw = read_data(&a.data)?;
    let (_, mut pred) = read_predictions(&a.predictions)?;
    if pred.mean.nrows() != raw.len() || pred.mean.ncols() != raw.out_dim() {
        return Err(Failure::data(format!(
            "predictions are {}x{}, data has {} rows and {} outputs",
            pred.mean.nrows(),
            pred.mean.ncols(),
            raw.len(),
            raw.out_dim()
        )));
    }
    let mut y = raw.y.clone();
    if !a.raw {
        let model = read_model(
            a.model
                .as_deref()
                .expect("clap requires --model without --raw"),
        )?;
        if let Some(n) = &model.normalization {
            if n.y.len() != raw.out_dim() {
                return Err(Failure::data(
                    "normalization does not match the data outputs",
                ));
            }
            for (o, tr) in n.y.iter().enumerate() {
                for i in 0..raw.len() {
                    y[(i, o)] = (y[(i, o)] - tr.mean) / tr.std;
                    pred.mean[(i, o)] = (pred.mean[(i, o)] - tr.mean) / tr.std;
                    pred.var[(i, o)] /= tr.std * tr.std;
                }
            }
        }
    }
    if a.start >= raw.len() {
        return Err(Failure::data(format!(
            "--start {} leaves no rows (data has {})",
            a.start,
            raw.len()
        )));
    }
    let rows = raw.len() - a.start;
    let m = score(
        &pred.rows(a.start, raw.len()),
        &y.rows(a.start, rows).into_owned(),
    )?;
    write_json(&m, a.out.as_deref())
}

#[derive(Serialize)]
struct GridRow {
    resolution: usize,
    rmse: f64,
    nll: f64,
    diverged: bool,
}

pub fn gridsearch(a: &GridArgs) -> CliResult {
    let mut cfg = experiment_config(&a.opts)?;
    if let Some(f) = a.train_fraction {
        cfg.train_fraction = f;
    }
    let mut grid = a.grid.clone();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() || grid.contains(&0) || a.dim == 0 {
        return Err(Failure::config("grid needs resolutions ≥ 1 and --dim ≥ 1"));
    }
    let raw = read_data(&a.data)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &r in &grid {
        let comps: ComponentList = format!("R={r}:d={}", a.dim).parse()?;
        let run = fit_and_score(&raw, &comps, &cfg, a.seed)?;
        log::info!(
            "R={r}: rmse {} nll {}",
            run.test_metrics.rmse,
            run.test_metrics.nll
        );
        rows.push(GridRow {
            resolution: r,
            rmse: run.test_metrics.rmse,
            nll: run.test_metrics.nll,
            diverged: run.diverged(),
        });
    }
    let csv_fail = |p: &Path, e: csv::Error| io_fail(p, e);
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| csv_fail(&a.out, e))?;
    w.write_record(["R", "rmse", "nll", "diverged"])
        .map_err(|e| csv_fail(&a.out, e))?;
    for r in &rows {
        w.write_record([
            r.resolution.to_string(),
            format!("{:?}", r.rmse),
            format!("{:?}", r.nll),
            r.diverged.to_string(),
        ])
        .map_err(|e| csv_fail(&a.out, e))?;
    }
    w.flush().map_err(|e| io_fail(&a.out, e))?;
    let long = sibling(&a.out, "long");
    let mut w = csv::Writer::from_path(&long).map_err(|e| csv_fail(&long, e))?;
    w.write_record(["R", "metric", "value"])
        .map_err(|e| csv_fail(&long, e))?;
    for r in &rows {
        for (name, v) in [("rmse", r.rmse), ("nll", r.nll)] {
            w.write_record([r.resolution.to_string(), name.to_string(), format!("{v:?}")])
                .map_err(|e| csv_fail(&long, e))?;
        }
    }
    w.flush().map_err(|e| io_fail(&long, e))
}

pub fn verify(a: &VerifyArgs) -> CliResult {
    let mutation = match a.mutate {
        MutationArg::None => Mutation::None,
        MutationArg::BrokenKernelRescaling => Mutation::BrokenKernelRescaling,
    };
    let report = run_all(mutation);
    for c in &report.checks {
        eprintln!(
            "{} {} observed {:e} tolerance {:e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.observed,
            c.tolerance
        );
    }
    write_json(&report, a.out.as_deref())?;
    if report.passed {
        Ok(())
    } else {
        Err(Failure::new(EXIT_FAILED, "verification failed"))
    }
}
