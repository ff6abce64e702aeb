//! Train-then-forecast protocol shared by the CLI and the acceptance runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{apply_normalization, fit_normalization};
use crate::error::{Error, Result};
use crate::inference::Window;
use crate::model::{ComponentParams, Dataset, EmissionParams, InitConfig, Model};
use crate::predict::{predict, score, Metrics, Prediction};
use crate::rng::RngStream;
use crate::trainer::{backfit, IterRecord, TrainConfig};

/// Test-set RMSE above which a run counts as diverged (normalized units).
pub const DIVERGED_RMSE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub resolution: usize,
    pub dim: usize,
}

/// Component list such as `R=30:d=2,R=1:d=2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentList(pub Vec<ComponentSpec>);

impl FromStr for ComponentList {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |part: &str| {
            Error::InvalidParameter(format!("bad component `{part}`, expected R=<int>:d=<int>"))
        };
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim) {
            let (mut r, mut d) = (None, None);
            for kv in part.split(':') {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(part))?;
                let v: usize = v.trim().parse().map_err(|_| bad(part))?;
                match k.trim() {
                    "R" if r.is_none() => r = Some(v),
                    "d" if d.is_none() => d = Some(v),
                    _ => return Err(bad(part)),
                }
            }
            match (r, d) {
                (Some(r), Some(d)) if r >= 1 && d >= 1 => out.push(ComponentSpec {
                    resolution: r,
                    dim: d,
                }),
                _ => return Err(bad(part)),
            }
        }
        Ok(Self(out))
    }
}

impl fmt::Display for ComponentList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|c| format!("R={}:d={}", c.resolution, c.dim))
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub init: InitConfig,
    pub obs_noise_init: f64,
    pub train: TrainConfig,
    /// Leading fraction of rows used for training.
    pub train_fraction: f64,
    pub pred_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            init: InitConfig::default(),
            obs_noise_init: 1.0,
            train: TrainConfig::default(),
            train_fraction: 0.5,
            pred_samples: 50,
        }
    }
}

pub fn build_model(
    comps: &ComponentList,
    input_dim: usize,
    out_dim: usize,
    dt: f64,
    init: &InitConfig,
    obs_noise: f64,
    rng: &RngStream,
) -> Result<Model> {
    if comps.0.is_empty() {
        return Err(Error::InvalidParameter(
            "at least one component is required".into(),
        ));
    }
    let components = comps
        .0
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            if spec.dim < out_dim {
                return Err(Error::DimensionMismatch(format!(
                    "component {l} has {} latent dims but the data has {out_dim} outputs",
                    spec.dim
                )));
            }
            ComponentParams::init(
                spec.dim,
                input_dim,
                spec.resolution,
                init,
                &mut rng.derive(&[l as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Model::new(components, EmissionParams::new(out_dim, obs_noise), dt)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Model,
    pub history: Vec<IterRecord>,
    /// Prediction over the whole series, normalized units.
    pub prediction: Prediction,
    pub test_metrics: Metrics,
    pub train_rows: usize,
}

impl RunResult {
    pub fn diverged(&self) -> bool {
        !(self.test_metrics.rmse.is_finite() && self.test_metrics.rmse <= DIVERGED_RMSE)
    }
}

/// Number of leading rows used for training.
pub fn train_rows(len: usize, fraction: f64) -> Result<usize> {
    let n = (len as f64 * fraction).round() as usize;
    if !(fraction > 0.0 && fraction < 1.0) || n < 2 || n + 1 > len {
        return Err(Error::InvalidParameter(format!(
            "train fraction {fraction} leaves no train or test rows"
        )));
    }
    Ok(n)
}

/// Fails with [`Error::WindowTooLong`] if some component's dilated window
/// does not fit in `len` rows.
pub fn check_windows(len: usize, comps: &ComponentList, batch: usize) -> Result<()> {
    for c in &comps.0 {
        Window {
            start: 0,
            stride: c.resolution,
            batch,
            buffer: 0,
        }
        .check(len)?;
    }
    Ok(())
}

/// Normalizes `raw` with its own statistics and trains a fresh model on it.
/// The returned model carries the normalization.
pub fn fit(
    raw: &Dataset,
    comps: &ComponentList,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Model, Vec<IterRecord>)> {
    check_windows(raw.len(), comps, cfg.train.batch)?;
    let norm = fit_normalization(raw);
    let data = apply_normalization(raw, &norm)?;
    let root = RngStream::new(seed);
    let mut model = build_model(
        comps,
        data.input_dim(),
        data.out_dim(),
        data.dt,
        &cfg.init,
        cfg.obs_noise_init,
        &root.derive(&[0]),
    )?;
    model.normalization = Some(norm);
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    backfit(&model, &data, &train_cfg, &mut root.derive(&[1]))
}

/// Stream used for prediction by a run with root seed `seed`.
pub fn prediction_stream(seed: u64) -> RngStream {
    RngStream::new(seed).derive(&[2])
}

/// Trains on the leading split (normalized with its statistics), free-runs
/// over the whole series and scores the remaining rows.
pub fn fit_and_score(
    raw: &Dataset,
    comps: &ComponentList,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<RunResult> {
    let n_train = train_rows(raw.len(), cfg.train_fraction)?;
    let (model, history) = fit(&raw.slice(0, n_train)?, comps, cfg, seed)?;
    let norm = model
        .normalization
        .as_ref()
        .expect("fit stores the normalization");
    let data = apply_normalization(raw, norm)?;
    let prediction = predict(&model, &data, cfg.pred_samples, &prediction_stream(seed))?;
    let test_metrics = score(
        &prediction.rows(n_train, data.len()),
        &data.y.rows(n_train, data.len() - n_train).into_owned(),
    )?;
    Ok(RunResult {
        model,
        history,
        prediction,
        test_metrics,
        train_rows: n_train,
    })
}

/// Mean RMSE over runs, dropping at most `max_excluded` diverged runs.
/// Returns `(mean, excluded)`, or `None` if too many runs diverged.
pub fn mean_rmse_with_exclusions(rmses: &[f64], max_excluded: usize) -> Option<(f64, usize)> {
    let kept: Vec<f64> = rmses
        .iter()
        .copied()
        .filter(|r| r.is_finite() && *r <= DIVERGED_RMSE)
        .collect();
    let excluded = rmses.len() - kept.len();
    if excluded > max_excluded || kept.is_empty() {
        return None;
    }
    Some((kept.iter().sum::<f64>() / kept.len() as f64, excluded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn component_strings() {
        let c: ComponentList = "R=30:d=2, R=1:d=2".parse().unwrap();
        assert_eq!(
            c.0,
            vec![
                ComponentSpec {
                    resolution: 30,
                    dim: 2
                },
                ComponentSpec {
                    resolution: 1,
                    dim: 2
                }
            ]
        );
        assert_eq!(c.to_string(), "R=30:d=2,R=1:d=2");
        assert_eq!(
            "d=4:R=1".parse::<ComponentList>().unwrap().0,
            vec![ComponentSpec {
                resolution: 1,
                dim: 4
            }]
        );
        for bad in ["", "R=0:d=2", "R=1", "R=1:d=x", "R=1:d=2:R=3", "Q=1:d=1"] {
            assert!(bad.parse::<ComponentList>().is_err(), "{bad}");
        }
    }

    #[test]
    fn exclusions() {
        assert_eq!(
            mean_rmse_with_exclusions(&[1.0, 2.0, f64::NAN], 1),
            Some((1.5, 1))
        );
        assert_eq!(mean_rmse_with_exclusions(&[1.0, 9.0, f64::NAN], 1), None);
        assert_eq!(mean_rmse_with_exclusions(&[1.0, 3.0], 0), Some((2.0, 0)));
    }

    #[test]
    fn small_end_to_end_run() {
        let y = DMatrix::from_fn(120, 1, |i, _| 2.0 + (i as f64 * 0.2).sin());
        let raw = Dataset::new(y, DMatrix::zeros(120, 0), 1.0).unwrap();
        let cfg = ExperimentConfig {
            init: InitConfig {
                num_inducing: 4,
                ..InitConfig::default()
            },
            train: TrainConfig {
                cycles: 1,
                iters_per_component: 3,
                batch: 10,
                buffer: 2,
                samples: 2,
                minibatches_per_iter: 1,
                cache_samples: 2,
                ..TrainConfig::default()
            },
            pred_samples: 4,
            ..ExperimentConfig::default()
        };
        let comps: ComponentList = "R=5:d=1,R=1:d=1".parse().unwrap();
        let a = fit_and_score(&raw, &comps, &cfg, 3).unwrap();
        let b = fit_and_score(&raw, &comps, &cfg, 3).unwrap();
        assert_eq!(a.model.to_json().unwrap(), b.model.to_json().unwrap());
        assert_eq!(a.train_rows, 60);
        assert_eq!(a.prediction.mean.nrows(), 120);
        assert!(a.test_metrics.rmse.is_finite());
        assert!(a.model.normalization.is_some());
        let long: ComponentList = "R=20:d=1".parse().unwrap();
        assert!(matches!(
            fit_and_score(&raw, &long, &cfg, 1),
            Err(Error::WindowTooLong { needed: 200, .. })
        ));
        let wide: ComponentList = "R=1:d=1".parse().unwrap();
        let two = Dataset::new(DMatrix::zeros(40, 2), DMatrix::zeros(40, 0), 1.0).unwrap();
        assert!(matches!(
            fit_and_score(&two, &wide, &cfg, 1),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
