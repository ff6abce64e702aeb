//! Free-run prediction and scoring.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::LN_2PI;
use crate::model::{Dataset, Model};
use crate::rng::RngStream;
use crate::sampling::{sample_seq_fullmc, LatentPath};

/// Moment-matched predictive distribution per row and output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
}

/// Free-run sample paths of every component from `q(x_0)` at stride 1 over
/// the rows of `data`.
pub fn simulate_components(
    model: &Model,
    data: &Dataset,
    samples: usize,
    rng: &RngStream,
) -> Result<Vec<LatentPath>> {
    if data.input_dim() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} inputs, data has {}",
            model.input_dim(),
            data.input_dim()
        )));
    }
    let t = data.len();
    let u_window = DMatrix::from_fn(t, data.input_dim(), |k, j| data.u[(k.saturating_sub(1), j)]);
    model
        .components
        .iter()
        .enumerate()
        .map(|(l, c)| {
            sample_seq_fullmc(
                c,
                &u_window,
                model.dt,
                model.dt,
                t,
                0,
                samples,
                &mut rng.derive(&[l as u64]),
            )
        })
        .collect()
}

/// Predictive mean and variance: across-sample moments of the summed
/// emissions plus the observation noise.
pub fn predict(
    model: &Model,
    data: &Dataset,
    samples: usize,
    rng: &RngStream,
) -> Result<Prediction> {
    if samples == 0 {
        return Err(Error::InvalidParameter("need at least one sample".into()));
    }
    let paths = simulate_components(model, data, samples, rng)?;
    let (t, dy) = (data.len(), model.out_dim());
    let mut mean = DMatrix::<f64>::zeros(t, dy);
    let mut m2 = DMatrix::<f64>::zeros(t, dy);
    // Welford updates keep identical samples at exactly zero spread.
    for s in 0..samples {
        let k = (s + 1) as f64;
        for i in 0..t {
            for o in 0..dy {
                let y: f64 = paths.iter().map(|p| p.samples[s][(i, o)]).sum();
                let delta = y - mean[(i, o)];
                mean[(i, o)] += delta / k;
                m2[(i, o)] += delta * (y - mean[(i, o)]);
            }
        }
    }
    let var = DMatrix::from_fn(t, dy, |i, o| {
        m2[(i, o)] / samples as f64 + model.emission.obs_noise[o]
    });
    Ok(Prediction { mean, var })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub nll: f64,
}

fn check_shapes(pred: &Prediction, y: &DMatrix<f64>) -> Result<()> {
    if pred.mean.shape() != y.shape() || pred.var.shape() != y.shape() {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {:?}, targets are {:?}",
            pred.mean.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// Root mean squared error over rows and outputs.
pub fn rmse(pred: &Prediction, y: &DMatrix<f64>) -> Result<f64> {
    check_shapes(pred, y)?;
    Ok(((&pred.mean - y).map(|v| v * v).sum() / y.len() as f64).sqrt())
}

/// Mean over rows of the Gaussian negative log density, summed over outputs.
pub fn nll(pred: &Prediction, y: &DMatrix<f64>) -> Result<f64> {
    check_shapes(pred, y)?;
    let mut acc = 0.0;
    for i in 0..y.nrows() {
        for o in 0..y.ncols() {
            let v = pred.var[(i, o)];
            acc += 0.5 * (LN_2PI + v.ln() + (y[(i, o)] - pred.mean[(i, o)]).powi(2) / v);
        }
    }
    Ok(acc / y.nrows() as f64)
}

pub fn score(pred: &Prediction, y: &DMatrix<f64>) -> Result<Metrics> {
    Ok(Metrics {
        rmse: rmse(pred, y)?,
        nll: nll(pred, y)?,
    })
}

impl Prediction {
    /// Rows `[start, end)`.
    pub fn rows(&self, start: usize, end: usize) -> Prediction {
        Prediction {
            mean: self.mean.rows(start, end - start).into_owned(),
            var: self.var.rows(start, end - start).into_owned(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::tests::tiny_model;
    use nalgebra::DVector;

    #[test]
    fn metric_closed_forms() {
        let y = DMatrix::from_row_slice(3, 2, &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
        let perfect = Prediction {
            mean: y.clone(),
            var: DMatrix::from_element(3, 2, 1.0),
        };
        assert_eq!(rmse(&perfect, &y).unwrap(), 0.0);
        assert!((nll(&perfect, &y).unwrap() - LN_2PI).abs() < 1e-15);

        let ones = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let z1 = Prediction {
            mean: DMatrix::zeros(2, 1),
            var: DMatrix::from_element(2, 1, 1.0),
        };
        assert!((rmse(&z1, &ones).unwrap() - 1.0).abs() < 1e-15);
        assert!(rmse(&z1, &y).is_err());
    }

    #[test]
    fn hand_computed_metrics() {
        let y = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let p = Prediction {
            mean: DMatrix::from_row_slice(2, 1, &[0.5, 2.5]),
            var: DMatrix::from_row_slice(2, 1, &[0.25, 4.0]),
        };
        assert!((rmse(&p, &y).unwrap() - 0.5).abs() < 1e-15);
        // Row 1: 0.5(ln2π + ln .25 + 1); row 2: 0.5(ln2π + ln 4 + 1/16).
        let expected =
            0.5 * (0.5 * (LN_2PI + 0.25f64.ln() + 1.0) + 0.5 * (LN_2PI + 4f64.ln() + 0.0625));
        assert!((nll(&p, &y).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn deterministic_model_has_variance_omega() {
        let mut rng = RngStream::new(1);
        let mut model = tiny_model(&mut rng, &[1], 0, 3, 1.0);
        let c = &mut model.components[0];
        c.q_diag = DVector::from_element(1, 1e-300);
        c.s0_chol = DMatrix::zeros(1, 1);
        c.q_fm[0].chol = DMatrix::zeros(3, 3);
        c.kernels[0].variance = 1e-300;
        model.emission.obs_noise = vec![0.3];
        let data = Dataset::new(DMatrix::zeros(10, 1), DMatrix::zeros(10, 0), 1.0).unwrap();
        let p = predict(&model, &data, 5, &RngStream::new(2)).unwrap();
        assert!(p.var.iter().all(|v| *v == 0.3), "{:?}", p.var);
    }

    #[test]
    fn prediction_composes_components_and_is_reproducible() {
        let mut rng = RngStream::new(3);
        let model = tiny_model(&mut rng, &[2, 1], 1, 3, 1.0);
        let data = Dataset::new(
            DMatrix::zeros(12, 1),
            DMatrix::from_fn(12, 1, |i, _| (i as f64).sin()),
            1.0,
        )
        .unwrap();
        let seed = RngStream::new(4);
        let p = predict(&model, &data, 7, &seed).unwrap();
        assert_eq!(p, predict(&model, &data, 7, &seed).unwrap());
        let paths = simulate_components(&model, &data, 7, &seed).unwrap();
        for i in 0..12 {
            let ys: Vec<f64> = (0..7)
                .map(|s| paths[0].samples[s][(i, 0)] + paths[1].samples[s][(i, 0)])
                .collect();
            let m = ys.iter().sum::<f64>() / 7.0;
            let v =
                ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / 7.0 + model.emission.obs_noise[0];
            assert!((p.mean[(i, 0)] - m).abs() < 1e-12);
            assert!((p.var[(i, 0)] - v).abs() < 1e-12);
        }
        let few = predict(&model, &data, 1, &seed).unwrap();
        assert_ne!(few.var, p.var);
    }
}
