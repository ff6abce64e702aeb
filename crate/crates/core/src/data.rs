//! Synthetic data sources, normalization and CSV I/O.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ColumnTransform, Dataset, Normalization};
use crate::rng::RngStream;

/// Columns whose standard deviation falls below this are left unscaled.
const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumConfig {
    pub g_over_l: f64,
    pub damping: f64,
    pub diffusion: f64,
    pub dt_sim: f64,
    pub subsample: usize,
    pub t_out: usize,
    pub obs_noise: f64,
    pub theta0: f64,
    pub omega0: f64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            g_over_l: 9.81,
            damping: 0.25,
            diffusion: 0.1,
            dt_sim: 1e-3,
            subsample: 10,
            t_out: 2000,
            obs_noise: 0.01,
            theta0: 1.0,
            omega0: 0.0,
        }
    }
}

impl PendulumConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.g_over_l > 0.0
            && self.damping >= 0.0
            && self.diffusion >= 0.0
            && self.dt_sim > 0.0
            && self.obs_noise >= 0.0
            && self.subsample > 0
            && self.t_out >= 2
            && self.dt_sim * self.g_over_l.sqrt() < 0.1;
        if !ok {
            return Err(Error::InvalidParameter(
                "pendulum config out of range".into(),
            ));
        }
        Ok(())
    }
}

/// Noisy damped pendulum. Returns the dataset (`y = θ + noise`, no inputs)
/// and the clean `(θ, ω)` path at the output times.
pub fn gen_pendulum(cfg: &PendulumConfig, rng: &RngStream) -> Result<(Dataset, DMatrix<f64>)> {
    cfg.validate()?;
    let (dense, _) = pendulum_dense(cfg, (cfg.t_out - 1) * cfg.subsample + 1, rng);
    let t = cfg.t_out;
    let truth = DMatrix::from_fn(t, 2, |k, j| dense[(k * cfg.subsample, j)]);
    let y = DMatrix::from_fn(t, 1, |k, _| {
        let idx = (k * cfg.subsample) as u64;
        truth[(k, 0)] + cfg.obs_noise * rng.derive(&[1, idx]).standard_normal()
    });
    let u = DMatrix::zeros(t, 0);
    let data = Dataset::new(y, u, cfg.dt_sim * cfg.subsample as f64)?;
    Ok((data, truth))
}

/// Semi-implicit Euler–Maruyama path with `n` points (initial state first)
/// and the energy at each point.
pub fn pendulum_dense(cfg: &PendulumConfig, n: usize, rng: &RngStream) -> (DMatrix<f64>, Vec<f64>) {
    let mut noise = rng.derive(&[0]);
    let h = cfg.dt_sim;
    let energy = |th: f64, om: f64| 0.5 * om * om + cfg.g_over_l * (1.0 - th.cos());
    let mut path = DMatrix::zeros(n, 2);
    let mut e = Vec::with_capacity(n);
    let (mut th, mut om) = (cfg.theta0, cfg.omega0);
    for i in 0..n {
        path[(i, 0)] = th;
        path[(i, 1)] = om;
        e.push(energy(th, om));
        let dw = if cfg.diffusion > 0.0 {
            noise.standard_normal() * h.sqrt()
        } else {
            0.0
        };
        om += (-cfg.g_over_l * th.sin() - cfg.damping * om) * h + cfg.diffusion * dw;
        th += om * h;
    }
    (path, e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FastConfig {
    /// Resonance period in steps.
    pub period: f64,
    pub amplitude: f64,
    pub input_gain: f64,
    /// Pole radius of the resonator, in `(0, 1)`.
    pub damping: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlowConfig {
    /// Period of the slow driving input, in steps.
    pub period: f64,
    pub amplitude: f64,
    /// Time constant of the first-order response to the driving input.
    pub time_constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiScaleConfig {
    pub t: usize,
    pub fast: FastConfig,
    pub slow: SlowConfig,
    pub obs_noise: f64,
    pub input_dim: usize,
    /// Correlation time of the inputs, in steps.
    pub input_smoothing: f64,
}

impl Default for FastConfig {
    fn default() -> Self {
        Self {
            period: 12.0,
            amplitude: 1.0,
            input_gain: 1.0,
            damping: 0.8,
        }
    }
}

impl Default for SlowConfig {
    fn default() -> Self {
        Self {
            period: 600.0,
            amplitude: 1.0,
            time_constant: 100.0,
        }
    }
}

impl Default for MultiScaleConfig {
    fn default() -> Self {
        Self {
            t: 4000,
            fast: FastConfig::default(),
            slow: SlowConfig::default(),
            obs_noise: 0.1,
            input_dim: 2,
            input_smoothing: 0.5,
        }
    }
}

impl MultiScaleConfig {
    /// Default configuration with the slow channel switched off.
    pub fn fast_only() -> Self {
        let mut c = Self::default();
        c.slow.amplitude = 0.0;
        c
    }

    /// Default configuration with the fast channel switched off.
    pub fn slow_only() -> Self {
        let mut c = Self::default();
        c.fast.amplitude = 0.0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.t >= 2
            && self.fast.period > 2.0
            && self.slow.period >= 10.0 * self.fast.period
            && self.fast.amplitude >= 0.0
            && self.slow.amplitude >= 0.0
            && self.fast.damping > 0.0
            && self.fast.damping < 1.0
            && self.obs_noise >= 0.0
            && self.input_smoothing > 0.0
            && self.slow.time_constant >= 1.0;
        if !ok {
            return Err(Error::InvalidParameter(
                "multiscale config out of range".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScale {
    pub data: Dataset,
    /// Columns `fast`, `slow`.
    pub truth: DMatrix<f64>,
    /// Realized observation noise.
    pub noise: DMatrix<f64>,
}

/// Sum of two input-driven channels plus noise. The fast channel is a
/// resonator driven by input 1 (internal white noise without inputs); the
/// slow channel is a first-order lag of input 2, a sinusoid at the slow
/// period with random phase (internal when fewer than two inputs).
pub fn gen_multiscale(cfg: &MultiScaleConfig, rng: &RngStream) -> Result<MultiScale> {
    cfg.validate()?;
    let t = cfg.t;
    let a = (-1.0 / cfg.input_smoothing).exp();
    let b = (1.0 - a * a).sqrt();
    let fast_drive: Vec<f64> = {
        let mut r = rng.derive(&[0, 0]);
        let mut v = r.standard_normal();
        (0..t)
            .map(|_| {
                let out = v;
                v = a * v + b * r.standard_normal();
                out
            })
            .collect()
    };
    let phase = rng.derive(&[2]).uniform() * 2.0 * PI;
    let slow_drive: Vec<f64> = (0..t)
        .map(|i| (2.0 * PI * i as f64 / cfg.slow.period + phase).sin() * std::f64::consts::SQRT_2)
        .collect();
    let mut u = DMatrix::zeros(t, cfg.input_dim);
    for j in 0..cfg.input_dim {
        match j {
            0 => u.column_mut(0).copy_from_slice(&fast_drive),
            1 => u.column_mut(1).copy_from_slice(&slow_drive),
            _ => {
                let mut r = rng.derive(&[0, j as u64]);
                let mut v = r.standard_normal();
                for i in 0..t {
                    u[(i, j)] = v;
                    v = a * v + b * r.standard_normal();
                }
            }
        }
    }
    let fast_drive = if cfg.input_dim > 0 {
        fast_drive
    } else {
        rng.derive(&[1]).normals(t)
    };

    let rho = cfg.fast.damping;
    // Pole angle chosen so the gain of the resonator peaks at the period.
    let cos_pole =
        (2.0 * rho * (2.0 * PI / cfg.fast.period).cos() / (1.0 + rho * rho)).clamp(-1.0, 1.0);
    let c1 = 2.0 * rho * cos_pole;
    let c2 = -rho * rho;
    let mut fast = vec![0.0; t];
    let mut slow = vec![0.0; t];
    let lag = 1.0 / cfg.slow.time_constant;
    for i in 0..t {
        let prev = if i >= 1 { fast[i - 1] } else { 0.0 };
        let prev2 = if i >= 2 { fast[i - 2] } else { 0.0 };
        let input = if i >= 1 { fast_drive[i - 1] } else { 0.0 };
        fast[i] = c1 * prev + c2 * prev2 + cfg.fast.input_gain * input;
        slow[i] = if i >= 1 {
            slow[i - 1] + lag * (slow_drive[i - 1] - slow[i - 1])
        } else {
            slow_drive[0]
        };
    }
    let scale_of = |v: &[f64], amp: f64| {
        let sd = std_of(v);
        if sd > MIN_STD {
            amp / sd
        } else {
            0.0
        }
    };
    let fast_scale = scale_of(&fast, cfg.fast.amplitude);
    let slow_scale = scale_of(&slow, cfg.slow.amplitude);

    let mut noise_rng = rng.derive(&[3]);
    let mut truth = DMatrix::zeros(t, 2);
    let mut noise = DMatrix::zeros(t, 1);
    let mut y = DMatrix::zeros(t, 1);
    for i in 0..t {
        truth[(i, 0)] = fast[i] * fast_scale;
        truth[(i, 1)] = slow[i] * slow_scale;
        noise[(i, 0)] = cfg.obs_noise * noise_rng.standard_normal();
        y[(i, 0)] = truth[(i, 0)] + truth[(i, 1)] + noise[(i, 0)];
    }
    Ok(MultiScale {
        data: Dataset::new(y, u, 1.0)?,
        truth,
        noise,
    })
}

fn std_of(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn column_transform(col: &[f64], name: &str) -> ColumnTransform {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let std = std_of(col);
    if std > MIN_STD {
        ColumnTransform { mean, std }
    } else {
        log::warn!("column {name} has zero variance; only the mean is removed");
        ColumnTransform { mean, std: 1.0 }
    }
}

/// Statistics (population standard deviation) of every column.
pub fn fit_normalization(data: &Dataset) -> Normalization {
    let cols = |m: &DMatrix<f64>, p: &str| -> Vec<ColumnTransform> {
        (0..m.ncols())
            .map(|j| {
                let c: Vec<f64> = m.column(j).iter().copied().collect();
                column_transform(&c, &format!("{p}{}", j + 1))
            })
            .collect()
    };
    Normalization {
        u: cols(&data.u, "u"),
        y: cols(&data.y, "y"),
    }
}

/// Applies `norm` and records it on the returned dataset.
pub fn apply_normalization(data: &Dataset, norm: &Normalization) -> Result<Dataset> {
    if norm.u.len() != data.input_dim() || norm.y.len() != data.out_dim() {
        return Err(Error::DimensionMismatch(
            "normalization does not match the dataset".into(),
        ));
    }
    let mut out = data.clone();
    for (j, tr) in norm.u.iter().enumerate() {
        out.u.column_mut(j).apply(|v| *v = (*v - tr.mean) / tr.std);
    }
    for (j, tr) in norm.y.iter().enumerate() {
        out.y.column_mut(j).apply(|v| *v = (*v - tr.mean) / tr.std);
    }
    out.normalization = Some(norm.clone());
    Ok(out)
}

/// Zero mean, unit variance per column.
pub fn normalize(data: &Dataset) -> Result<Dataset> {
    apply_normalization(data, &fit_normalization(data))
}

/// Maps normalized output means and variances back to raw units.
pub fn denormalize_outputs(norm: &Normalization, mean: &mut DMatrix<f64>, var: &mut DMatrix<f64>) {
    for (j, tr) in norm.y.iter().enumerate() {
        mean.column_mut(j).apply(|v| *v = *v * tr.std + tr.mean);
        var.column_mut(j).apply(|v| *v *= tr.std * tr.std);
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Parses the header into `(D_u, D_y)`.
fn parse_header(h: &csv::StringRecord) -> Result<(usize, usize)> {
    let names: Vec<&str> = h.iter().map(str::trim).collect();
    if names.first() != Some(&"t") {
        return Err(Error::MalformedHeader("first column must be t".into()));
    }
    let count = |prefix: &str| names.iter().filter(|n| n.starts_with(prefix)).count();
    let (du, dy) = (count("u"), count("y"));
    if dy == 0 {
        return Err(Error::MalformedHeader("missing column y1".into()));
    }
    let expected: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=du).map(|i| format!("u{i}")))
        .chain((1..=dy).map(|i| format!("y{i}")))
        .collect();
    for (i, want) in expected.iter().enumerate() {
        if names.get(i) != Some(&want.as_str()) {
            return Err(Error::MalformedHeader(format!("missing column {want}")));
        }
    }
    if names.len() != expected.len() {
        return Err(Error::MalformedHeader(format!(
            "unexpected column {}",
            names[expected.len()]
        )));
    }
    Ok((du, dy))
}

pub fn read_csv_from<R: std::io::Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let (du, dy) = parse_header(&header)?;
    let mut times = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 1 + du + dy {
            return Err(Error::MalformedHeader(format!(
                "row {row} has {} fields",
                rec.len()
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::NonFiniteValue {
                row,
                column: header[j].to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    row,
                    column: header[j].to_string(),
                });
            }
            if j == 0 {
                times.push(v);
            } else {
                vals.push(v);
            }
        }
    }
    let t = times.len();
    if t < 2 {
        return Err(Error::InvalidParameter(
            "dataset needs at least two rows".into(),
        ));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(Error::NonUniformSpacing { row: 1 });
    }
    for i in 2..t {
        let d = times[i] - times[i - 1];
        if (d - dt).abs() > 1e-9 * dt.abs().max(times[i].abs()) {
            return Err(Error::NonUniformSpacing { row: i });
        }
    }
    let w = du + dy;
    let u = DMatrix::from_fn(t, du, |i, j| vals[i * w + j]);
    let y = DMatrix::from_fn(t, dy, |i, j| vals[i * w + du + j]);
    let mut data = Dataset::new(y, u, dt)?;
    data.times = times;
    Ok(data)
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_csv_from(f)
}

pub fn write_csv_to<W: std::io::Write>(writer: W, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=data.input_dim()).map(|i| format!("u{i}")))
        .chain((1..=data.out_dim()).map(|i| format!("y{i}")))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let row: Vec<String> = std::iter::once(data.times[i])
            .chain(data.u.row(i).iter().copied())
            .chain(data.y.row(i).iter().copied())
            .map(|v| format!("{v:?}"))
            .collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let f =
        std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    write_csv_to(f, data)
}

/// Writes named columns with a leading `t` column.
pub fn write_columns(
    path: &Path,
    times: &[f64],
    names: &[&str],
    cols: &DMatrix<f64>,
) -> Result<()> {
    let f =
        std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut w = csv::Writer::from_writer(f);
    let header: Vec<&str> = std::iter::once("t").chain(names.iter().copied()).collect();
    w.write_record(&header).map_err(csv_err)?;
    for (i, t) in times.iter().enumerate() {
        let row: Vec<String> = std::iter::once(*t)
            .chain(cols.row(i).iter().copied())
            .map(|v| format!("{v:?}"))
            .collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}
