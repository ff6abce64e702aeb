//! Backfitting trainer: per-component Adam updates at the component's own
//! resolution, with the other components read from a full-resolution cache.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    frozen_kl, partial_residual, CachedLatents, ElboEstimate, NoiseDraws, Objective, Window,
};
use crate::model::{Dataset, Model};
use crate::params::ParamLayout;
use crate::rng::RngStream;
use crate::sampling::{sample_seq_fullmc, sample_window_start};

/// Consecutive skipped steps after which a component update gives up.
const MAX_CONSECUTIVE_SKIPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub cycles: usize,
    pub iters_per_component: usize,
    pub batch: usize,
    pub buffer: usize,
    pub samples: usize,
    pub minibatches_per_iter: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Samples used when refreshing the latent cache.
    pub cache_samples: usize,
    /// Component update order; `None` means ascending index.
    pub order: Option<Vec<usize>>,
    /// Whether the shared observation noise moves during every update.
    pub train_obs_noise: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cycles: 12,
            iters_per_component: 50,
            batch: 50,
            buffer: 10,
            samples: 20,
            minibatches_per_iter: 20,
            lr0: 0.05,
            lr_decay_factor: 0.99,
            lr_decay_every: 10,
            cache_samples: 20,
            order: None,
            train_obs_noise: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, components: usize) -> Result<()> {
        let positive = [
            ("batch", self.batch),
            ("samples", self.samples),
            ("minibatches_per_iter", self.minibatches_per_iter),
            ("lr_decay_every", self.lr_decay_every),
            ("cache_samples", self.cache_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite())
            || !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0)
        {
            return Err(Error::InvalidParameter(
                "learning rate settings out of range".into(),
            ));
        }
        if let Some(order) = &self.order {
            let mut seen = vec![false; components];
            for &l in order {
                if l >= components || seen[l] {
                    return Err(Error::InvalidParameter(format!(
                        "bad component order {order:?}"
                    )));
                }
                seen[l] = true;
            }
        }
        Ok(())
    }

    fn order(&self, components: usize) -> Vec<usize> {
        self.order
            .clone()
            .unwrap_or_else(|| (0..components).collect())
    }

    pub fn lr(&self, step: usize) -> f64 {
        lr_schedule(step, self.lr0, self.lr_decay_factor, self.lr_decay_every)
    }
}

/// `lr0 · factor^⌊step / every⌋`.
pub fn lr_schedule(step: usize, lr0: f64, factor: f64, every: usize) -> f64 {
    lr0 * factor.powi((step / every.max(1)) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step minimising the loss whose gradient is `grad`.
pub fn adam_step(state: &mut AdamState, theta: &mut [f64], grad: &[f64], lr: f64) {
    state.t += 1;
    let c1 = 1.0 - AdamState::BETA1.powi(state.t as i32);
    let c2 = 1.0 - AdamState::BETA2.powi(state.t as i32);
    for i in 0..theta.len() {
        state.m[i] = AdamState::BETA1 * state.m[i] + (1.0 - AdamState::BETA1) * grad[i];
        state.v[i] = AdamState::BETA2 * state.v[i] + (1.0 - AdamState::BETA2) * grad[i] * grad[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        theta[i] -= lr * mh / (vh.sqrt() + AdamState::EPS);
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub cycle: usize,
    pub component: usize,
    pub iter: usize,
    /// Bound averaged over the step's mini-batches.
    pub elbo: ElboEstimate,
    pub lr: f64,
    pub wall_ms: f64,
    pub skipped: bool,
}

pub fn write_log<W: Write>(mut w: W, history: &[IterRecord]) -> Result<()> {
    let io = |e: std::io::Error| Error::Io(e.to_string());
    writeln!(w, "cycle,component,iter,elbo,lr,wall_ms").map_err(io)?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{:.3}",
            r.cycle, r.component, r.iter, r.elbo.value, r.lr, r.wall_ms
        )
        .map_err(io)?;
    }
    Ok(())
}

/// Mean latent path of component `l` simulated at stride 1 over the whole
/// series (`T × D_l`).
pub fn refresh_cache(
    model: &Model,
    data: &Dataset,
    l: usize,
    samples: usize,
    rng: &mut RngStream,
) -> Result<DMatrix<f64>> {
    let c = &model.components[l];
    let t = data.len();
    // Row k drives the step out of state k; the step out of x_0 reuses row 0.
    let u_window = DMatrix::from_fn(t, data.input_dim(), |k, j| data.u[(k.saturating_sub(1), j)]);
    let path = sample_seq_fullmc(c, &u_window, model.dt, model.dt, t, 0, samples, rng)?;
    Ok(path.mean())
}

/// Runs the inner optimisation of component `l`. Only the blocks of `l` and,
/// if enabled, the shared observation noise change; everything else is
/// returned bit-for-bit.
#[allow(clippy::too_many_arguments)]
pub fn update_component(
    model: &Model,
    data: &Dataset,
    cached: &CachedLatents,
    l: usize,
    cfg: &TrainConfig,
    rng: &mut RngStream,
    cycle: usize,
    history: &mut Vec<IterRecord>,
) -> Result<Model> {
    let c = &model.components[l];
    let stride = c.resolution;
    let targets = partial_residual(data, cached, l)?;
    let layout = ParamLayout::for_model(model);
    let theta0 = layout.pack(model)?;
    let obj = Objective {
        layout: &layout,
        template: model,
        l,
        targets: &targets,
        u: &data.u,
        frozen_kl: frozen_kl(model, l)?,
    };
    let mut free = layout.indices_for(l);
    if !cfg.train_obs_noise {
        let omega = layout
            .block(crate::params::Slot::ObsNoise)
            .map(|b| b.offset..b.offset + b.len);
        free.retain(|i| !omega.as_ref().is_some_and(|r| r.contains(i)));
    }
    Window {
        start: 0,
        stride,
        batch: cfg.batch,
        buffer: cfg.buffer,
    }
    .check(data.len())?;

    let mut theta = theta0.clone();
    let mut adam = AdamState::new(free.len());
    let mut lr_scale = 1.0;
    let mut skips = 0;
    for iter in 0..cfg.iters_per_component {
        let clock = Instant::now();
        let lr = cfg.lr(iter) * lr_scale;
        let mut grad = vec![0.0; theta.len()];
        let mut avg: Option<ElboEstimate> = None;
        let mut ok = true;
        for _ in 0..cfg.minibatches_per_iter {
            let window = Window {
                start: sample_window_start(data.len(), stride, cfg.batch, rng)?,
                stride,
                batch: cfg.batch,
                buffer: cfg.buffer,
            };
            let draws = NoiseDraws::draw(c.dim, c.num_inducing(), window.steps(), cfg.samples, rng);
            let (est, g) = match obj.evaluate(&theta, &window, &draws, true) {
                Ok(r) => r,
                Err(Error::NotPositiveDefinite { .. } | Error::Singular(_)) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            };
            let g = g.expect("gradient requested");
            if !est.value.is_finite() || g.iter().any(|v| !v.is_finite()) {
                ok = false;
                break;
            }
            for i in 0..grad.len() {
                grad[i] += g[i];
            }
            avg = Some(match avg {
                None => est,
                Some(a) => ElboEstimate {
                    value: a.value + est.value,
                    loglik_term: a.loglik_term + est.loglik_term,
                    ..a
                },
            });
        }
        let n = cfg.minibatches_per_iter as f64;
        let elbo = match (ok, avg) {
            (true, Some(a)) => ElboEstimate {
                value: a.value / n,
                loglik_term: a.loglik_term / n,
                n_samples: cfg.samples * cfg.minibatches_per_iter,
                ..a
            },
            _ => {
                skips += 1;
                lr_scale *= 0.5;
                log::warn!(
                    "component {l}, iteration {iter}: non-finite bound, step skipped, lr halved"
                );
                if skips >= MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::NonFiniteLoss { component: l, iter });
                }
                history.push(IterRecord {
                    cycle,
                    component: l,
                    iter,
                    elbo: ElboEstimate {
                        value: f64::NAN,
                        loglik_term: f64::NAN,
                        kl_x0: f64::NAN,
                        kl_fm: f64::NAN,
                        n_samples: 0,
                        batch: (0, cfg.batch, stride),
                    },
                    lr,
                    wall_ms: clock.elapsed().as_secs_f64() * 1e3,
                    skipped: true,
                });
                continue;
            }
        };
        skips = 0;
        // Ascent on the bound is descent on its negation.
        let g_free: Vec<f64> = free.iter().map(|&i| -grad[i] / n).collect();
        let mut x: Vec<f64> = free.iter().map(|&i| theta[i]).collect();
        adam_step(&mut adam, &mut x, &g_free, lr);
        for (k, &i) in free.iter().enumerate() {
            theta[i] = x[k];
        }
        history.push(IterRecord {
            cycle,
            component: l,
            iter,
            elbo,
            lr,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            skipped: false,
        });
    }

    if theta == theta0 {
        return Ok(model.clone());
    }
    let updated = layout.unpack(&theta, model)?;
    let mut out = model.clone();
    out.components[l] = updated.components[l].clone();
    if cfg.train_obs_noise {
        out.emission = updated.emission;
    }
    Ok(out)
}

/// Cyclic backfitting over all components. The cache starts at zero and is
/// refreshed after each component update.
pub fn backfit(
    model: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(Model, Vec<IterRecord>)> {
    model.validate()?;
    data.validate()?;
    let n_comp = model.components.len();
    cfg.validate(n_comp)?;
    if data.out_dim() != model.out_dim() || data.input_dim() != model.input_dim() {
        return Err(Error::DimensionMismatch(
            "dataset does not match the model".into(),
        ));
    }
    let mut history = Vec::new();
    if cfg.cycles == 0 || cfg.iters_per_component == 0 {
        return Ok((model.clone(), history));
    }
    let mut model = model.clone();
    // Untrained components contribute nothing until their first update.
    let mut cache = CachedLatents::empty(n_comp);
    cache.samples_used = cfg.cache_samples;
    if n_comp > 1 {
        for (l, c) in model.components.iter().enumerate() {
            cache.means[l] = Some(DMatrix::zeros(data.len(), c.dim));
        }
    }
    for cycle in 0..cfg.cycles {
        for l in cfg.order(n_comp) {
            let mut r = rng.derive(&[1, cycle as u64, l as u64]);
            model = update_component(&model, data, &cache, l, cfg, &mut r, cycle, &mut history)?;
            if n_comp > 1 {
                let mut r = rng.derive(&[2, cycle as u64, l as u64]);
                cache.means[l] = Some(refresh_cache(&model, data, l, cfg.cache_samples, &mut r)?);
            }
        }
    }
    Ok((model, history))
}
