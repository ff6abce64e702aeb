//! Evidence lower bound: KL terms, partial residuals, the differentiable
//! dilated-window estimator and a plain full-sequence reference estimator.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::gauss::{self, kl_gaussian, Gaussian, Jitter, LN_2PI};
use crate::kernel::gram_with_chol;
use crate::model::{ComponentParams, Dataset, Model};
use crate::params::{ParamLayout, ParamNodes, Slot};
use crate::rng::RngStream;
use crate::sampling::sample_window_start;

/// A dilated window: `batch` scored rows `start, start+R, …`, preceded by
/// `buffer` unscored warm-up steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub stride: usize,
    pub batch: usize,
    pub buffer: usize,
}

impl Window {
    pub fn steps(&self) -> usize {
        self.buffer + self.batch
    }

    /// Row index of the state reached after step `k` (0-based), if scored.
    pub fn scored_row(&self, k: usize) -> Option<usize> {
        (k >= self.buffer).then(|| self.start + (k - self.buffer) * self.stride)
    }

    /// Row of the input used for the step out of state `k`. Indices before
    /// the series start are clamped to row 0.
    pub fn input_row(&self, k: usize) -> usize {
        let row = self.start as i64 + (k as i64 - self.buffer as i64 - 1) * self.stride as i64;
        row.max(0) as usize
    }

    pub fn check(&self, len: usize) -> Result<()> {
        let needed = self.stride * self.batch;
        if self.stride == 0 || self.batch == 0 {
            return Err(Error::InvalidParameter(
                "stride and batch must be ≥ 1".into(),
            ));
        }
        if len < needed || self.start > len - needed {
            return Err(Error::WindowTooLong {
                batch: self.batch,
                stride: self.stride,
                needed: self.start + needed,
                len,
            });
        }
        Ok(())
    }
}

/// Standard-normal draws shared between estimators (common random numbers).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws {
    /// `D × S`.
    pub x0: DMatrix<f64>,
    /// Per latent dim, `M × S`.
    pub fm: Vec<DMatrix<f64>>,
    /// Per step, `D × S`.
    pub steps: Vec<DMatrix<f64>>,
}

impl NoiseDraws {
    pub fn draw(dim: usize, m: usize, steps: usize, s: usize, rng: &mut RngStream) -> Self {
        let mut mat = |r: usize| DMatrix::from_fn(r, s, |_, _| rng.standard_normal());
        let x0 = mat(dim);
        let fm = (0..dim).map(|_| mat(m)).collect();
        let steps = (0..steps).map(|_| mat(dim)).collect();
        Self { x0, fm, steps }
    }

    pub fn samples(&self) -> usize {
        self.x0.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub loglik_term: f64,
    pub kl_x0: f64,
    pub kl_fm: f64,
    pub n_samples: usize,
    /// `(start, B, R)`.
    pub batch: (usize, usize, usize),
}

/// Mean latent paths at full resolution, one `T × D_l` matrix per component.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CachedLatents {
    pub means: Vec<Option<DMatrix<f64>>>,
    pub samples_used: usize,
}

impl CachedLatents {
    pub fn empty(components: usize) -> Self {
        Self {
            means: vec![None; components],
            samples_used: 0,
        }
    }
}

/// `K_MM` factor with the jitter used by every estimator.
fn kmm_factor(c: &ComponentParams, d: usize) -> Result<(DMatrix<f64>, f64)> {
    let (_, l, eps) = gram_with_chol(&c.kernels[d], &c.inducing.inputs, &Jitter::default())?;
    Ok((l, eps))
}

/// KL terms of one component.
pub fn component_kl(c: &ComponentParams) -> Result<(f64, f64)> {
    let kl_x0 = kl_gaussian(&c.q_x0()?, &c.p_x0()?)?;
    let mut kl_fm = 0.0;
    for d in 0..c.dim {
        let (lk, _) = kmm_factor(c, d)?;
        let m = c.num_inducing();
        let q = Gaussian::from_chol(c.q_fm[d].mean.clone(), c.q_fm[d].chol.clone())?;
        let p = Gaussian::from_chol(DVector::zeros(m), lk)?;
        kl_fm += kl_gaussian(&q, &p)?;
    }
    Ok((kl_x0, kl_fm))
}

/// `(KL(q(x_0)‖p(x_0)), KL(q(f_M)‖p(f_M)))` summed over components and dims.
pub fn kl_terms(model: &Model) -> Result<(f64, f64)> {
    let mut acc = (0.0, 0.0);
    for c in &model.components {
        let (a, b) = component_kl(c)?;
        acc.0 += a;
        acc.1 += b;
    }
    Ok(acc)
}

/// `y − Σ_{l'≠l} C^{(l')} x̄^{(l')}` from cached mean latents.
pub fn partial_residual(data: &Dataset, cached: &CachedLatents, l: usize) -> Result<DMatrix<f64>> {
    let dy = data.out_dim();
    let mut r = data.y.clone();
    for (k, c) in cached.means.iter().enumerate() {
        if k == l {
            continue;
        }
        let m = c.as_ref().ok_or(Error::MissingCache(k))?;
        if m.nrows() != data.len() || m.ncols() < dy {
            return Err(Error::DimensionMismatch(format!(
                "cache {k} is {}x{}, data has {} rows and {dy} outputs",
                m.nrows(),
                m.ncols(),
                data.len()
            )));
        }
        r -= m.columns(0, dy);
    }
    Ok(r)
}

/// Everything an objective evaluation for component `l` needs besides the
/// parameters and random draws.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub layout: &'a ParamLayout,
    pub template: &'a Model,
    pub l: usize,
    pub targets: &'a DMatrix<f64>,
    pub u: &'a DMatrix<f64>,
    /// KL terms of the other components, added as constants.
    pub frozen_kl: (f64, f64),
}

/// Nodes of the recorded bound.
#[derive(Debug, Clone)]
pub struct ElboNodes {
    pub params: ParamNodes,
    pub value: NodeId,
    pub loglik: NodeId,
    pub kl_x0: NodeId,
    pub kl_fm: NodeId,
}

impl<'a> Objective<'a> {
    fn check(&self, window: &Window, draws: &NoiseDraws) -> Result<()> {
        let c = &self.template.components[self.l];
        window.check(self.targets.nrows())?;
        if self.u.nrows() != self.targets.nrows() || self.u.ncols() != c.input_dim {
            return Err(Error::DimensionMismatch(
                "inputs do not match targets or component".into(),
            ));
        }
        if self.targets.ncols() != self.template.out_dim() {
            return Err(Error::DimensionMismatch(
                "targets do not match the emission".into(),
            ));
        }
        if draws.steps.len() < window.steps()
            || draws.x0.nrows() != c.dim
            || draws.fm.len() != c.dim
            || draws.fm.iter().any(|f| f.nrows() != c.num_inducing())
        {
            return Err(Error::DimensionMismatch(
                "noise draws do not fit the window".into(),
            ));
        }
        Ok(())
    }

    /// Records the dilated-window bound for parameters `theta`. Transitions
    /// use the Euler–Maruyama form at step `R·Δt` with the SDE kernel view.
    pub fn record(
        &self,
        tape: &mut Tape,
        theta: &[f64],
        window: &Window,
        draws: &NoiseDraws,
    ) -> Result<ElboNodes> {
        self.check(window, draws)?;
        let current = self.layout.unpack(theta, self.template)?;
        let c = &current.components[self.l];
        let (dim, m, du) = (c.dim, c.num_inducing(), c.input_dim);
        let s = draws.samples();
        let dt = current.dt;
        let h = window.stride as f64 * dt;
        let p = self.layout.record(tape, theta, self.l)?;
        let l = self.l;

        let z = p.get(Slot::Inducing(l))?;
        let q_row = {
            let q = p.get(Slot::ProcessNoise(l))?;
            tape.transpose(q)
        };

        // inducing posterior, prior factor and KL per dim
        let mut kl_fm = tape.scalar_const(self.frozen_kl.1);
        let mut dims = Vec::with_capacity(dim);
        for d in 0..dim {
            let var = p.get(Slot::KernelVariance(l, d))?;
            let ls = p.get(Slot::Lengthscales(l, d))?;
            let mean = p.get(Slot::FmMean(l, d))?;
            let ls_chol = p.get(Slot::FmChol(l, d))?;
            let (_, eps) = kmm_factor(c, d)?;
            let kmm = tape.rbf_cross(z, z, var, ls)?;
            let jit = tape.constant(DMatrix::identity(m, m) * eps);
            let kmm = tape.add(kmm, jit)?;
            let lk = tape.cholesky(kmm)?;

            let a = tape.solve_lower(lk, ls_chol)?;
            let tr = tape.dot(a, a)?;
            let b = tape.solve_lower(lk, mean)?;
            let quad = tape.dot(b, b)?;
            let ldk = tape.log_det_chol(lk);
            let lds = tape.log_det_chol(ls_chol);
            let kl = tape.add(tr, quad)?;
            let kl = tape.add(kl, ldk)?;
            let kl = tape.sub(kl, lds)?;
            let mc = tape.scalar_const(m as f64);
            let kl = tape.sub(kl, mc)?;
            let kl = tape.scale(kl, 0.5);
            kl_fm = tape.add(kl_fm, kl)?;

            let zf = tape.constant(draws.fm[d].clone());
            let f = tape.reparam(mean, ls_chol, zf)?;
            let alpha = tape.solve_lower(lk, f)?;
            let alpha = tape.solve_lower_t(lk, alpha)?;
            let alpha_t = tape.transpose(alpha);
            let kxx = tape.scale(var, 1.0 / (dt * dt));
            let qd = tape.col(q_row, d)?;
            let noise_var = tape.scale(qd, h / dt);
            dims.push((var, ls, lk, alpha_t, kxx, noise_var));
        }

        // initial state and its KL
        let m0 = p.get(Slot::M0(l))?;
        let l0 = p.get(Slot::S0(l))?;
        let z0 = tape.constant(draws.x0.clone());
        let x0 = tape.reparam(m0, l0, z0)?;
        let x0t = tape.transpose(x0);
        let mut xs = (0..dim)
            .map(|d| tape.col(x0t, d))
            .collect::<Result<Vec<_>>>()?;

        let lp = gauss::chol_psd(&c.prior_cov, &Jitter::default())?;
        let lp_n = tape.constant(lp.clone());
        let mu_p = tape.constant(DMatrix::from_column_slice(dim, 1, c.prior_mean.as_slice()));
        let a0 = tape.solve_lower(lp_n, l0)?;
        let tr0 = tape.dot(a0, a0)?;
        let diff = tape.sub(m0, mu_p)?;
        let b0 = tape.solve_lower(lp_n, diff)?;
        let quad0 = tape.dot(b0, b0)?;
        let lds0 = tape.log_det_chol(l0);
        let kl0 = tape.add(tr0, quad0)?;
        let kl0 = tape.sub(kl0, lds0)?;
        let kl0 = tape.scale(kl0, 0.5);
        let kl_x0_const = tape
            .scalar_const(0.5 * (gauss::log_det_from_chol(&lp) - dim as f64) + self.frozen_kl.0);
        let kl_x0 = tape.add(kl0, kl_x0_const)?;

        // emission noise scalars
        let dy = self.targets.ncols();
        let omega = p.get(Slot::ObsNoise)?;
        let omega_row = tape.transpose(omega);
        let mut om = Vec::with_capacity(dy);
        for o in 0..dy {
            let w = tape.col(omega_row, o)?;
            let lw = tape.log(w);
            om.push((w, lw));
        }

        let mut loglik = tape.scalar_const(0.0);
        for k in 0..window.steps() {
            let urow = window.input_row(k);
            let mut cols = xs.clone();
            if du > 0 {
                let u = DMatrix::from_fn(s, du, |_, j| self.u[(urow, j)]);
                cols.push(tape.constant(u));
            }
            let xin = tape.hcat(&cols)?;
            let mut next = Vec::with_capacity(dim);
            for (d, &(var, ls, lk, alpha_t, kxx, noise_var)) in dims.iter().enumerate() {
                let kxm = tape.rbf_cross(xin, z, var, ls)?;
                let kxm = tape.scale(kxm, 1.0 / dt);
                let ka = tape.mul(kxm, alpha_t)?;
                let drift = tape.row_sums(ka);
                let drift = tape.scale(drift, h);
                let kt = tape.transpose(kxm);
                let v = tape.solve_lower(lk, kt)?;
                let v2 = tape.square(v);
                let red = tape.col_sums(v2);
                let red = tape.transpose(red);
                let cond = tape.sub(kxx, red)?;
                let cond = tape.clamp_min(cond, 0.0);
                let gp_var = tape.scale(cond, h * h);
                let total = tape.add(gp_var, noise_var)?;
                let sd = tape.sqrt(total);
                let zk = tape.constant(DMatrix::from_fn(s, 1, |i, _| draws.steps[k][(d, i)]));
                let shock = tape.mul(sd, zk)?;
                let x = tape.add(xs[d], drift)?;
                next.push(tape.add(x, shock)?);
            }
            xs = next;
            if let Some(row) = window.scored_row(k) {
                for (o, &(w, lw)) in om.iter().enumerate() {
                    let r = tape.scalar_const(self.targets[(row, o)]);
                    let e = tape.sub(xs[o], r)?;
                    let e2 = tape.square(e);
                    let msq = tape.sum(e2);
                    let msq = tape.scale(msq, 1.0 / s as f64);
                    let quad = tape.div(msq, w)?;
                    let t = tape.add(quad, lw)?;
                    let t = tape.scale(t, -0.5);
                    loglik = tape.add(loglik, t)?;
                }
            }
        }
        let n_scored = (window.batch * dy) as f64;
        let ln2pi = tape.scalar_const(-0.5 * LN_2PI * n_scored);
        loglik = tape.add(loglik, ln2pi)?;
        let j = self.targets.nrows() as f64 / window.stride as f64;
        let loglik = tape.scale(loglik, j / window.batch as f64);

        let value = tape.sub(loglik, kl_x0)?;
        let value = tape.sub(value, kl_fm)?;
        Ok(ElboNodes {
            params: p,
            value,
            loglik,
            kl_x0,
            kl_fm,
        })
    }

    /// Value of the bound and, if requested, its gradient over the full
    /// parameter vector (zero outside component `l` and the shared blocks).
    pub fn evaluate(
        &self,
        theta: &[f64],
        window: &Window,
        draws: &NoiseDraws,
        grad: bool,
    ) -> Result<(ElboEstimate, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let nodes = self.record(&mut tape, theta, window, draws)?;
        let est = ElboEstimate {
            value: tape.scalar(nodes.value),
            loglik_term: tape.scalar(nodes.loglik),
            kl_x0: tape.scalar(nodes.kl_x0),
            kl_fm: tape.scalar(nodes.kl_fm),
            n_samples: draws.samples(),
            batch: (window.start, window.batch, window.stride),
        };
        if !grad {
            return Ok((est, None));
        }
        let g = tape.backward(nodes.value)?;
        Ok((est, Some(self.layout.gather(&nodes.params, &g))))
    }
}

/// Draws a window and noise, then evaluates the bound for component `l`
/// against the partial residual of the cache.
#[allow(clippy::too_many_arguments)]
pub fn elbo_minibatch(
    model: &Model,
    data: &Dataset,
    l: usize,
    cached: &CachedLatents,
    stride: usize,
    batch: usize,
    buffer: usize,
    samples: usize,
    rng: &mut RngStream,
) -> Result<ElboEstimate> {
    let layout = ParamLayout::for_model(model);
    let theta = layout.pack(model)?;
    let targets = partial_residual(data, cached, l)?;
    let frozen = frozen_kl(model, l)?;
    let obj = Objective {
        layout: &layout,
        template: model,
        l,
        targets: &targets,
        u: &data.u,
        frozen_kl: frozen,
    };
    let start = sample_window_start(data.len(), stride, batch, rng)?;
    let window = Window {
        start,
        stride,
        batch,
        buffer,
    };
    let c = &model.components[l];
    let draws = NoiseDraws::draw(c.dim, c.num_inducing(), window.steps(), samples, rng);
    Ok(obj.evaluate(&theta, &window, &draws, false)?.0)
}

/// KL terms of every component other than `l`.
pub fn frozen_kl(model: &Model, l: usize) -> Result<(f64, f64)> {
    let mut acc = (0.0, 0.0);
    for (k, c) in model.components.iter().enumerate() {
        if k != l {
            let (a, b) = component_kl(c)?;
            acc.0 += a;
            acc.1 += b;
        }
    }
    Ok(acc)
}

/// Reference estimator of the full-sequence bound for component `l`
/// (stride 1, no buffer, every row scored) using the discrete GP transition
/// directly and no tape.
pub fn elbo_full_sequence(
    model: &Model,
    l: usize,
    targets: &DMatrix<f64>,
    u: &DMatrix<f64>,
    draws: &NoiseDraws,
) -> Result<ElboEstimate> {
    let c = &model.components[l];
    let t_len = targets.nrows();
    if draws.steps.len() < t_len {
        return Err(Error::DimensionMismatch(
            "need one noise column per row".into(),
        ));
    }
    let s = draws.samples();
    let dy = model.out_dim();
    let gps = c.sparse_gps(&Jitter::default())?;
    let window = Window {
        start: 0,
        stride: 1,
        batch: t_len,
        buffer: 0,
    };
    let mut loglik = 0.0;
    for smp in 0..s {
        let f_m: Vec<DVector<f64>> = (0..c.dim)
            .map(|d| &c.q_fm[d].mean + &c.q_fm[d].chol * draws.fm[d].column(smp))
            .collect();
        let mut x: Vec<f64> = (&c.m0 + &c.s0_chol * draws.x0.column(smp))
            .iter()
            .copied()
            .collect();
        for k in 0..t_len {
            let urow = window.input_row(k);
            let uu: Vec<f64> = u.row(urow).iter().copied().collect();
            let (mean, var) = crate::model::transition_given_fm_with(c, &gps, &x, &uu, &f_m)?;
            for d in 0..c.dim {
                x[d] = mean[d] + var[d].sqrt() * draws.steps[k][(d, smp)];
            }
            for o in 0..dy {
                let w = model.emission.obs_noise[o];
                loglik += -0.5 * (LN_2PI + w.ln() + (targets[(k, o)] - x[o]).powi(2) / w);
            }
        }
    }
    loglik /= s as f64;
    let (kl_x0, kl_fm) = kl_terms(model)?;
    Ok(ElboEstimate {
        value: loglik - kl_x0 - kl_fm,
        loglik_term: loglik,
        kl_x0,
        kl_fm,
        n_samples: s,
        batch: (0, t_len, 1),
    })
}
