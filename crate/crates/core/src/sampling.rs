//! Latent-state sampling schemes: full Monte Carlo over the inducing outputs,
//! the marginalised per-step scheme, the analytic recursions for posterior
//! and prior, and dilated window extraction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gauss::{self, Gaussian, Jitter};
use crate::kernel::{RbfKernel, SparseGp, VARIANCE_FLOOR};
use crate::model::ComponentParams;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    FullMc,
    Prssm,
    Analytic,
}

/// `S` sampled paths of `B` states each.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    /// One `B × D_l` matrix per sample.
    pub samples: Vec<DMatrix<f64>>,
    pub start_index: usize,
    pub stride: usize,
    pub scheme: Scheme,
}

impl LatentPath {
    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Across-sample mean, `B × D_l`.
    pub fn mean(&self) -> DMatrix<f64> {
        let mut acc = self.samples[0].clone();
        for s in &self.samples[1..] {
            acc += s;
        }
        acc / self.samples.len() as f64
    }
}

/// Per-dimension precomputation for fast repeated transitions.
#[derive(Debug, Clone)]
pub(crate) struct DimGp {
    kernel: RbfKernel,
    inducing: DMatrix<f64>,
    pub(crate) chol: DMatrix<f64>,
    inv_ls2: Vec<f64>,
}

impl DimGp {
    pub(crate) fn new(gp: &SparseGp, inducing: &DMatrix<f64>) -> Self {
        let kernel = gp.kernel().clone();
        let inv_ls2 = kernel.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        Self {
            kernel,
            inducing: inducing.clone(),
            chol: gp.kmm_chol.clone(),
            inv_ls2,
        }
    }

    /// `k_M(z)` written into `out`.
    fn kvec(&self, z: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (d, zd) in z.iter().enumerate() {
                let diff = zd - self.inducing[(m, d)];
                s += diff * diff * self.inv_ls2[d];
            }
            *o = self.kernel.variance * (-0.5 * s).exp();
        }
    }

    /// In-place forward substitution `v ← L⁻¹ v`.
    fn forward(&self, v: &mut [f64]) {
        let l = &self.chol;
        for i in 0..v.len() {
            let mut s = v[i];
            for k in 0..i {
                s -= l[(i, k)] * v[k];
            }
            v[i] = s / l[(i, i)];
        }
    }

    fn backward(&self, v: &mut [f64]) {
        let l = &self.chol;
        let n = v.len();
        for i in (0..n).rev() {
            let mut s = v[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * v[k];
            }
            v[i] = s / l[(i, i)];
        }
    }

    /// `K_MM⁻¹ f`.
    pub(crate) fn alpha(&self, f: &DVector<f64>) -> DVector<f64> {
        let mut v: Vec<f64> = f.iter().copied().collect();
        self.forward(&mut v);
        self.backward(&mut v);
        DVector::from_vec(v)
    }

    /// Conditional mean `k·α` and variance `k_xx − ‖L⁻¹k‖²` at `z`.
    fn given(&self, z: &[f64], alpha: &DVector<f64>, buf: &mut [f64]) -> (f64, f64) {
        self.kvec(z, buf);
        let mean: f64 = buf.iter().zip(alpha.iter()).map(|(a, b)| a * b).sum();
        self.forward(buf);
        let red: f64 = buf.iter().map(|v| v * v).sum();
        (mean, (self.kernel.variance - red).max(0.0))
    }
}

/// Prepared component for repeated simulation at a fixed step ratio `R`
/// (step `R·Δt` under the stored base-step parameters).
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    pub(crate) c: &'a ComponentParams,
    pub(crate) dims: Vec<DimGp>,
    ratio: f64,
}

impl<'a> Simulator<'a> {
    pub fn new(c: &'a ComponentParams, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0) {
            return Err(Error::NonPositiveStep(ratio));
        }
        let gps = c.sparse_gps(&Jitter::default())?;
        let dims = gps
            .iter()
            .map(|g| DimGp::new(g, &c.inducing.inputs))
            .collect();
        Ok(Self { c, dims, ratio })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    fn input(&self, x: &[f64], u: &[f64], z: &mut Vec<f64>) {
        z.clear();
        z.extend_from_slice(x);
        z.extend_from_slice(u);
    }

    /// One step with the inducing outputs fixed through `alphas = K_MM⁻¹ f_M`.
    /// Noise comes from `noise` (one standard normal per latent dim).
    pub(crate) fn step_given(
        &self,
        x: &mut [f64],
        u: &[f64],
        alphas: &[DVector<f64>],
        noise: &[f64],
        scratch: &mut Scratch,
    ) {
        self.input(x, u, &mut scratch.z);
        let r = self.ratio;
        for d in 0..self.c.dim {
            let (m, v) = self.dims[d].given(&scratch.z, &alphas[d], &mut scratch.k);
            let var = r * r * v + r * self.c.q_diag[d];
            scratch.next[d] = x[d] + r * m + var.sqrt() * noise[d];
        }
        x.copy_from_slice(&scratch.next[..self.c.dim]);
    }

    /// Mean and variance of one marginalised step (`f_M` integrated against `q`).
    pub(crate) fn marginal_moments(
        &self,
        x: &[f64],
        u: &[f64],
        scratch: &mut Scratch,
    ) -> (Vec<f64>, Vec<f64>) {
        self.input(x, u, &mut scratch.z);
        let r = self.ratio;
        let mut mean = vec![0.0; self.c.dim];
        let mut var = vec![0.0; self.c.dim];
        for d in 0..self.c.dim {
            let dg = &self.dims[d];
            let q = &self.c.q_fm[d];
            dg.kvec(&scratch.z, &mut scratch.k);
            let mut a = scratch.k.clone();
            dg.forward(&mut a);
            let red: f64 = a.iter().map(|v| v * v).sum();
            dg.backward(&mut a);
            let a = DVector::from_vec(a);
            let mu = a.dot(&q.mean);
            let s_term = (q.chol.transpose() * &a).norm_squared();
            let sigma = (dg.kernel.variance - red + s_term).max(VARIANCE_FLOOR);
            mean[d] = x[d] + r * mu;
            var[d] = r * r * sigma + r * self.c.q_diag[d];
        }
        (mean, var)
    }

    pub fn new_scratch(&self) -> Scratch {
        Scratch {
            z: Vec::with_capacity(self.c.dim + self.c.input_dim),
            k: vec![0.0; self.c.num_inducing()],
            next: vec![0.0; self.c.dim],
        }
    }

    /// Draws `f_M ~ q(f_M)` per latent dim and returns `K_MM⁻¹ f_M`.
    pub(crate) fn draw_alphas(&self, rng: &mut RngStream) -> Vec<DVector<f64>> {
        let m = self.c.num_inducing();
        (0..self.c.dim)
            .map(|d| {
                let q = &self.c.q_fm[d];
                let f = &q.mean + &q.chol * DVector::from_vec(rng.normals(m));
                self.dims[d].alpha(&f)
            })
            .collect()
    }

    pub(crate) fn draw_x0(&self, rng: &mut RngStream) -> Vec<f64> {
        let z = DVector::from_vec(rng.normals(self.c.dim));
        (&self.c.m0 + &self.c.s0_chol * z).iter().copied().collect()
    }
}

/// Reusable buffers for [`Simulator`] steps.
#[derive(Debug, Clone)]
pub struct Scratch {
    z: Vec<f64>,
    k: Vec<f64>,
    next: Vec<f64>,
}

fn check_seq_args(
    c: &ComponentParams,
    u_window: &DMatrix<f64>,
    b: usize,
    b0: usize,
    s: usize,
) -> Result<()> {
    if b == 0 || s == 0 {
        return Err(Error::InvalidParameter("need B ≥ 1 and S ≥ 1".into()));
    }
    if u_window.nrows() < b0 + b || u_window.ncols() != c.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "input window is {}x{}, need at least {} rows of {} inputs",
            u_window.nrows(),
            u_window.ncols(),
            b0 + b,
            c.input_dim
        )));
    }
    Ok(())
}

fn ratio_of(step: f64, dt: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::NonPositiveStep(step));
    }
    if !(dt > 0.0) {
        return Err(Error::NonPositiveStep(dt));
    }
    Ok(step / dt)
}

/// Full Monte Carlo: one `f_M` draw per sample shared by every step.
///
/// `u_window` row `k` is the input used for the step out of state `k`; the
/// path holds the states after steps `B0+1 ..= B0+B`.
#[allow(clippy::too_many_arguments)]
pub fn sample_seq_fullmc(
    c: &ComponentParams,
    u_window: &DMatrix<f64>,
    step: f64,
    dt: f64,
    b: usize,
    b0: usize,
    s: usize,
    rng: &mut RngStream,
) -> Result<LatentPath> {
    check_seq_args(c, u_window, b, b0, s)?;
    let sim = Simulator::new(c, ratio_of(step, dt)?)?;
    let mut scratch = sim.new_scratch();
    let mut samples = Vec::with_capacity(s);
    for _ in 0..s {
        let alphas = sim.draw_alphas(rng);
        let mut x = sim.draw_x0(rng);
        let mut out = DMatrix::zeros(b, c.dim);
        for k in 0..(b0 + b) {
            let u: Vec<f64> = u_window.row(k).iter().copied().collect();
            let noise = rng.normals(c.dim);
            sim.step_given(&mut x, &u, &alphas, &noise, &mut scratch);
            if k >= b0 {
                out.row_mut(k - b0).copy_from_slice(&x);
            }
        }
        samples.push(out);
    }
    Ok(LatentPath {
        samples,
        start_index: b0 + 1,
        stride: step_stride(step, dt),
        scheme: Scheme::FullMc,
    })
}

fn step_stride(step: f64, dt: f64) -> usize {
    ((step / dt).round() as usize).max(1)
}

/// Marginalised scheme: every step draws from the transition with `f_M`
/// integrated out independently, so consecutive steps are uncorrelated
/// through `f_M`.
#[allow(clippy::too_many_arguments)]
pub fn sample_seq_prssm(
    c: &ComponentParams,
    u_window: &DMatrix<f64>,
    step: f64,
    dt: f64,
    b: usize,
    b0: usize,
    s: usize,
    rng: &mut RngStream,
) -> Result<LatentPath> {
    check_seq_args(c, u_window, b, b0, s)?;
    let sim = Simulator::new(c, ratio_of(step, dt)?)?;
    let mut scratch = sim.new_scratch();
    let mut samples = Vec::with_capacity(s);
    for _ in 0..s {
        let mut x = sim.draw_x0(rng);
        let mut out = DMatrix::zeros(b, c.dim);
        for k in 0..(b0 + b) {
            let u: Vec<f64> = u_window.row(k).iter().copied().collect();
            let (mean, var) = sim.marginal_moments(&x, &u, &mut scratch);
            for d in 0..c.dim {
                x[d] = mean[d] + var[d].sqrt() * rng.standard_normal();
            }
            if k >= b0 {
                out.row_mut(k - b0).copy_from_slice(&x);
            }
        }
        samples.push(out);
    }
    Ok(LatentPath {
        samples,
        start_index: b0 + 1,
        stride: step_stride(step, dt),
        scheme: Scheme::Prssm,
    })
}

/// Incremental recursion for one latent dimension.
#[derive(Debug, Clone)]
struct DimRecursion {
    /// Feature vectors `b_t` with `S̃_{t,t'} = b_t·b_t' + δ_{tt'} c_t`.
    feats: Vec<DVector<f64>>,
    chol: DMatrix<f64>,
    s_tilde: DMatrix<f64>,
    /// `L⁻¹ (x_{1:t} − μ̃_{0:t−1})`.
    w: Vec<f64>,
    mu_tilde: Vec<f64>,
    /// Cross terms, diagonal and `μ̃` for the newest state, pending the draw.
    pending: Option<(DVector<f64>, f64, f64, DVector<f64>)>,
}

impl DimRecursion {
    fn new() -> Self {
        Self {
            feats: Vec::new(),
            chol: DMatrix::zeros(0, 0),
            s_tilde: DMatrix::zeros(0, 0),
            w: Vec::new(),
            mu_tilde: Vec::new(),
            pending: None,
        }
    }

    /// Conditional moments of the next state given the realised history.
    fn predict(&mut self, feat: DVector<f64>, diag_extra: f64, mu_t: f64) -> Result<(f64, f64)> {
        let t = self.feats.len();
        let cross = DVector::from_iterator(t, self.feats.iter().map(|f| f.dot(&feat)));
        let s_tt = feat.norm_squared() + diag_extra;
        let v = if t == 0 {
            DVector::zeros(0)
        } else {
            gauss::solve_lower(
                &self.chol,
                &DMatrix::from_column_slice(t, 1, cross.as_slice()),
            )?
            .column(0)
            .into_owned()
        };
        let mean = mu_t + v.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>();
        let var = s_tt - v.norm_squared();
        self.pending = Some((v, var, s_tt, cross));
        self.feats.push(feat);
        self.mu_tilde.push(mu_t);
        Ok((mean, var))
    }

    /// Appends the realised next state.
    fn commit(&mut self, x_next: f64) -> Result<()> {
        let (v, var, s_tt, cross) = self.pending.take().expect("predict before commit");
        if !(var > 0.0) {
            return Err(Error::Singular(format!(
                "conditional variance {var} in analytic recursion"
            )));
        }
        let t = v.len();
        let d = var.sqrt();
        let mut l = self.chol.clone().resize(t + 1, t + 1, 0.0);
        for j in 0..t {
            l[(t, j)] = v[j];
        }
        l[(t, t)] = d;
        self.chol = l;
        let mut s = self.s_tilde.clone().resize(t + 1, t + 1, 0.0);
        for j in 0..t {
            s[(t, j)] = cross[j];
            s[(j, t)] = cross[j];
        }
        s[(t, t)] = s_tt;
        self.s_tilde = s;
        let r = x_next - self.mu_tilde[t];
        let proj: f64 = v.iter().zip(&self.w).map(|(a, b)| a * b).sum();
        self.w.push((r - proj) / d);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RecursionKind {
    Posterior,
    Prior,
}

/// State of the analytic recursion after a realised history `x_0, …, x_t`.
#[derive(Debug, Clone)]
pub struct AnalyticState {
    pub x_hist: Vec<DVector<f64>>,
    dims: Vec<DimRecursion>,
    kind: Option<RecursionKind>,
}

impl AnalyticState {
    pub fn new(x0: DVector<f64>) -> Self {
        let n = x0.len();
        Self {
            x_hist: vec![x0],
            dims: (0..n).map(|_| DimRecursion::new()).collect(),
            kind: None,
        }
    }

    /// `μ̃_{0:t−1}` for latent dim `d`.
    pub fn mu_tilde(&self, d: usize) -> &[f64] {
        &self.dims[d].mu_tilde
    }

    pub fn s_tilde(&self, d: usize) -> &DMatrix<f64> {
        &self.dims[d].s_tilde
    }

    pub fn chol_s_tilde(&self, d: usize) -> &DMatrix<f64> {
        &self.dims[d].chol
    }

    pub fn steps(&self) -> usize {
        self.x_hist.len() - 1
    }
}

fn recursion_step(
    mut state: AnalyticState,
    c: &ComponentParams,
    u: &[f64],
    kind: RecursionKind,
    rng: &mut RngStream,
) -> Result<(Gaussian, AnalyticState)> {
    if state.x_hist[0].len() != c.dim {
        return Err(Error::DimensionMismatch(
            "history dimension differs from component".into(),
        ));
    }
    if state.kind.is_some_and(|k| k != kind) {
        return Err(Error::InvalidParameter(
            "posterior and prior recursions cannot be mixed".into(),
        ));
    }
    state.kind = Some(kind);
    let gps = c.sparse_gps(&Jitter::default())?;
    let x_t = state.x_hist.last().expect("non-empty history").clone();
    let z = c.kernel_input(x_t.as_slice(), u)?;
    let mut mean = DVector::zeros(c.dim);
    let mut var = DVector::zeros(c.dim);
    for d in 0..c.dim {
        let gp = &gps[d];
        let k = gp.k_xm(&z)?;
        let kcol = DMatrix::from_column_slice(k.len(), 1, k.as_slice());
        let lk = gauss::solve_lower(&gp.kmm_chol, &kcol)?
            .column(0)
            .into_owned();
        let cond = (gp.kernel().variance - lk.norm_squared()).max(0.0);
        let (feat, mu_t) = match kind {
            RecursionKind::Posterior => {
                let a = gp.solve(&k)?;
                (
                    c.q_fm[d].chol.transpose() * &a,
                    x_t[d] + a.dot(&c.q_fm[d].mean),
                )
            }
            RecursionKind::Prior => (lk, x_t[d]),
        };
        let (m, v) = state.dims[d].predict(feat, c.q_diag[d] + cond, mu_t)?;
        mean[d] = m;
        var[d] = v;
    }
    let g = Gaussian::diagonal(mean.clone(), &var)?;
    let mut x_next = DVector::zeros(c.dim);
    for d in 0..c.dim {
        x_next[d] = mean[d] + var[d].max(0.0).sqrt() * rng.standard_normal();
        state.dims[d].commit(x_next[d])?;
    }
    state.x_hist.push(x_next);
    Ok((g, state))
}

/// One step of the analytic recursion under `q(f_M)`: returns the law of the
/// next state given the whole sampled history and the state extended by a
/// draw from it.
pub fn analytic_step(
    state: AnalyticState,
    c: &ComponentParams,
    u: &[f64],
    rng: &mut RngStream,
) -> Result<(Gaussian, AnalyticState)> {
    recursion_step(state, c, u, RecursionKind::Posterior, rng)
}

/// The same recursion under the prior `p(f_M) = N(0, K_MM)`.
pub fn prior_analytic_step(
    state: AnalyticState,
    c: &ComponentParams,
    u: &[f64],
    rng: &mut RngStream,
) -> Result<(Gaussian, AnalyticState)> {
    recursion_step(state, c, u, RecursionKind::Prior, rng)
}

/// `S̃` evaluated directly on a realised history.
pub fn s_tilde_direct(
    c: &ComponentParams,
    hist: &[DVector<f64>],
    us: &DMatrix<f64>,
    d: usize,
) -> Result<DMatrix<f64>> {
    let gps = c.sparse_gps(&Jitter::default())?;
    let gp = &gps[d];
    let t = hist.len();
    let mut ks = Vec::with_capacity(t);
    for (i, x) in hist.iter().enumerate() {
        let u: Vec<f64> = us.row(i).iter().copied().collect();
        ks.push(gp.k_xm(&c.kernel_input(x.as_slice(), &u)?)?);
    }
    let s_m = c.q_fm[d].cov();
    let mut out = DMatrix::zeros(t, t);
    for i in 0..t {
        let ai = gp.solve(&ks[i])?;
        for j in 0..t {
            let aj = gp.solve(&ks[j])?;
            out[(i, j)] = (ai.transpose() * &s_m * &aj)[0];
            if i == j {
                out[(i, j)] += c.q_diag[d] + gp.kernel().variance - ks[i].dot(&ai);
            }
        }
    }
    Ok(out)
}

/// Row indices `start, start+R, …, start+(B−1)R`.
pub fn dilated_indices(start: usize, r: usize, b: usize) -> Vec<usize> {
    (0..b).map(|j| start + j * r).collect()
}

/// Uniform window start in `[0, T − R·B]` and the dilated rows.
pub fn sample_dilated(
    series: &DMatrix<f64>,
    r: usize,
    b: usize,
    rng: &mut RngStream,
) -> Result<(usize, DMatrix<f64>)> {
    let start = sample_window_start(series.nrows(), r, b, rng)?;
    let idx = dilated_indices(start, r, b);
    Ok((start, series.select_rows(idx.iter())))
}

pub fn sample_window_start(t: usize, r: usize, b: usize, rng: &mut RngStream) -> Result<usize> {
    if r == 0 || b == 0 {
        return Err(Error::InvalidParameter(
            "stride and batch must be ≥ 1".into(),
        ));
    }
    let needed = r * b;
    if t < needed {
        return Err(Error::WindowTooLong {
            batch: b,
            stride: r,
            needed,
            len: t,
        });
    }
    Ok(rng.index_inclusive(t - needed))
}
