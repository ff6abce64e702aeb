//! Parameter containers for the L-component state-space model, the linear
//! emission, and the two transition densities (discrete GP transition and
//! its Euler–Maruyama reading).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{self, Gaussian, Jitter, LN_2PI};
use crate::kernel::{
    sde_rescaled, InducingSet, InputKind, KernelView, RbfKernel, SparseGp, SparsePosterior,
    VARIANCE_FLOOR,
};
use crate::rng::RngStream;

/// Parameters of one latent component: its GP transition, inducing
/// posterior, recognition distribution and resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentParams {
    /// Latent dimension `D_l`.
    pub dim: usize,
    /// Exogenous input dimension `D_u`.
    pub input_dim: usize,
    /// One kernel per latent dimension, over `[x, u]`.
    pub kernels: Vec<RbfKernel>,
    /// Inducing inputs shared by every latent dimension of the component.
    pub inducing: InducingSet,
    /// One inducing posterior per latent dimension.
    pub q_fm: Vec<SparsePosterior>,
    pub m0: DVector<f64>,
    pub s0_chol: DMatrix<f64>,
    /// Diagonal process noise.
    pub q_diag: DVector<f64>,
    pub resolution: usize,
    /// Prior `p(x_0) = N(prior_mean, prior_cov)`.
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
}

/// Initial values used when a component is created from scratch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub num_inducing: usize,
    pub inducing_range: f64,
    pub fm_mean_std: f64,
    pub fm_std: f64,
    pub process_noise: f64,
    pub kernel_variance: f64,
    pub lengthscale: f64,
    pub x0_std: f64,
    /// Interpret the values above as moments of the transition at the
    /// component's own step, storing them rescaled to the base step.
    pub per_resolution: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            num_inducing: 50,
            inducing_range: 2.0,
            fm_mean_std: 0.05,
            fm_std: 0.01,
            process_noise: 0.002 * 0.002,
            kernel_variance: 0.25,
            lengthscale: 2.0,
            x0_std: 0.1,
            per_resolution: true,
        }
    }
}

impl ComponentParams {
    pub fn init(
        dim: usize,
        input_dim: usize,
        resolution: usize,
        cfg: &InitConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if dim == 0 || resolution == 0 || cfg.num_inducing == 0 {
            return Err(Error::InvalidParameter(
                "component needs dim ≥ 1, resolution ≥ 1 and at least one inducing point".into(),
            ));
        }
        let d_in = dim + input_dim;
        let m = cfg.num_inducing;
        // An R-step transition has drift R·μ, GP variance R²·Σ and noise R·Q.
        let rf = if cfg.per_resolution {
            resolution as f64
        } else {
            1.0
        };
        let r = cfg.inducing_range;
        let inducing =
            InducingSet::new(DMatrix::from_fn(m, d_in, |_, _| rng.uniform_range(-r, r)))?;
        let kernels = (0..dim)
            .map(|_| RbfKernel::new(cfg.kernel_variance / (rf * rf), vec![cfg.lengthscale; d_in]))
            .collect::<Result<Vec<_>>>()?;
        let q_fm = (0..dim)
            .map(|_| {
                let mean = DVector::from_iterator(
                    m,
                    (0..m).map(|_| cfg.fm_mean_std / rf * rng.standard_normal()),
                );
                SparsePosterior::new(mean, DMatrix::identity(m, m) * (cfg.fm_std / rf))
            })
            .collect::<Result<Vec<_>>>()?;
        let c = Self {
            dim,
            input_dim,
            kernels,
            inducing,
            q_fm,
            m0: DVector::zeros(dim),
            s0_chol: DMatrix::identity(dim, dim) * cfg.x0_std,
            q_diag: DVector::from_element(dim, cfg.process_noise / rf),
            resolution,
            prior_mean: DVector::zeros(dim),
            prior_cov: DMatrix::identity(dim, dim),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let d_in = self.dim + self.input_dim;
        if self.resolution == 0 {
            return Err(Error::InvalidParameter("resolution must be ≥ 1".into()));
        }
        if self.q_diag.len() != self.dim || self.q_diag.iter().any(|q| !(*q > 0.0)) {
            return Err(Error::InvalidParameter(
                "process noise must be positive per latent dim".into(),
            ));
        }
        if self.inducing.input_dim() != d_in {
            return Err(Error::DimensionMismatch(format!(
                "inducing inputs have {} columns, expected D_l + D_u = {d_in}",
                self.inducing.input_dim()
            )));
        }
        if self.kernels.len() != self.dim || self.q_fm.len() != self.dim {
            return Err(Error::DimensionMismatch(
                "one kernel and posterior per latent dim".into(),
            ));
        }
        for k in &self.kernels {
            k.validate()?;
            if k.input_dim() != d_in {
                return Err(Error::DimensionMismatch(
                    "kernel input dim must be D_l + D_u".into(),
                ));
            }
        }
        for q in &self.q_fm {
            if q.mean.len() != self.inducing.len() {
                return Err(Error::DimensionMismatch(
                    "posterior size must match inducing set".into(),
                ));
            }
        }
        if self.m0.len() != self.dim
            || self.s0_chol.shape() != (self.dim, self.dim)
            || self.prior_mean.len() != self.dim
            || self.prior_cov.shape() != (self.dim, self.dim)
        {
            return Err(Error::DimensionMismatch(
                "initial-state parameters must be D_l sized".into(),
            ));
        }
        Ok(())
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.len()
    }

    pub fn q_x0(&self) -> Result<Gaussian> {
        Gaussian::from_chol(self.m0.clone(), self.s0_chol.clone())
    }

    pub fn p_x0(&self) -> Result<Gaussian> {
        Gaussian::new(self.prior_mean.clone(), self.prior_cov.clone())
    }

    /// Kernel input `[x, u]`.
    pub fn kernel_input(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim || u.len() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "state of length {} and input of length {} for a component with D_l={}, D_u={}",
                x.len(),
                u.len(),
                self.dim,
                self.input_dim
            )));
        }
        Ok(x.iter().chain(u).copied().collect())
    }

    /// One prepared sparse GP per latent dimension.
    pub fn sparse_gps(&self, j: &Jitter) -> Result<Vec<SparseGp>> {
        self.kernels
            .iter()
            .map(|k| SparseGp::new(k, &self.inducing, j))
            .collect()
    }
}

/// Linear emission `y = Σ_l C^{(l)} x^{(l)} + ε`, `C^{(l)} = [I, 0]`,
/// `ε ~ N(0, diag(obs_noise))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionParams {
    pub out_dim: usize,
    pub obs_noise: Vec<f64>,
}

impl EmissionParams {
    pub fn new(out_dim: usize, noise: f64) -> Self {
        Self {
            out_dim,
            obs_noise: vec![noise; out_dim],
        }
    }
}

/// Per-column affine transform `(v - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Normalization {
    pub u: Vec<ColumnTransform>,
    pub y: Vec<ColumnTransform>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub components: Vec<ComponentParams>,
    pub emission: EmissionParams,
    pub dt: f64,
    pub normalization: Option<Normalization>,
}

impl Model {
    pub fn new(
        components: Vec<ComponentParams>,
        emission: EmissionParams,
        dt: f64,
    ) -> Result<Self> {
        let m = Self {
            components,
            emission,
            dt,
            normalization: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidParameter(
                "model needs at least one component".into(),
            ));
        }
        if !(self.dt > 0.0) {
            return Err(Error::NonPositiveStep(self.dt));
        }
        let du = self.components[0].input_dim;
        for c in &self.components {
            c.validate()?;
            if c.input_dim != du {
                return Err(Error::DimensionMismatch(
                    "all components must share D_u".into(),
                ));
            }
            if c.dim < self.emission.out_dim {
                return Err(Error::DimensionMismatch(format!(
                    "component of dim {} cannot emit {} outputs",
                    c.dim, self.emission.out_dim
                )));
            }
        }
        if self.emission.obs_noise.len() != self.emission.out_dim
            || self.emission.obs_noise.iter().any(|v| !(*v > 0.0))
        {
            return Err(Error::InvalidParameter(
                "observation noise must be positive per output".into(),
            ));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.components.iter().map(|c| c.dim).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.components[0].input_dim
    }

    pub fn out_dim(&self) -> usize {
        self.emission.out_dim
    }
}

/// Observations `y` (T×D_y) and exogenous inputs `u` (T×D_u) on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub times: Vec<f64>,
    pub y: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub dt: f64,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, u: DMatrix<f64>, dt: f64) -> Result<Self> {
        let t = y.nrows();
        let times = (0..t).map(|i| i as f64 * dt).collect();
        let d = Self {
            times,
            y,
            u,
            dt,
            normalization: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.y.nrows();
        if t < 2 {
            return Err(Error::InvalidParameter(
                "dataset needs at least two rows".into(),
            ));
        }
        if self.u.nrows() != t || self.times.len() != t {
            return Err(Error::DimensionMismatch(
                "y, u and t must share the row count".into(),
            ));
        }
        if !(self.dt > 0.0) {
            return Err(Error::NonPositiveStep(self.dt));
        }
        for (r, row) in self.y.row_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    row: r,
                    column: "y".into(),
                });
            }
        }
        for (r, row) in self.u.row_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    row: r,
                    column: "u".into(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    pub fn out_dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn u_row(&self, t: usize) -> Vec<f64> {
        self.u.row(t).iter().copied().collect()
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() || end - start < 2 {
            return Err(Error::InvalidParameter(format!(
                "bad row range {start}..{end}"
            )));
        }
        Ok(Self {
            times: self.times[start..end].to_vec(),
            y: self.y.rows(start, end - start).into_owned(),
            u: self.u.rows(start, end - start).into_owned(),
            dt: self.dt,
            normalization: self.normalization.clone(),
        })
    }
}

/// `Σ_l C^{(l)} x^{(l)}`: the first `D_y` coordinates of every component, summed.
pub fn emission_mean(model: &Model, xs: &[DVector<f64>]) -> Result<DVector<f64>> {
    if xs.len() != model.components.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} component states for {} components",
            xs.len(),
            model.components.len()
        )));
    }
    let dy = model.out_dim();
    let mut out = DVector::zeros(dy);
    for (x, c) in xs.iter().zip(&model.components) {
        if x.len() != c.dim {
            return Err(Error::DimensionMismatch(format!(
                "state of length {} for a component of dim {}",
                x.len(),
                c.dim
            )));
        }
        out += x.rows(0, dy);
    }
    Ok(out)
}

pub fn emission_logpdf(model: &Model, y: &DVector<f64>, xs: &[DVector<f64>]) -> Result<f64> {
    if y.len() != model.out_dim() {
        return Err(Error::DimensionMismatch(format!(
            "observation of length {} for {} outputs",
            y.len(),
            model.out_dim()
        )));
    }
    let mean = emission_mean(model, xs)?;
    Ok(diag_gauss_logpdf(y, &mean, &model.emission.obs_noise))
}

pub(crate) fn diag_gauss_logpdf(y: &DVector<f64>, mean: &DVector<f64>, var: &[f64]) -> f64 {
    y.iter()
        .zip(mean.iter())
        .zip(var)
        .map(|((y, m), v)| -0.5 * (LN_2PI + v.ln() + (y - m).powi(2) / v))
        .sum()
}

/// `N(x + μ(x), diag(Q + Σ(x)))` with `f_M` integrated against `q(f_M)`.
pub fn gpssm_transition(c: &ComponentParams, x: &[f64], u: &[f64]) -> Result<Gaussian> {
    let gps = c.sparse_gps(&Jitter::default())?;
    gpssm_transition_with(c, &gps, x, u)
}

pub fn gpssm_transition_with(
    c: &ComponentParams,
    gps: &[SparseGp],
    x: &[f64],
    u: &[f64],
) -> Result<Gaussian> {
    let z = c.kernel_input(x, u)?;
    let mut mean = DVector::zeros(c.dim);
    let mut var = DVector::zeros(c.dim);
    for d in 0..c.dim {
        let (m, v) = gps[d].predict(&c.q_fm[d], &z)?;
        mean[d] = x[d] + m;
        var[d] = c.q_diag[d] + v;
    }
    Gaussian::diagonal(mean, &var)
}

/// `N(x + K_xM K_MM⁻¹ f_M, diag(Q + K_xx − K_xM K_MM⁻¹ K_Mx))`.
pub fn prior_transition_given_fm(
    c: &ComponentParams,
    x: &[f64],
    u: &[f64],
    f_m: &[DVector<f64>],
) -> Result<Gaussian> {
    let gps = c.sparse_gps(&Jitter::default())?;
    let (mean, var) = transition_given_fm_with(c, &gps, x, u, f_m)?;
    Gaussian::diagonal(mean, &var)
}

pub(crate) fn transition_given_fm_with(
    c: &ComponentParams,
    gps: &[SparseGp],
    x: &[f64],
    u: &[f64],
    f_m: &[DVector<f64>],
) -> Result<(DVector<f64>, DVector<f64>)> {
    if f_m.len() != c.dim {
        return Err(Error::DimensionMismatch(
            "one f_M vector per latent dim".into(),
        ));
    }
    let z = c.kernel_input(x, u)?;
    let mut mean = DVector::zeros(c.dim);
    let mut var = DVector::zeros(c.dim);
    for d in 0..c.dim {
        let (m, v) = gps[d].conditional_given(&f_m[d], &z)?;
        mean[d] = x[d] + m;
        var[d] = c.q_diag[d] + v;
    }
    Ok((mean, var))
}

/// The Euler–Maruyama view of one component: diffusion `Q^Δ`, per-dimension
/// rescaled kernels `k^Δ`, and the shared inducing posterior.
#[derive(Debug, Clone)]
pub struct SdeComponent {
    pub dim: usize,
    pub input_dim: usize,
    pub views: Vec<KernelView>,
    pub inducing: InducingSet,
    pub q_fm: Vec<SparsePosterior>,
    pub q_delta: DVector<f64>,
    kmm_chols: Vec<DMatrix<f64>>,
}

impl SdeComponent {
    pub fn new(c: &ComponentParams, views: Vec<KernelView>, q_delta: DVector<f64>) -> Result<Self> {
        if views.len() != c.dim || q_delta.len() != c.dim {
            return Err(Error::DimensionMismatch(
                "one kernel view and diffusion per latent dim".into(),
            ));
        }
        let j = Jitter::default();
        let kmm_chols = views
            .iter()
            .map(|v| {
                let kmm = v.cross_gram(
                    &c.inducing.inputs,
                    InputKind::Inducing,
                    &c.inducing.inputs,
                    InputKind::Inducing,
                )?;
                jittered_chol(&kmm, &j)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: c.dim,
            input_dim: c.input_dim,
            views,
            inducing: c.inducing.clone(),
            q_fm: c.q_fm.clone(),
            q_delta,
            kmm_chols,
        })
    }

    /// Parameter mapping that makes the SDE at step `dt` reproduce the discrete
    /// transition: `Q^Δ = Q / dt`, inducing–state kernel scaled by `1/dt`,
    /// state–state by `1/dt²`.
    pub fn from_gpssm(c: &ComponentParams, dt: f64) -> Result<Self> {
        let views = c
            .kernels
            .iter()
            .map(|k| sde_rescaled(k, dt))
            .collect::<Result<Vec<_>>>()?;
        Self::new(c, views, &c.q_diag / dt)
    }

    fn kxm(&self, d: usize, z: &[f64]) -> Result<DMatrix<f64>> {
        let row = DMatrix::from_row_slice(1, z.len(), z);
        self.views[d].cross_gram(
            &self.inducing.inputs,
            InputKind::Inducing,
            &row,
            InputKind::State,
        )
    }

    fn kxx(&self, d: usize, z: &[f64]) -> Result<f64> {
        self.views[d].eval(z, InputKind::State, z, InputKind::State)
    }

    fn input(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim || u.len() != self.input_dim {
            return Err(Error::DimensionMismatch("state/input sizes".into()));
        }
        Ok(x.iter().chain(u).copied().collect())
    }

    /// `x + h μ^Δ`, `h² Σ^Δ + h Q^Δ` per dimension with `f_M` integrated out.
    pub fn transition(&self, x: &[f64], u: &[f64], step: f64) -> Result<Gaussian> {
        let (mean, var) = self.transition_parts(x, u, step)?;
        Gaussian::diagonal(mean, &(var.0 + var.1))
    }

    /// Mean and the two variance contributions `(h² Σ^Δ, h Q^Δ)`.
    pub fn transition_parts(
        &self,
        x: &[f64],
        u: &[f64],
        step: f64,
    ) -> Result<(DVector<f64>, (DVector<f64>, DVector<f64>))> {
        if !(step > 0.0) {
            return Err(Error::NonPositiveStep(step));
        }
        let z = self.input(x, u)?;
        let mut mean = DVector::zeros(self.dim);
        let mut gp_var = DVector::zeros(self.dim);
        let mut noise_var = DVector::zeros(self.dim);
        for d in 0..self.dim {
            let l = &self.kmm_chols[d];
            let kmx = self.kxm(d, &z)?;
            let a = gauss::chol_solve(l, &kmx)?;
            let mu = (a.transpose() * &self.q_fm[d].mean)[0];
            let v = gauss::solve_lower(l, &kmx)?;
            let s_term = (self.q_fm[d].chol.transpose() * &a).norm_squared();
            let sigma = (self.kxx(d, &z)? - v.norm_squared() + s_term).max(VARIANCE_FLOOR);
            mean[d] = x[d] + step * mu;
            gp_var[d] = step * step * sigma;
            noise_var[d] = step * self.q_delta[d];
        }
        Ok((mean, (gp_var, noise_var)))
    }

    /// Transition with the inducing outputs fixed.
    pub fn transition_given_fm(
        &self,
        x: &[f64],
        u: &[f64],
        f_m: &[DVector<f64>],
        step: f64,
    ) -> Result<Gaussian> {
        if !(step > 0.0) {
            return Err(Error::NonPositiveStep(step));
        }
        let z = self.input(x, u)?;
        let mut mean = DVector::zeros(self.dim);
        let mut var = DVector::zeros(self.dim);
        for d in 0..self.dim {
            let l = &self.kmm_chols[d];
            let kmx = self.kxm(d, &z)?;
            let a = gauss::chol_solve(l, &kmx)?;
            let mu = (a.transpose() * &f_m[d])[0];
            let v = gauss::solve_lower(l, &kmx)?;
            let sigma = (self.kxx(d, &z)? - v.norm_squared()).max(0.0);
            mean[d] = x[d] + step * mu;
            var[d] = step * step * sigma + step * self.q_delta[d];
        }
        Gaussian::diagonal(mean, &var)
    }
}

pub(crate) fn jittered_chol(m: &DMatrix<f64>, j: &Jitter) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let sym = gauss::symmetrize(m);
    let mut last = j.base;
    for eps in j.ladder().skip(1) {
        last = eps;
        if let Some(l) = gauss::cholesky(&(&sym + DMatrix::<f64>::identity(n, n) * eps)) {
            return Ok(l);
        }
    }
    Err(Error::NotPositiveDefinite { last_jitter: last })
}

/// Euler–Maruyama transition of `c` at step `step`, with the SDE parameters
/// obtained from the stored discrete-time parameters at base step `dt`.
pub fn sde_transition(
    c: &ComponentParams,
    x: &[f64],
    u: &[f64],
    step: f64,
    dt: f64,
) -> Result<Gaussian> {
    if !(step > 0.0) {
        return Err(Error::NonPositiveStep(step));
    }
    SdeComponent::from_gpssm(c, dt)?.transition(x, u, step)
}

// ---------------------------------------------------------------------------
// JSON document

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PosteriorDoc {
    mean: Vec<f64>,
    chol: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ComponentDoc {
    dim: usize,
    input_dim: usize,
    resolution: usize,
    kernels: Vec<RbfKernel>,
    inducing: Vec<Vec<f64>>,
    q_fm: Vec<PosteriorDoc>,
    m0: Vec<f64>,
    s0_chol: Vec<Vec<f64>>,
    q_diag: Vec<f64>,
    prior_mean: Vec<f64>,
    prior_cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDoc {
    version: u32,
    dt: f64,
    emission: EmissionParams,
    components: Vec<ComponentDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalization: Option<Normalization>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Serde("ragged matrix in model document".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl Model {
    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc {
            version: MODEL_FORMAT_VERSION,
            dt: self.dt,
            emission: self.emission.clone(),
            normalization: self.normalization.clone(),
            components: self
                .components
                .iter()
                .map(|c| ComponentDoc {
                    dim: c.dim,
                    input_dim: c.input_dim,
                    resolution: c.resolution,
                    kernels: c.kernels.clone(),
                    inducing: rows_of(&c.inducing.inputs),
                    q_fm: c
                        .q_fm
                        .iter()
                        .map(|q| PosteriorDoc {
                            mean: q.mean.iter().copied().collect(),
                            chol: rows_of(&q.chol),
                        })
                        .collect(),
                    m0: c.m0.iter().copied().collect(),
                    s0_chol: rows_of(&c.s0_chol),
                    q_diag: c.q_diag.iter().copied().collect(),
                    prior_mean: c.prior_mean.iter().copied().collect(),
                    prior_cov: rows_of(&c.prior_cov),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(s)?;
        if doc.version != MODEL_FORMAT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported model version {}",
                doc.version
            )));
        }
        let components = doc
            .components
            .into_iter()
            .map(|c| {
                let d_in = c.dim + c.input_dim;
                let m = c.inducing.len();
                Ok(ComponentParams {
                    dim: c.dim,
                    input_dim: c.input_dim,
                    kernels: c.kernels,
                    inducing: InducingSet::new(matrix_from_rows(&c.inducing, d_in)?)?,
                    q_fm: c
                        .q_fm
                        .into_iter()
                        .map(|q| {
                            SparsePosterior::new(
                                DVector::from_vec(q.mean),
                                matrix_from_rows(&q.chol, m)?,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?,
                    m0: DVector::from_vec(c.m0),
                    s0_chol: matrix_from_rows(&c.s0_chol, c.dim)?,
                    q_diag: DVector::from_vec(c.q_diag),
                    resolution: c.resolution,
                    prior_mean: DVector::from_vec(c.prior_mean),
                    prior_cov: matrix_from_rows(&c.prior_cov, c.dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = Model::new(components, doc.emission, doc.dt)?;
        model.normalization = doc.normalization;
        Ok(model)
    }
}
