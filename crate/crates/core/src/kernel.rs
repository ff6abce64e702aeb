//! RBF-ARD kernel, Gram matrices and sparse GP conditionals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{self, Jitter};

/// Squared-exponential kernel with one lengthscale per input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfKernel {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl RbfKernel {
    pub fn new(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let k = Self {
            variance,
            lengthscales,
        };
        k.validate()?;
        Ok(k)
    }

    /// Table-default initialisation: variance 0.5², every lengthscale 2.
    pub fn default_for(input_dim: usize) -> Self {
        Self {
            variance: 0.25,
            lengthscales: vec![2.0; input_dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0) || self.lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::InvalidParameter(
                "kernel variance and lengthscales must be strictly positive".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((a, b), l) in x.iter().zip(y).zip(&self.lengthscales) {
            let d = (a - b) / l;
            r2 += d * d;
        }
        self.variance * (-0.5 * r2).exp()
    }
}

pub fn kernel_eval(k: &RbfKernel, x: &[f64], x2: &[f64]) -> Result<f64> {
    if x.len() != k.input_dim() || x2.len() != k.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "kernel over {} inputs evaluated at lengths {} and {}",
            k.input_dim(),
            x.len(),
            x2.len()
        )));
    }
    Ok(k.eval_unchecked(x, x2))
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// `K[i, j] = k(a_i, b_j)` for row-stacked inputs.
pub fn cross_gram(k: &RbfKernel, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != k.input_dim() || b.ncols() != k.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "cross gram with {} and {} columns for a {}-input kernel",
            a.ncols(),
            b.ncols(),
            k.input_dim()
        )));
    }
    let rows_b: Vec<Vec<f64>> = (0..b.nrows()).map(|j| row(b, j)).collect();
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        let ai = row(a, i);
        for (j, bj) in rows_b.iter().enumerate() {
            out[(i, j)] = k.eval_unchecked(&ai, bj);
        }
    }
    Ok(out)
}

/// Jittered Gram matrix and its Cholesky factor. The diagonal jitter is the
/// smallest ladder value (at least `j.base`) for which the factorisation
/// succeeds.
pub fn gram_with_chol(
    k: &RbfKernel,
    x: &DMatrix<f64>,
    j: &Jitter,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("gram inputs must be finite".into()));
    }
    let raw = gauss::symmetrize(&cross_gram(k, x, x)?);
    let n = raw.nrows();
    let mut last = j.base;
    for eps in j.ladder().skip(1) {
        last = eps;
        let m = &raw + DMatrix::<f64>::identity(n, n) * eps;
        if let Some(l) = gauss::cholesky(&m) {
            return Ok((m, l, eps));
        }
    }
    Err(Error::NotPositiveDefinite { last_jitter: last })
}

pub fn gram(k: &RbfKernel, x: &DMatrix<f64>, j: &Jitter) -> Result<DMatrix<f64>> {
    gram_with_chol(k, x, j).map(|(m, _, _)| m)
}

/// Inducing inputs, one row per inducing point.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    pub inputs: DMatrix<f64>,
}

impl InducingSet {
    pub fn new(inputs: DMatrix<f64>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::InvalidParameter(
                "at least one inducing point is required".into(),
            ));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "inducing inputs must be finite".into(),
            ));
        }
        Ok(Self { inputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }
}

/// `q(f_M) = N(mean, chol cholᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePosterior {
    pub mean: DVector<f64>,
    pub chol: DMatrix<f64>,
}

impl SparsePosterior {
    pub fn new(mean: DVector<f64>, chol: DMatrix<f64>) -> Result<Self> {
        if chol.nrows() != mean.len() || chol.ncols() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "posterior mean of length {} with {}x{} factor",
                mean.len(),
                chol.nrows(),
                chol.ncols()
            )));
        }
        Ok(Self { mean, chol })
    }

    pub fn cov(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }
}

/// Precomputed pieces of a sparse GP with inducing inputs `Z`, ready for
/// repeated pointwise predictions.
#[derive(Debug, Clone)]
pub struct SparseGp {
    kernel: RbfKernel,
    inducing: DMatrix<f64>,
    /// Cholesky factor of the jittered `K_MM`.
    pub kmm_chol: DMatrix<f64>,
    pub jitter: f64,
}

impl SparseGp {
    pub fn new(k: &RbfKernel, z: &InducingSet, j: &Jitter) -> Result<Self> {
        if z.input_dim() != k.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "inducing inputs with {} columns for a {}-input kernel",
                z.input_dim(),
                k.input_dim()
            )));
        }
        let (_, l, eps) = gram_with_chol(k, &z.inputs, j)?;
        Ok(Self {
            kernel: k.clone(),
            inducing: z.inputs.clone(),
            kmm_chol: l,
            jitter: eps,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn kernel(&self) -> &RbfKernel {
        &self.kernel
    }

    /// `K_xM` as a column vector.
    pub fn k_xm(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.kernel.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "query of length {} for a {}-input kernel",
                x.len(),
                self.kernel.input_dim()
            )));
        }
        Ok(DVector::from_iterator(
            self.num_inducing(),
            (0..self.num_inducing())
                .map(|m| self.kernel.eval_unchecked(x, &row(&self.inducing, m))),
        ))
    }

    /// `K_MM⁻¹ v` through the cached factor.
    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        gauss::chol_solve_vec(&self.kmm_chol, v)
    }

    /// Mean and variance of `f(x) | f_M`.
    pub fn conditional_given(&self, f_m: &DVector<f64>, x: &[f64]) -> Result<(f64, f64)> {
        if f_m.len() != self.num_inducing() {
            return Err(Error::DimensionMismatch(format!(
                "f_M of length {} for {} inducing points",
                f_m.len(),
                self.num_inducing()
            )));
        }
        let kx = self.k_xm(x)?;
        let mean = kx.dot(&self.solve(f_m)?);
        let var = self.kernel.variance - self.reduction(&kx)?;
        Ok((mean, var.max(0.0)))
    }

    /// Mean and variance of `f(x)` with `f_M` integrated against `q`.
    pub fn predict(&self, q: &SparsePosterior, x: &[f64]) -> Result<(f64, f64)> {
        if q.mean.len() != self.num_inducing() {
            return Err(Error::DimensionMismatch(format!(
                "posterior over {} outputs for {} inducing points",
                q.mean.len(),
                self.num_inducing()
            )));
        }
        let kx = self.k_xm(x)?;
        let a = self.solve(&kx)?;
        let mean = a.dot(&q.mean);
        let s_term = (q.chol.transpose() * &a).norm_squared();
        let var = self.kernel.variance - self.reduction(&kx)? + s_term;
        Ok((mean, var.max(VARIANCE_FLOOR)))
    }

    /// `K_xM K_MM⁻¹ K_Mx`.
    fn reduction(&self, kx: &DVector<f64>) -> Result<f64> {
        let v = gauss::solve_lower(
            &self.kmm_chol,
            &DMatrix::from_column_slice(kx.len(), 1, kx.as_slice()),
        )?;
        Ok(v.norm_squared())
    }
}

pub const VARIANCE_FLOOR: f64 = 1e-12;

pub fn sparse_conditional(
    k: &RbfKernel,
    z: &InducingSet,
    q: &SparsePosterior,
    x: &[f64],
    j: &Jitter,
) -> Result<(f64, f64)> {
    SparseGp::new(k, z, j)?.predict(q, x)
}

pub fn conditional_given_fm(
    k: &RbfKernel,
    z: &InducingSet,
    f_m: &DVector<f64>,
    x: &[f64],
    j: &Jitter,
) -> Result<(f64, f64)> {
    SparseGp::new(k, z, j)?.conditional_given(f_m, x)
}

/// Whether a kernel argument is an inducing input or a latent state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Inducing,
    State,
}

/// Kernel whose scale depends on the kinds of its two arguments:
/// inducing–inducing pairs are unscaled, mixed pairs are divided by `step`
/// and state–state pairs by `step²`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelView {
    pub kernel: RbfKernel,
    pub step: f64,
}

impl KernelView {
    pub fn scale(&self, a: InputKind, b: InputKind) -> f64 {
        match (a, b) {
            (InputKind::Inducing, InputKind::Inducing) => 1.0,
            (InputKind::State, InputKind::State) => 1.0 / (self.step * self.step),
            _ => 1.0 / self.step,
        }
    }

    pub fn eval(&self, x: &[f64], kx: InputKind, y: &[f64], ky: InputKind) -> Result<f64> {
        Ok(kernel_eval(&self.kernel, x, y)? * self.scale(kx, ky))
    }

    pub fn cross_gram(
        &self,
        a: &DMatrix<f64>,
        ka: InputKind,
        b: &DMatrix<f64>,
        kb: InputKind,
    ) -> Result<DMatrix<f64>> {
        Ok(cross_gram(&self.kernel, a, b)? * self.scale(ka, kb))
    }
}

pub fn sde_rescaled(k: &RbfKernel, step: f64) -> Result<KernelView> {
    if !(step > 0.0) {
        return Err(Error::NonPositiveStep(step));
    }
    Ok(KernelView {
        kernel: k.clone(),
        step,
    })
}
