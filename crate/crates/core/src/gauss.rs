//! Dense Gaussian linear algebra: jittered Cholesky, sampling, densities,
//! KL divergence, affine conditioning and block inversion.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal regularisation ladder used when a factorisation fails.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub base: f64,
    pub growth: f64,
    pub max_retries: usize,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            base: 1e-8,
            growth: 10.0,
            max_retries: 5,
        }
    }
}

impl Jitter {
    pub fn new(base: f64, growth: f64, max_retries: usize) -> Result<Self> {
        if !(base > 0.0) || !(growth > 1.0) {
            return Err(Error::InvalidParameter(format!(
                "jitter needs base > 0 and growth > 1, got base={base}, growth={growth}"
            )));
        }
        Ok(Self {
            base,
            growth,
            max_retries,
        })
    }

    /// `0, base, base*growth, ..., base*growth^max_retries`.
    pub fn ladder(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(0.0)
            .chain((0..=self.max_retries).map(move |k| self.base * self.growth.powi(k as i32)))
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Plain Cholesky of a symmetric matrix. Exact zero pivots with an all-zero
/// remainder column are accepted so that degenerate (zero) covariances factor
/// to zero columns.
pub fn cholesky_semidefinite(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky_impl(m, true)
}

/// Strict Cholesky factor: every pivot must be positive.
pub fn cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky_impl(m, false)
}

fn cholesky_impl(m: &DMatrix<f64>, allow_zero: bool) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return None;
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d > 0.0 && d.is_finite() {
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        } else if allow_zero && d == 0.0 {
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s != 0.0 {
                    return None;
                }
            }
        } else {
            return None;
        }
    }
    Some(l)
}

/// Cholesky factor of `m` (symmetrised first), climbing the jitter ladder
/// until the factorisation succeeds. Returns the factor and the jitter used.
pub fn chol_psd_with_jitter(m: &DMatrix<f64>, j: &Jitter) -> Result<(DMatrix<f64>, f64)> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let sym = symmetrize(m);
    let n = sym.nrows();
    let mut last = 0.0;
    for eps in j.ladder() {
        last = eps;
        let candidate = if eps == 0.0 {
            sym.clone()
        } else {
            &sym + DMatrix::<f64>::identity(n, n) * eps
        };
        if let Some(l) = cholesky(&candidate) {
            return Ok((l, eps));
        }
    }
    Err(Error::NotPositiveDefinite { last_jitter: last })
}

pub fn chol_psd(m: &DMatrix<f64>, j: &Jitter) -> Result<DMatrix<f64>> {
    chol_psd_with_jitter(m, j).map(|(l, _)| l)
}

/// Solves `L X = B` for lower-triangular `L` by forward substitution.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    if b.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "triangular solve {}x{} with rhs {}x{}",
            n,
            n,
            b.nrows(),
            b.ncols()
        )));
    }
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            let d = l[(i, i)];
            if d == 0.0 {
                return Err(Error::Singular("zero pivot in lower solve".into()));
            }
            x[(i, c)] = s / d;
        }
    }
    Ok(x)
}

/// Solves `Lᵀ X = B` for lower-triangular `L` by back substitution.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    if b.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "transposed triangular solve {}x{} with rhs {}x{}",
            n,
            n,
            b.nrows(),
            b.ncols()
        )));
    }
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            let d = l[(i, i)];
            if d == 0.0 {
                return Err(Error::Singular("zero pivot in transposed solve".into()));
            }
            x[(i, c)] = s / d;
        }
    }
    Ok(x)
}

/// `A⁻¹ B` given the Cholesky factor of `A`.
pub fn chol_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    solve_lower_transpose(l, &solve_lower(l, b)?)
}

pub fn chol_solve_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    Ok(DVector::from_column_slice(chol_solve(l, &m)?.as_slice()))
}

pub fn log_det_from_chol(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Multivariate normal with a lazily computed, cached Cholesky factor.
#[derive(Debug)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    jitter: Jitter,
    chol: OnceLock<Result<DMatrix<f64>>>,
}

impl Clone for Gaussian {
    fn clone(&self) -> Self {
        let chol = OnceLock::new();
        if let Some(c) = self.chol.get() {
            let _ = chol.set(c.clone());
        }
        Self {
            mean: self.mean.clone(),
            cov: self.cov.clone(),
            jitter: self.jitter,
            chol,
        }
    }
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::with_jitter(mean, cov, Jitter::default())
    }

    pub fn with_jitter(mean: DVector<f64>, cov: DMatrix<f64>, jitter: Jitter) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "mean of length {n} with {}x{} covariance",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = symmetrize(&cov);
        Ok(Self {
            mean,
            cov,
            jitter,
            chol: OnceLock::new(),
        })
    }

    /// Builds the distribution from a known lower-triangular factor.
    pub fn from_chol(mean: DVector<f64>, chol: DMatrix<f64>) -> Result<Self> {
        let cov = &chol * chol.transpose();
        let g = Self::new(mean, cov)?;
        let _ = g.chol.set(Ok(chol));
        Ok(g)
    }

    pub fn diagonal(mean: DVector<f64>, var: &DVector<f64>) -> Result<Self> {
        let cov = DMatrix::from_diagonal(var);
        let chol = DMatrix::from_diagonal(&var.map(|v| v.max(0.0).sqrt()));
        let g = Self::new(mean, cov)?;
        let _ = g.chol.set(Ok(chol));
        Ok(g)
    }

    pub fn standard(n: usize) -> Self {
        Self::from_chol(DVector::zeros(n), DMatrix::identity(n, n)).expect("identity factor")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn chol(&self) -> Result<&DMatrix<f64>> {
        self.chol
            .get_or_init(|| match cholesky_semidefinite(&self.cov) {
                Some(l) => Ok(l),
                None => chol_psd(&self.cov, &self.jitter),
            })
            .as_ref()
            .map_err(Clone::clone)
    }
}

/// `mean + L z` with `z` standard normal drawn from `rng`.
pub fn mvn_sample(g: &Gaussian, rng: &mut RngStream) -> Result<DVector<f64>> {
    let l = g.chol()?;
    let z = DVector::from_vec(rng.normals(g.dim()));
    Ok(g.mean() + l * z)
}

pub fn mvn_logpdf(x: &DVector<f64>, g: &Gaussian) -> Result<f64> {
    if x.len() != g.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point of length {} against {}-dim gaussian",
            x.len(),
            g.dim()
        )));
    }
    let l = g.chol()?;
    let r = x - g.mean();
    let w = solve_lower(l, &DMatrix::from_column_slice(r.len(), 1, r.as_slice()))?;
    let quad = w.iter().map(|v| v * v).sum::<f64>();
    Ok(-0.5 * (g.dim() as f64 * LN_2PI + log_det_from_chol(l) + quad))
}

/// Closed-form `KL(q ‖ p)`.
pub fn kl_gaussian(q: &Gaussian, p: &Gaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch(format!(
            "KL between {}-dim and {}-dim gaussians",
            q.dim(),
            p.dim()
        )));
    }
    let lp = p.chol()?;
    let lq = q.chol()?;
    let n = q.dim() as f64;
    let a = solve_lower(lp, lq)?;
    let trace = a.iter().map(|v| v * v).sum::<f64>();
    let diff = p.mean() - q.mean();
    let b = solve_lower(
        lp,
        &DMatrix::from_column_slice(diff.len(), 1, diff.as_slice()),
    )?;
    let maha = b.iter().map(|v| v * v).sum::<f64>();
    let kl = 0.5 * (trace + maha - n + log_det_from_chol(lp) - log_det_from_chol(lq));
    Ok(kl)
}

/// Reverse conditional `p(y | x) = N(offset + gain · x, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianConditionalForm {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianConditionalForm {
    pub fn at(&self, x: &DVector<f64>) -> Result<Gaussian> {
        if x.len() != self.gain.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "conditioning value of length {} against gain with {} columns",
                x.len(),
                self.gain.ncols()
            )));
        }
        Gaussian::new(&self.offset + &self.gain * x, self.cov.clone())
    }
}

/// Given `p(x | y) = N(a + F y, A)` and `p(y) = prior_y`, returns the
/// marginal `p(x)` and the reverse conditional `p(y | x)`.
pub fn affine_condition(
    prior_y: &Gaussian,
    a: &DVector<f64>,
    f: &DMatrix<f64>,
    big_a: &DMatrix<f64>,
) -> Result<(Gaussian, GaussianConditionalForm)> {
    let ny = prior_y.dim();
    let nx = a.len();
    if f.nrows() != nx || f.ncols() != ny || big_a.nrows() != nx || big_a.ncols() != nx {
        return Err(Error::DimensionMismatch(format!(
            "affine conditioning with a:{nx}, F:{}x{}, A:{}x{}, prior:{ny}",
            f.nrows(),
            f.ncols(),
            big_a.nrows(),
            big_a.ncols()
        )));
    }
    let b = prior_y.mean();
    let bb = prior_y.cov();
    let marg_mean = a + f * b;
    let marg_cov = symmetrize(&(big_a + f * bb * f.transpose()));
    let marg = Gaussian::new(marg_mean.clone(), marg_cov.clone())?;
    // gain = B Fᵀ (A + F B Fᵀ)⁻¹
    let bft = bb * f.transpose();
    let l = marg.chol()?;
    let gain = chol_solve(l, &bft.transpose())?.transpose();
    let offset = b - &gain * &marg_mean;
    let cov = symmetrize(&(bb - &gain * f * bb));
    Ok((marg, GaussianConditionalForm { gain, offset, cov }))
}

fn invert_via_lu(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = m
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    if inv.iter().all(|v| v.is_finite()) {
        Ok(inv)
    } else {
        Err(Error::Singular(what.to_string()))
    }
}

/// Inverse of `[[A, B], [C, D]]` through the Schur complement of `A`.
pub fn block_inverse(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p = a.nrows();
    let q = d.nrows();
    if !a.is_square()
        || !d.is_square()
        || b.nrows() != p
        || b.ncols() != q
        || c.nrows() != q
        || c.ncols() != p
    {
        return Err(Error::DimensionMismatch(
            "block shapes are inconsistent".into(),
        ));
    }
    let a_inv = invert_via_lu(a, "upper-left block")?;
    let schur = d - c * &a_inv * b;
    let s_inv = invert_via_lu(&schur, "Schur complement")?;
    let a_inv_b = &a_inv * b;
    let c_a_inv = c * &a_inv;
    let top_left = &a_inv + &a_inv_b * &s_inv * &c_a_inv;
    let top_right = -(&a_inv_b * &s_inv);
    let bottom_left = -(&s_inv * &c_a_inv);
    let mut out = DMatrix::zeros(p + q, p + q);
    out.view_mut((0, 0), (p, p)).copy_from(&top_left);
    out.view_mut((0, p), (p, q)).copy_from(&top_right);
    out.view_mut((p, 0), (q, p)).copy_from(&bottom_left);
    out.view_mut((p, p), (q, q)).copy_from(&s_inv);
    Ok(out)
}

/// Density of a univariate normal, used by quadrature checks.
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    fn random_matrix(rng: &mut RngStream, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.standard_normal())
    }

    fn wishart(rng: &mut RngStream, n: usize) -> DMatrix<f64> {
        let g = random_matrix(rng, n, n + 2);
        &g * g.transpose()
    }

    #[test]
    fn chol_identity_and_diagonal() {
        let j = Jitter::default();
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert_eq!(chol_psd(&i3, &j).unwrap(), i3);
        let d = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        assert_eq!(
            chol_psd(&d, &j).unwrap(),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0])
        );
    }

    #[test]
    fn chol_reconstructs_wishart() {
        let mut rng = RngStream::new(11);
        for _ in 0..10 {
            let m = wishart(&mut rng, 5);
            let l = chol_psd(&m, &Jitter::default()).unwrap();
            assert!(rel_frob(&(&l * l.transpose()), &m) < 1e-10);
            // refactorising the reconstruction is stable
            let l2 = chol_psd(&(&l * l.transpose()), &Jitter::default()).unwrap();
            assert!(rel_frob(&(&l2 * l2.transpose()), &m) < 1e-10);
        }
    }

    #[test]
    fn chol_climbs_ladder_on_singular_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (l, eps) = chol_psd_with_jitter(&m, &Jitter::default()).unwrap();
        assert!(eps > 0.0);
        let recon = &l * l.transpose();
        assert!((recon - &m - DMatrix::identity(2, 2) * eps).norm() < 1e-12);
    }

    #[test]
    fn chol_fails_on_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            chol_psd(&m, &Jitter::default()),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn sample_degenerate_returns_mean() {
        let g = Gaussian::new(DVector::from_vec(vec![1.5, -2.0]), DMatrix::zeros(2, 2)).unwrap();
        let mut rng = RngStream::new(1);
        assert_eq!(mvn_sample(&g, &mut rng).unwrap(), *g.mean());
    }

    #[test]
    fn sample_mean_clt() {
        let g = Gaussian::standard(2);
        let mut rng = RngStream::new(2);
        let n = 100_000;
        let mut acc = DVector::zeros(2);
        for _ in 0..n {
            acc += mvn_sample(&g, &mut rng).unwrap();
        }
        acc /= n as f64;
        let bound = 4.0 / (n as f64).sqrt();
        assert!(acc.iter().all(|v| v.abs() < bound), "{acc}");
    }

    #[test]
    fn sample_is_deterministic() {
        let g = Gaussian::new(
            DVector::from_vec(vec![0.3, 0.1]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        )
        .unwrap();
        let a = mvn_sample(&g, &mut RngStream::new(42)).unwrap();
        let b = mvn_sample(&g, &mut RngStream::new(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn logpdf_closed_forms() {
        let g = Gaussian::standard(1);
        assert_relative_eq!(
            mvn_logpdf(&DVector::zeros(1), &g).unwrap(),
            -0.918_938_533_204_672_8,
            epsilon = 1e-12
        );
        let mut rng = RngStream::new(5);
        let cov = wishart(&mut rng, 3);
        let mean = DVector::from_vec(rng.normals(3));
        let g = Gaussian::new(mean.clone(), cov.clone()).unwrap();
        let expected = -0.5 * (3.0 * LN_2PI + cov.determinant().ln());
        assert_relative_eq!(mvn_logpdf(&mean, &g).unwrap(), expected, epsilon = 1e-10);
    }

    #[test]
    fn logpdf_matches_dense_inverse() {
        let mut rng = RngStream::new(6);
        for _ in 0..10 {
            let cov = wishart(&mut rng, 3);
            let mean = DVector::from_vec(rng.normals(3));
            let x = DVector::from_vec(rng.normals(3));
            let g = Gaussian::new(mean.clone(), cov.clone()).unwrap();
            let inv = cov.clone().try_inverse().unwrap();
            let r = &x - &mean;
            let direct =
                -0.5 * (3.0 * LN_2PI + cov.determinant().ln() + (r.transpose() * inv * &r)[(0, 0)]);
            assert_relative_eq!(mvn_logpdf(&x, &g).unwrap(), direct, epsilon = 1e-9);
        }
    }

    #[test]
    fn logpdf_dimension_mismatch() {
        let g = Gaussian::standard(2);
        assert!(matches!(
            mvn_logpdf(&DVector::zeros(3), &g),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn logpdf_integrates_to_one() {
        let g = Gaussian::new(
            DVector::from_vec(vec![0.7]),
            DMatrix::from_element(1, 1, 2.3),
        )
        .unwrap();
        let sd = 2.3f64.sqrt();
        let (lo, hi) = (0.7 - 8.0 * sd, 0.7 + 8.0 * sd);
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let f = |x: f64| mvn_logpdf(&DVector::from_vec(vec![x]), &g).unwrap().exp();
        let mut total = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            total += f(lo + i as f64 * h);
        }
        assert!((total * h - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kl_closed_forms() {
        let p = Gaussian::standard(1);
        assert_eq!(kl_gaussian(&p, &p).unwrap(), 0.0);
        let q = Gaussian::new(DVector::from_vec(vec![1.0]), DMatrix::identity(1, 1)).unwrap();
        assert_relative_eq!(kl_gaussian(&q, &p).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = RngStream::new(8);
        let q = Gaussian::new(
            DVector::from_vec(rng.normals(4)),
            wishart(&mut rng, 4) * 0.3,
        )
        .unwrap();
        let p = Gaussian::new(
            DVector::from_vec(rng.normals(4)),
            wishart(&mut rng, 4) * 0.5,
        )
        .unwrap();
        let exact = kl_gaussian(&q, &p).unwrap();
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        let mut draw = RngStream::new(9);
        for _ in 0..n {
            let x = mvn_sample(&q, &mut draw).unwrap();
            let v = mvn_logpdf(&x, &q).unwrap() - mvn_logpdf(&x, &p).unwrap();
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - exact).abs() < 3.0 * se,
            "mc {mean} exact {exact} se {se}"
        );
    }

    #[test]
    fn affine_no_coupling() {
        let prior = Gaussian::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::identity(2, 2) * 3.0,
        )
        .unwrap();
        let a = DVector::from_vec(vec![0.5]);
        let big_a = DMatrix::from_element(1, 1, 0.7);
        let f = DMatrix::zeros(1, 2);
        let (marg, cond) = affine_condition(&prior, &a, &f, &big_a).unwrap();
        assert_eq!(marg.mean(), &a);
        assert_eq!(marg.cov(), &big_a);
        let back = cond.at(&DVector::from_vec(vec![9.0])).unwrap();
        assert_relative_eq!(back.mean(), prior.mean(), epsilon = 1e-14);
        assert_relative_eq!(back.cov(), prior.cov(), epsilon = 1e-14);
    }

    #[test]
    fn affine_deterministic_shift() {
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let bb = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let prior = Gaussian::new(b.clone(), bb.clone()).unwrap();
        let a = DVector::from_vec(vec![0.25, 0.5]);
        let (marg, _) =
            affine_condition(&prior, &a, &DMatrix::identity(2, 2), &DMatrix::zeros(2, 2)).unwrap();
        assert_relative_eq!(marg.mean(), &(a + b), epsilon = 1e-14);
        assert_relative_eq!(marg.cov(), &bb, epsilon = 1e-14);
    }

    #[test]
    fn affine_two_factorizations_agree() {
        let mut rng = RngStream::new(13);
        for _ in 0..5 {
            let prior =
                Gaussian::new(DVector::from_vec(rng.normals(2)), wishart(&mut rng, 2)).unwrap();
            let a = DVector::from_vec(rng.normals(2));
            let f = random_matrix(&mut rng, 2, 2);
            let big_a = wishart(&mut rng, 2) * 0.5;
            let (marg, cond) = affine_condition(&prior, &a, &f, &big_a).unwrap();
            for _ in 0..20 {
                let x = DVector::from_vec(rng.normals(2));
                let y = DVector::from_vec(rng.normals(2));
                let fwd = Gaussian::new(&a + &f * &y, big_a.clone()).unwrap();
                let lhs = mvn_logpdf(&x, &fwd).unwrap() + mvn_logpdf(&y, &prior).unwrap();
                let rhs =
                    mvn_logpdf(&y, &cond.at(&x).unwrap()).unwrap() + mvn_logpdf(&x, &marg).unwrap();
                assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn block_inverse_cases() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let d = DMatrix::from_row_slice(1, 1, &[5.0]);
        let inv = block_inverse(&a, &DMatrix::zeros(2, 1), &DMatrix::zeros(1, 2), &d).unwrap();
        assert_relative_eq!(inv[(0, 0)], 0.5);
        assert_relative_eq!(inv[(1, 1)], 0.25);
        assert_relative_eq!(inv[(2, 2)], 0.2);
        assert_eq!(inv[(0, 2)], 0.0);

        let one = |v: f64| DMatrix::from_element(1, 1, v);
        let inv = block_inverse(&one(2.0), &one(1.0), &one(1.0), &one(2.0)).unwrap();
        let expected =
            DMatrix::from_row_slice(2, 2, &[2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0]);
        assert_relative_eq!(inv, expected, epsilon = 1e-14);

        let mut rng = RngStream::new(17);
        let full = random_matrix(&mut rng, 4, 4) + DMatrix::identity(4, 4) * 3.0;
        let inv = block_inverse(
            &full.view((0, 0), (2, 2)).into_owned(),
            &full.view((0, 2), (2, 2)).into_owned(),
            &full.view((2, 0), (2, 2)).into_owned(),
            &full.view((2, 2), (2, 2)).into_owned(),
        )
        .unwrap();
        assert!((&full * inv - DMatrix::identity(4, 4)).abs().max() < 1e-9);
    }

    #[test]
    fn block_inverse_singular() {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        assert!(matches!(
            block_inverse(&one(0.0), &one(1.0), &one(1.0), &one(1.0)),
            Err(Error::Singular(_))
        ));
    }
}
