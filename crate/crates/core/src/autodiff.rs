//! Matrix-valued reverse-mode automatic differentiation.
//!
//! Every node holds a dense matrix. Elementwise binary ops broadcast a `1×1`,
//! column (`n×1`) or row (`1×m`) operand against the other shape.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gauss;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    ClampMin(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    RowSums(NodeId),
    ColSums(NodeId),
    Dot(NodeId, NodeId),
    Col(NodeId, usize),
    HCat(Vec<NodeId>),
    SolveLower(NodeId, NodeId),
    SolveLowerT(NodeId, NodeId),
    Cholesky(NodeId),
    LogDetChol(NodeId),
    /// `mean + L z`; no gradient reaches `z`.
    Reparam(NodeId, NodeId, NodeId),
    TrilSoftplusDiag(NodeId),
    RbfCross(NodeId, NodeId, NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DMatrix<f64>,
}

/// Append-only computation record. Node ids increase strictly, so the graph
/// is acyclic by construction.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<(String, NodeId)>,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn at(m: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let r = if m.nrows() == 1 { 0 } else { i };
    let c = if m.ncols() == 1 { 0 } else { j };
    m[(r, c)]
}

fn zip_broadcast(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    shape: (usize, usize),
    f: impl Fn(f64, f64) -> f64,
) -> DMatrix<f64> {
    DMatrix::from_fn(shape.0, shape.1, |i, j| f(at(a, i, j), at(b, i, j)))
}

/// Sums `g` down to `shape` over the broadcast axes.
fn reduce_to(g: DMatrix<f64>, shape: (usize, usize)) -> DMatrix<f64> {
    if g.shape() == shape {
        return g;
    }
    let mut out = DMatrix::zeros(shape.0, shape.1);
    for j in 0..g.ncols() {
        for i in 0..g.nrows() {
            let r = if shape.0 == 1 { 0 } else { i };
            let c = if shape.1 == 1 { 0 } else { j };
            out[(r, c)] += g[(i, j)];
        }
    }
    out
}

fn tril(m: DMatrix<f64>) -> DMatrix<f64> {
    let mut m = m;
    for j in 0..m.ncols() {
        for i in 0..j.min(m.nrows()) {
            m[(i, j)] = 0.0;
        }
    }
    m
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DMatrix<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[(0, 0)]
    }

    pub fn leaves(&self) -> &[(String, NodeId)] {
        &self.leaves
    }

    fn push(&mut self, op: Op, value: DMatrix<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, name: impl Into<String>, value: DMatrix<f64>) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.leaves.push((name.into(), id));
        id
    }

    pub fn constant(&mut self, value: DMatrix<f64>) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(DMatrix::from_element(1, 1, v))
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].value.shape()
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DMatrix<f64>> {
        let shape = broadcast_shape(self.shape(a), self.shape(b)).ok_or_else(|| {
            Error::DimensionMismatch(format!(
                "{name} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ))
        })?;
        Ok(zip_broadcast(
            &self.nodes[a].value,
            &self.nodes[b].value,
            shape,
            f,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -&self.nodes[a].value;
        self.push(Op::Neg(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    /// `max(a, lo)` elementwise; clamped entries pass no gradient.
    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(lo));
        self.push(Op::ClampMin(a, lo), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::DimensionMismatch(format!(
                "matmul of {sa:?} and {sb:?}"
            )));
        }
        let v = &self.nodes[a].value * &self.nodes[b].value;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = DMatrix::from_element(1, 1, self.nodes[a].value.sum());
        self.push(Op::Sum(a), v)
    }

    /// `n×m → n×1`.
    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let v = DMatrix::from_fn(m.nrows(), 1, |i, _| m.row(i).sum());
        self.push(Op::RowSums(a), v)
    }

    /// `n×m → 1×m`.
    pub fn col_sums(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let v = DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum());
        self.push(Op::ColSums(a), v)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimensionMismatch(format!(
                "dot of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let v = DMatrix::from_element(1, 1, self.nodes[a].value.dot(&self.nodes[b].value));
        Ok(self.push(Op::Dot(a, b), v))
    }

    pub fn col(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        if j >= self.shape(a).1 {
            return Err(Error::DimensionMismatch(format!(
                "column {j} of {:?}",
                self.shape(a)
            )));
        }
        let v = self.nodes[a].value.column(j).into_owned();
        let v = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        Ok(self.push(Op::Col(a, j), v))
    }

    pub fn hcat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map(|p| self.shape(*p).0).unwrap_or(0);
        if parts.iter().any(|p| self.shape(*p).0 != rows) {
            return Err(Error::DimensionMismatch(
                "hcat with differing row counts".into(),
            ));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let m = &self.nodes[*p].value;
            v.columns_mut(off, m.ncols()).copy_from(m);
            off += m.ncols();
        }
        Ok(self.push(Op::HCat(parts.to_vec()), v))
    }

    /// `L⁻¹ B` for lower-triangular `L`.
    pub fn solve_lower(&mut self, l: NodeId, b: NodeId) -> Result<NodeId> {
        let v = gauss::solve_lower(&self.nodes[l].value, &self.nodes[b].value)?;
        Ok(self.push(Op::SolveLower(l, b), v))
    }

    /// `L⁻ᵀ B` for lower-triangular `L`.
    pub fn solve_lower_t(&mut self, l: NodeId, b: NodeId) -> Result<NodeId> {
        let v = gauss::solve_lower_transpose(&self.nodes[l].value, &self.nodes[b].value)?;
        Ok(self.push(Op::SolveLowerT(l, b), v))
    }

    /// Cholesky factor of the symmetric part of `a`. No jitter is added here.
    pub fn cholesky(&mut self, a: NodeId) -> Result<NodeId> {
        let sym = gauss::symmetrize(&self.nodes[a].value);
        let l = gauss::cholesky(&sym).ok_or(Error::NotPositiveDefinite { last_jitter: 0.0 })?;
        Ok(self.push(Op::Cholesky(a), l))
    }

    /// `log det(L Lᵀ) = 2 Σ log L_ii`.
    pub fn log_det_chol(&mut self, l: NodeId) -> NodeId {
        let v = DMatrix::from_element(1, 1, gauss::log_det_from_chol(&self.nodes[l].value));
        self.push(Op::LogDetChol(l), v)
    }

    /// `mean + L z` with `mean` broadcast over the columns of `z`.
    pub fn reparam(&mut self, mean: NodeId, l: NodeId, z: NodeId) -> Result<NodeId> {
        let lz = &self.nodes[l].value * &self.nodes[z].value;
        let m = &self.nodes[mean].value;
        let shape = broadcast_shape(m.shape(), lz.shape())
            .filter(|s| *s == lz.shape())
            .ok_or_else(|| Error::DimensionMismatch("reparameterised sample mean shape".into()))?;
        let v = zip_broadcast(m, &lz, shape, |a, b| a + b);
        Ok(self.push(Op::Reparam(mean, l, z), v))
    }

    /// Strict lower part of `raw` with `softplus` applied to the diagonal.
    pub fn tril_softplus_diag(&mut self, raw: NodeId) -> Result<NodeId> {
        let r = &self.nodes[raw].value;
        if !r.is_square() {
            return Err(Error::DimensionMismatch(
                "cholesky parameter must be square".into(),
            ));
        }
        let v = DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => r[(i, j)],
            std::cmp::Ordering::Equal => softplus(r[(i, i)]),
            std::cmp::Ordering::Less => 0.0,
        });
        Ok(self.push(Op::TrilSoftplusDiag(raw), v))
    }

    /// RBF cross-covariance `K_ij = σ² exp(−½ Σ_d (x_id − z_jd)² / ℓ_d²)`
    /// with `variance` `1×1` and `lengthscales` `1×D`.
    pub fn rbf_cross(
        &mut self,
        x: NodeId,
        z: NodeId,
        variance: NodeId,
        lengthscales: NodeId,
    ) -> Result<NodeId> {
        let (xv, zv) = (&self.nodes[x].value, &self.nodes[z].value);
        let ls = &self.nodes[lengthscales].value;
        if xv.ncols() != zv.ncols()
            || ls.shape() != (1, xv.ncols())
            || self.shape(variance) != (1, 1)
        {
            return Err(Error::DimensionMismatch("rbf_cross argument shapes".into()));
        }
        let var = self.nodes[variance].value[(0, 0)];
        let v = rbf_values(xv, zv, var, ls);
        Ok(self.push(Op::RbfCross(x, z, variance, lengthscales), v))
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot(r, c));
        }
        let mut g: Vec<Option<DMatrix<f64>>> = vec![None; root + 1];
        g[root] = Some(DMatrix::from_element(1, 1, 1.0));
        for id in (0..=root).rev() {
            let Some(gout) = g[id].take() else { continue };
            let node = &self.nodes[id];
            let val = |n: NodeId| &self.nodes[n].value;
            let acc =
                |n: NodeId, d: DMatrix<f64>, g: &mut Vec<Option<DMatrix<f64>>>| match &mut g[n] {
                    Some(e) => *e += d,
                    slot @ None => *slot = Some(d),
                };
            match &node.op {
                Op::Leaf | Op::Const => {
                    g[id] = Some(gout);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, reduce_to(gout.clone(), val(*a).shape()), &mut g);
                    acc(*b, reduce_to(gout, val(*b).shape()), &mut g);
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to(gout.clone(), val(*a).shape()), &mut g);
                    acc(*b, -reduce_to(gout, val(*b).shape()), &mut g);
                }
                Op::Mul(a, b) => {
                    let s = gout.shape();
                    let ga = zip_broadcast(&gout, val(*b), s, |x, y| x * y);
                    let gb = zip_broadcast(&gout, val(*a), s, |x, y| x * y);
                    acc(*a, reduce_to(ga, val(*a).shape()), &mut g);
                    acc(*b, reduce_to(gb, val(*b).shape()), &mut g);
                }
                Op::Div(a, b) => {
                    let s = gout.shape();
                    let ga = zip_broadcast(&gout, val(*b), s, |x, y| x / y);
                    let q = zip_broadcast(val(*a), val(*b), s, |x, y| -x / (y * y));
                    let gb = gout.component_mul(&q);
                    acc(*a, reduce_to(ga, val(*a).shape()), &mut g);
                    acc(*b, reduce_to(gb, val(*b).shape()), &mut g);
                }
                Op::Scale(a, c) => acc(*a, gout * *c, &mut g),
                Op::Neg(a) => acc(*a, -gout, &mut g),
                Op::Exp(a) => acc(*a, gout.component_mul(&node.value), &mut g),
                Op::Log(a) => acc(*a, gout.component_div(val(*a)), &mut g),
                Op::Softplus(a) => acc(*a, gout.component_mul(&val(*a).map(sigmoid)), &mut g),
                Op::Square(a) => acc(*a, gout.component_mul(val(*a)) * 2.0, &mut g),
                Op::Sqrt(a) => acc(*a, gout.component_div(&(&node.value * 2.0)), &mut g),
                Op::ClampMin(a, lo) => {
                    let mask = val(*a).map(|x| if x > *lo { 1.0 } else { 0.0 });
                    acc(*a, gout.component_mul(&mask), &mut g)
                }
                Op::MatMul(a, b) => {
                    acc(*a, &gout * val(*b).transpose(), &mut g);
                    acc(*b, val(*a).transpose() * &gout, &mut g);
                }
                Op::Transpose(a) => acc(*a, gout.transpose(), &mut g),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, DMatrix::from_element(r, c, gout[(0, 0)]), &mut g)
                }
                Op::RowSums(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, DMatrix::from_fn(r, c, |i, _| gout[(i, 0)]), &mut g)
                }
                Op::ColSums(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, DMatrix::from_fn(r, c, |_, j| gout[(0, j)]), &mut g)
                }
                Op::Dot(a, b) => {
                    let s = gout[(0, 0)];
                    acc(*a, val(*b) * s, &mut g);
                    acc(*b, val(*a) * s, &mut g);
                }
                Op::Col(a, j) => {
                    let (r, c) = val(*a).shape();
                    let mut d = DMatrix::zeros(r, c);
                    d.column_mut(*j).copy_from(&gout.column(0));
                    acc(*a, d, &mut g)
                }
                Op::HCat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(*p, gout.columns(off, w).into_owned(), &mut g);
                        off += w;
                    }
                }
                Op::SolveLower(l, b) => {
                    let gb = gauss::solve_lower_transpose(val(*l), &gout)?;
                    let gl = tril(-(&gb * node.value.transpose()));
                    acc(*l, gl, &mut g);
                    acc(*b, gb, &mut g);
                }
                Op::SolveLowerT(l, b) => {
                    let gb = gauss::solve_lower(val(*l), &gout)?;
                    let gl = tril(-(&node.value * gb.transpose()));
                    acc(*l, gl, &mut g);
                    acc(*b, gb, &mut g);
                }
                Op::Cholesky(a) => {
                    let l = &node.value;
                    let mut p = tril(l.transpose() * &gout);
                    for i in 0..p.nrows() {
                        p[(i, i)] *= 0.5;
                    }
                    let s = gauss::solve_lower_transpose(l, &p)?;
                    let s = gauss::solve_lower_transpose(l, &s.transpose())?.transpose();
                    acc(*a, gauss::symmetrize(&s), &mut g)
                }
                Op::LogDetChol(l) => {
                    let lv = val(*l);
                    let n = lv.nrows();
                    let s = gout[(0, 0)];
                    acc(
                        *l,
                        DMatrix::from_fn(
                            n,
                            n,
                            |i, j| if i == j { 2.0 * s / lv[(i, i)] } else { 0.0 },
                        ),
                        &mut g,
                    )
                }
                Op::Reparam(mean, l, z) => {
                    acc(*mean, reduce_to(gout.clone(), val(*mean).shape()), &mut g);
                    acc(*l, &gout * val(*z).transpose(), &mut g);
                }
                Op::TrilSoftplusDiag(raw) => {
                    let r = val(*raw);
                    let d = DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| match i.cmp(&j) {
                        std::cmp::Ordering::Greater => gout[(i, j)],
                        std::cmp::Ordering::Equal => gout[(i, i)] * sigmoid(r[(i, i)]),
                        std::cmp::Ordering::Less => 0.0,
                    });
                    acc(*raw, d, &mut g)
                }
                Op::RbfCross(x, z, var, ls) => {
                    let (xv, zv, lsv) = (val(*x), val(*z), val(*ls));
                    let k = &node.value;
                    let (n, m, dd) = (xv.nrows(), zv.nrows(), xv.ncols());
                    let mut gx = DMatrix::zeros(n, dd);
                    let mut gz = DMatrix::zeros(m, dd);
                    let mut gls = DMatrix::zeros(1, dd);
                    let mut gvar = 0.0;
                    for j in 0..m {
                        for i in 0..n {
                            let gk = gout[(i, j)] * k[(i, j)];
                            if gk == 0.0 {
                                continue;
                            }
                            let mut s = 0.0;
                            for d in 0..dd {
                                let l2 = lsv[(0, d)] * lsv[(0, d)];
                                let diff = xv[(i, d)] - zv[(j, d)];
                                s += diff * diff / l2;
                                let t = gk * diff / l2;
                                gx[(i, d)] -= t;
                                gz[(j, d)] += t;
                                gls[(0, d)] += t * diff / lsv[(0, d)];
                            }
                            gvar += gout[(i, j)] * (-0.5 * s).exp();
                        }
                    }
                    acc(*x, gx, &mut g);
                    acc(*z, gz, &mut g);
                    acc(*var, DMatrix::from_element(1, 1, gvar), &mut g);
                    acc(*ls, gls, &mut g);
                }
            }
        }
        Ok(Gradients { grads: g })
    }
}

fn rbf_values(x: &DMatrix<f64>, z: &DMatrix<f64>, var: f64, ls: &DMatrix<f64>) -> DMatrix<f64> {
    let inv: Vec<f64> = ls.iter().map(|l| 1.0 / (l * l)).collect();
    DMatrix::from_fn(x.nrows(), z.nrows(), |i, j| {
        let mut s = 0.0;
        for (d, w) in inv.iter().enumerate() {
            let diff = x[(i, d)] - z[(j, d)];
            s += diff * diff * w;
        }
        var * (-0.5 * s).exp()
    })
}

/// Adjoints from one reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `id`, or `None` if it does not influence the root.
    pub fn get(&self, id: NodeId) -> Option<&DMatrix<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `id`, zeros of `shape` if unreached.
    pub fn wrt(&self, id: NodeId, shape: (usize, usize)) -> DMatrix<f64> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(shape.0, shape.1))
    }
}

/// Central-difference gradient check on an unconstrained vector. Returns the
/// largest relative error over coordinates where `|g| + |ĝ|` exceeds `1e-8`.
pub fn check_grad<F>(f: F, theta: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if analytic.len() != theta.len() {
        return Err(Error::DimensionMismatch(
            "gradient length differs from parameter length".into(),
        ));
    }
    let mut worst: f64 = 0.0;
    let mut th = theta.to_vec();
    for i in 0..theta.len() {
        th[i] = theta[i] + h;
        let up = f(&th)?;
        th[i] = theta[i] - h;
        let down = f(&th)?;
        th[i] = theta[i];
        let fd = (up - down) / (2.0 * h);
        let g = analytic[i];
        let denom = g.abs() + fd.abs();
        if denom > 1e-8 {
            worst = worst.max((g - fd).abs() / denom);
        }
    }
    Ok(worst)
}
