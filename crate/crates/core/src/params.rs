//! Flat unconstrained view of the model parameters for optimisation.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{softplus, softplus_inv, Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::kernel::InducingSet;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Softplus,
    /// Lower-triangular factor stored as packed lower entries, diagonal
    /// through softplus.
    CholSoftplusDiag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    M0(usize),
    S0(usize),
    ProcessNoise(usize),
    Inducing(usize),
    KernelVariance(usize, usize),
    Lengthscales(usize, usize),
    FmMean(usize, usize),
    FmChol(usize, usize),
    ObsNoise,
}

impl Slot {
    pub fn component(&self) -> Option<usize> {
        match *self {
            Slot::M0(l)
            | Slot::S0(l)
            | Slot::ProcessNoise(l)
            | Slot::Inducing(l)
            | Slot::KernelVariance(l, _)
            | Slot::Lengthscales(l, _)
            | Slot::FmMean(l, _)
            | Slot::FmChol(l, _) => Some(l),
            Slot::ObsNoise => None,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            Slot::M0(l) => format!("c{l}.m0"),
            Slot::S0(l) => format!("c{l}.s0_chol"),
            Slot::ProcessNoise(l) => format!("c{l}.q"),
            Slot::Inducing(l) => format!("c{l}.z"),
            Slot::KernelVariance(l, d) => format!("c{l}.d{d}.variance"),
            Slot::Lengthscales(l, d) => format!("c{l}.d{d}.lengthscales"),
            Slot::FmMean(l, d) => format!("c{l}.d{d}.m_m"),
            Slot::FmChol(l, d) => format!("c{l}.d{d}.s_m_chol"),
            Slot::ObsNoise => "omega".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub slot: Slot,
    pub transform: Transform,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub len: usize,
    /// Raw coordinates parameterize `scale · value`, so that optimizer steps
    /// on the inducing posterior mean the same at every resolution.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub blocks: Vec<Block>,
    pub len: usize,
}

fn get(model: &Model, slot: Slot) -> DMatrix<f64> {
    let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    match slot {
        Slot::M0(l) => col(&model.components[l].m0),
        Slot::S0(l) => model.components[l].s0_chol.clone(),
        Slot::ProcessNoise(l) => col(&model.components[l].q_diag),
        Slot::Inducing(l) => model.components[l].inducing.inputs.clone(),
        Slot::KernelVariance(l, d) => {
            DMatrix::from_element(1, 1, model.components[l].kernels[d].variance)
        }
        Slot::Lengthscales(l, d) => {
            let ls = &model.components[l].kernels[d].lengthscales;
            DMatrix::from_row_slice(1, ls.len(), ls)
        }
        Slot::FmMean(l, d) => col(&model.components[l].q_fm[d].mean),
        Slot::FmChol(l, d) => model.components[l].q_fm[d].chol.clone(),
        Slot::ObsNoise => {
            let o = &model.emission.obs_noise;
            DMatrix::from_column_slice(o.len(), 1, o)
        }
    }
}

fn set(model: &mut Model, slot: Slot, v: DMatrix<f64>) -> Result<()> {
    let col = |m: &DMatrix<f64>| DVector::from_column_slice(m.as_slice());
    match slot {
        Slot::M0(l) => model.components[l].m0 = col(&v),
        Slot::S0(l) => model.components[l].s0_chol = v,
        Slot::ProcessNoise(l) => model.components[l].q_diag = col(&v),
        Slot::Inducing(l) => model.components[l].inducing = InducingSet::new(v)?,
        Slot::KernelVariance(l, d) => model.components[l].kernels[d].variance = v[(0, 0)],
        Slot::Lengthscales(l, d) => {
            model.components[l].kernels[d].lengthscales = v.iter().copied().collect()
        }
        Slot::FmMean(l, d) => model.components[l].q_fm[d].mean = col(&v),
        Slot::FmChol(l, d) => model.components[l].q_fm[d].chol = v,
        Slot::ObsNoise => model.emission.obs_noise = v.iter().copied().collect(),
    }
    Ok(())
}

fn lower_entries(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |j| (j..n).map(move |i| (i, j)))
}

impl ParamLayout {
    pub fn for_model(model: &Model) -> Self {
        let mut slots = Vec::new();
        for (l, c) in model.components.iter().enumerate() {
            let d_in = c.dim + c.input_dim;
            let m = c.num_inducing();
            let r = c.resolution as f64;
            slots.push((Slot::M0(l), Transform::Identity, c.dim, 1, 1.0));
            slots.push((Slot::S0(l), Transform::CholSoftplusDiag, c.dim, c.dim, 1.0));
            slots.push((Slot::ProcessNoise(l), Transform::Softplus, c.dim, 1, 1.0));
            slots.push((Slot::Inducing(l), Transform::Identity, m, d_in, 1.0));
            for d in 0..c.dim {
                slots.push((Slot::KernelVariance(l, d), Transform::Softplus, 1, 1, 1.0));
                slots.push((Slot::Lengthscales(l, d), Transform::Softplus, 1, d_in, 1.0));
                slots.push((Slot::FmMean(l, d), Transform::Identity, m, 1, r));
                slots.push((Slot::FmChol(l, d), Transform::CholSoftplusDiag, m, m, r));
            }
        }
        slots.push((Slot::ObsNoise, Transform::Softplus, model.out_dim(), 1, 1.0));
        let mut offset = 0;
        let blocks = slots
            .into_iter()
            .map(|(slot, transform, rows, cols, scale)| {
                let len = match transform {
                    Transform::CholSoftplusDiag => rows * (rows + 1) / 2,
                    _ => rows * cols,
                };
                let b = Block {
                    slot,
                    transform,
                    rows,
                    cols,
                    offset,
                    len,
                    scale,
                };
                offset += len;
                b
            })
            .collect();
        Self {
            blocks,
            len: offset,
        }
    }

    /// Unconstrained coordinates of `model`.
    pub fn pack(&self, model: &Model) -> Result<Vec<f64>> {
        let mut theta = vec![0.0; self.len];
        for b in &self.blocks {
            let v = get(model, b.slot) * b.scale;
            if v.shape() != (b.rows, b.cols) {
                return Err(Error::DimensionMismatch(format!(
                    "block {} has shape {:?}",
                    b.slot.name(),
                    v.shape()
                )));
            }
            let out = &mut theta[b.offset..b.offset + b.len];
            match b.transform {
                Transform::Identity => out.copy_from_slice(v.as_slice()),
                Transform::Softplus => {
                    for (o, x) in out.iter_mut().zip(v.iter()) {
                        if !(*x > 0.0) {
                            return Err(Error::InvalidParameter(format!(
                                "{} must be positive",
                                b.slot.name()
                            )));
                        }
                        *o = softplus_inv(*x);
                    }
                }
                Transform::CholSoftplusDiag => {
                    for (o, (i, j)) in out.iter_mut().zip(lower_entries(b.rows)) {
                        let x = v[(i, j)];
                        *o = if i == j {
                            if !(x > 0.0) {
                                return Err(Error::InvalidParameter(format!(
                                    "{} needs a positive diagonal",
                                    b.slot.name()
                                )));
                            }
                            softplus_inv(x)
                        } else {
                            x
                        };
                    }
                }
            }
        }
        Ok(theta)
    }

    /// Raw (unconstrained) matrix for a block: the tape leaf value.
    pub fn raw_matrix(&self, b: &Block, theta: &[f64]) -> DMatrix<f64> {
        let s = &theta[b.offset..b.offset + b.len];
        match b.transform {
            Transform::CholSoftplusDiag => {
                let mut m = DMatrix::zeros(b.rows, b.rows);
                for (x, (i, j)) in s.iter().zip(lower_entries(b.rows)) {
                    m[(i, j)] = *x;
                }
                m
            }
            _ => DMatrix::from_column_slice(b.rows, b.cols, s),
        }
    }

    pub fn constrained(&self, b: &Block, theta: &[f64]) -> DMatrix<f64> {
        let raw = self.raw_matrix(b, theta);
        let v = match b.transform {
            Transform::Identity => raw,
            Transform::Softplus => raw.map(softplus),
            Transform::CholSoftplusDiag => {
                let mut m = raw;
                for i in 0..m.nrows() {
                    m[(i, i)] = softplus(m[(i, i)]);
                }
                m
            }
        };
        if b.scale == 1.0 {
            v
        } else {
            v / b.scale
        }
    }

    /// Copy of `template` with every block replaced from `theta`.
    pub fn unpack(&self, theta: &[f64], template: &Model) -> Result<Model> {
        if theta.len() != self.len {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for a layout of {}",
                theta.len(),
                self.len
            )));
        }
        let mut m = template.clone();
        for b in &self.blocks {
            set(&mut m, b.slot, self.constrained(b, theta))?;
        }
        Ok(m)
    }

    /// Coordinate indices owned by component `l` or shared across components.
    pub fn indices_for(&self, l: usize) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|b| b.slot.component().is_none_or(|c| c == l))
            .flat_map(|b| b.offset..b.offset + b.len)
            .collect()
    }

    pub fn block(&self, slot: Slot) -> Option<&Block> {
        self.blocks.iter().find(|b| b.slot == slot)
    }

    /// Records the blocks of component `l` (and the shared ones) as leaves,
    /// applies the transforms, and returns the constrained nodes.
    pub fn record(&self, tape: &mut Tape, theta: &[f64], l: usize) -> Result<ParamNodes> {
        let mut nodes = ParamNodes::default();
        for b in &self.blocks {
            if b.slot.component().is_some_and(|c| c != l) {
                continue;
            }
            let leaf = tape.leaf(b.slot.name(), self.raw_matrix(b, theta));
            let out = match b.transform {
                Transform::Identity => leaf,
                Transform::Softplus => tape.softplus(leaf),
                Transform::CholSoftplusDiag => tape.tril_softplus_diag(leaf)?,
            };
            let out = if b.scale == 1.0 {
                out
            } else {
                tape.scale(out, 1.0 / b.scale)
            };
            nodes.leaves.push((b.clone(), leaf));
            nodes.values.push((b.slot, out));
        }
        Ok(nodes)
    }

    /// Gathers leaf adjoints into a full-length vector (zero elsewhere).
    pub fn gather(&self, nodes: &ParamNodes, g: &Gradients) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (b, leaf) in &nodes.leaves {
            let Some(gm) = g.get(*leaf) else { continue };
            let dst = &mut out[b.offset..b.offset + b.len];
            match b.transform {
                Transform::CholSoftplusDiag => {
                    for (o, (i, j)) in dst.iter_mut().zip(lower_entries(b.rows)) {
                        *o = gm[(i, j)];
                    }
                }
                _ => dst.copy_from_slice(gm.as_slice()),
            }
        }
        out
    }
}

/// Tape nodes for the constrained parameters of one component.
#[derive(Debug, Clone, Default)]
pub struct ParamNodes {
    leaves: Vec<(Block, NodeId)>,
    values: Vec<(Slot, NodeId)>,
}

impl ParamNodes {
    pub fn get(&self, slot: Slot) -> Result<NodeId> {
        self.values
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|(_, n)| *n)
            .ok_or_else(|| {
                Error::InvalidParameter(format!("parameter {} not recorded", slot.name()))
            })
    }
}
