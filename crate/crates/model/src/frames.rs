//! Per-edge orthonormal frames `f1 = (p_i − p_j)/‖·‖`, `f2 = (p_i × p_j)/‖·‖`,
//! `f3 = f1 × f2`, with scalarization (projection onto a frame) and
//! tensorization (reconstruction from frame coordinates).
//!
//! `f2` is a cross product of positions, so a reflection flips it relative
//! to the reflected frame: frame coordinates along `f2` change sign and the
//! network is not forced to be mirror symmetric.

use candle_core::{Tensor, D};
use nalgebra::Matrix3;

use crate::error::{ModelError, Result};
use crate::nn::device;
use molprompt_core::Vec3;

pub const DEGENERACY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivariantFrame {
    pub f1: Vec3,
    pub f2: Vec3,
    pub f3: Vec3,
    /// Set when `p_i − p_j` or `p_i × p_j` is too short; the frame is then
    /// the canonical basis and the edge contributes no position update.
    pub degenerate: bool,
}

impl EquivariantFrame {
    pub fn canonical() -> Self {
        EquivariantFrame { f1: Vec3::x(), f2: Vec3::y(), f3: Vec3::z(), degenerate: true }
    }

    pub fn new(pi: &Vec3, pj: &Vec3) -> Self {
        let d = pi - pj;
        let c = pi.cross(pj);
        if d.norm() < DEGENERACY_EPS || c.norm() < DEGENERACY_EPS {
            return Self::canonical();
        }
        let f1 = d / d.norm();
        let f2 = c / c.norm();
        EquivariantFrame { f1, f2, f3: f1.cross(&f2), degenerate: false }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_rows(&[self.f1.transpose(), self.f2.transpose(), self.f3.transpose()])
    }

    pub fn scalarize(&self, v: &Vec3) -> [f64; 3] {
        [v.dot(&self.f1), v.dot(&self.f2), v.dot(&self.f3)]
    }

    pub fn tensorize(&self, a: [f64; 3]) -> Vec3 {
        self.f1 * a[0] + self.f2 * a[1] + self.f3 * a[2]
    }
}

/// Frames for every ordered pair `(i, j)` of already-centred positions,
/// row-major `n × n`.
pub fn build_edge_frames(positions: &[Vec3]) -> Result<Vec<EquivariantFrame>> {
    let n = positions.len();
    if n < 2 {
        return Err(ModelError::Config(format!("edge frames need at least 2 atoms, got {n}")));
    }
    let mut out = Vec::with_capacity(n * n);
    for pi in positions {
        for pj in positions {
            out.push(EquivariantFrame::new(pi, pj));
        }
    }
    Ok(out)
}

/// Batched frames over padded positions `[B, N, 3]`.
#[derive(Debug, Clone)]
pub struct FrameTensors {
    /// Each `[B, N, N, 3]`.
    pub f: [Tensor; 3],
    /// `[B, N, N, 1]`: 1 for non-degenerate edges between real atoms.
    pub ok: Tensor,
}

fn component(x: &Tensor, k: usize) -> Result<Tensor> {
    Ok(x.narrow(D::Minus1, k, 1)?)
}

/// Cross product over the last dimension with broadcasting.
pub fn cross(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ax, ay, az) = (component(a, 0)?, component(a, 1)?, component(a, 2)?);
    let (bx, by, bz) = (component(b, 0)?, component(b, 1)?, component(b, 2)?);
    let cx = ay.broadcast_mul(&bz)?.broadcast_sub(&az.broadcast_mul(&by)?)?;
    let cy = az.broadcast_mul(&bx)?.broadcast_sub(&ax.broadcast_mul(&bz)?)?;
    let cz = ax.broadcast_mul(&by)?.broadcast_sub(&ay.broadcast_mul(&bx)?)?;
    Ok(Tensor::cat(&[cx, cy, cz], D::Minus1)?)
}

fn axis(k: usize) -> Result<Tensor> {
    let mut v = [0.0f64; 3];
    v[k] = 1.0;
    Ok(Tensor::new(&v, &device())?)
}

/// `pair_mask` is `[B, N, N, 1]` with 1 where both atoms are real.
pub fn frame_tensors(pos: &Tensor, pair_mask: &Tensor) -> Result<FrameTensors> {
    let pi = pos.unsqueeze(2)?;
    let pj = pos.unsqueeze(1)?;
    let d = pi.broadcast_sub(&pj)?;
    let c = cross(&pi, &pj)?;
    let long = |v: &Tensor| -> Result<Tensor> {
        let n2 = v.detach().sqr()?.sum_keepdim(D::Minus1)?;
        Ok(n2.ge(DEGENERACY_EPS * DEGENERACY_EPS)?.to_dtype(crate::nn::DTYPE)?)
    };
    let ok = long(&d)?.mul(&long(&c)?)?.mul(pair_mask)?;
    let not_ok = ok.affine(-1.0, 1.0)?;
    let safe_unit = |v: &Tensor, k: usize| -> Result<Tensor> {
        let s = v.broadcast_mul(&ok)?.broadcast_add(&not_ok.broadcast_mul(&axis(k)?)?)?;
        let norm = s.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
        Ok(s.broadcast_div(&norm)?)
    };
    let f1 = safe_unit(&d, 0)?;
    let f2 = safe_unit(&c, 1)?;
    let f3 = cross(&f1, &f2)?;
    Ok(FrameTensors { f: [f1, f2, f3], ok })
}

impl FrameTensors {
    /// Projects per-atom vectors `[B, N, 3]` onto the frames, taking the
    /// vector of atom `i` (`source_is_i`) or atom `j`; result `[B, N, N, 3]`.
    pub fn scalarize(&self, v: &Tensor, source_is_i: bool) -> Result<Tensor> {
        let v = if source_is_i { v.unsqueeze(2)? } else { v.unsqueeze(1)? };
        let parts = self
            .f
            .iter()
            .map(|f| Ok(f.broadcast_mul(&v)?.sum_keepdim(D::Minus1)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, D::Minus1)?)
    }

    /// `Σ_k a_k f_k` for coefficients `[B, N, N, 3]`.
    pub fn tensorize(&self, a: &Tensor) -> Result<Tensor> {
        let mut out = self.f[0].broadcast_mul(&a.narrow(D::Minus1, 0, 1)?)?;
        for k in 1..3 {
            out = out.add(&self.f[k].broadcast_mul(&a.narrow(D::Minus1, k, 1)?)?)?;
        }
        Ok(out)
    }
}
