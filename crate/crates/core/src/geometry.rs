//! Center of mass and rigid motions.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::molecule::{Molecule, Vec3};

/// Per-atom weighting for [`center_of_mass`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weights {
    /// Arithmetic mean of positions.
    #[default]
    Uniform,
    /// Standard atomic weights.
    Atomic,
}

pub fn center_of_mass(mol: &Molecule, weights: Weights) -> Result<Vec3> {
    if mol.is_empty() {
        return Err(CoreError::InvalidMolecule("center of mass of an empty molecule".into()));
    }
    let mut acc = Vec3::zeros();
    let mut total = 0.0;
    for (i, p) in mol.positions().iter().enumerate() {
        let w = match weights {
            Weights::Uniform => 1.0,
            Weights::Atomic => mol.element(i).mass(),
        };
        acc += p * w;
        total += w;
    }
    Ok(acc / total)
}

/// Mean of a point set; zero for an empty set.
pub fn mean_position(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().sum::<Vec3>() / points.len() as f64
}

/// `P' = P·Rᵀ + t`. `rotation` may be improper (a reflection) but must be
/// orthogonal within 1e-10.
pub fn apply_rigid_motion(mol: &Molecule, rotation: &Matrix3<f64>, translation: &Vec3) -> Result<Molecule> {
    let dev = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
    if dev > 1e-10 {
        return Err(CoreError::NotOrthogonal(dev));
    }
    let mut out = mol.clone();
    for i in 0..mol.n_atoms() {
        out.set_position(i, rotation * mol.position(i) + translation);
    }
    Ok(out)
}

/// Signed volume `(b − a) · ((c − a) × (d − a))`; changes sign under reflection.
pub fn signed_volume(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    (b - a).dot(&(c - a).cross(&(d - a)))
}

/// Uniformly distributed proper rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let q = Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix()
}

/// Reflection through the xy-plane.
pub fn mirror_z() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0))
}
