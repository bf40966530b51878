//! Unfolded circular (Morgan/ECFP-style) fingerprints and Tanimoto similarity.
//!
//! Hydrogens are folded into their heavy atom's invariant, so only heavy
//! atoms are fingerprint centers (all atoms when there are no heavy atoms).
//! From radius 1 on, an identifier is only emitted when its atom's bond
//! environment has grown into a set of bonds not already covered by another
//! emitted identifier.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::molecule::Molecule;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub feature_ids: BTreeSet<u64>,
    pub radius: usize,
}

impl Fingerprint {
    pub fn len(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature_ids.is_empty()
    }
}

/// ECFP4.
pub const DEFAULT_RADIUS: usize = 2;

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_seq(items: &[u64]) -> u64 {
    items
        .iter()
        .fold(0xCBF2_9CE4_8422_2325, |h, &x| mix64(h ^ mix64(x)))
}

pub fn ecfp(mol: &Molecule, radius: usize) -> Fingerprint {
    let n = mol.n_atoms();
    let any_heavy = mol.elements().iter().any(|e| !e.is_hydrogen());
    let centers: Vec<usize> = (0..n)
        .filter(|&i| !any_heavy || !mol.element(i).is_hydrogen())
        .collect();
    let is_center = |j: usize| !any_heavy || !mol.element(j).is_hydrogen();

    let mut ids = vec![0u64; n];
    for &i in &centers {
        let degree = mol.neighbors(i).filter(|&(j, _)| is_center(j)).count() as u64;
        let twice_order = (2.0 * mol.bond_order_sum(i)).round() as u64;
        let h = if any_heavy { mol.hydrogen_count(i) as u64 } else { 0 };
        ids[i] = hash_seq(&[mol.element(i).atomic_number() as u64, degree, twice_order, h]);
    }
    let mut features: BTreeSet<u64> = centers.iter().map(|&i| ids[i]).collect();

    // Bond environments as sets of (lo, hi) atom pairs.
    let mut envs: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); n];
    let mut seen_envs: BTreeSet<BTreeSet<(usize, usize)>> = BTreeSet::new();
    seen_envs.insert(BTreeSet::new());

    for _ in 0..radius {
        let mut next = ids.clone();
        for &i in &centers {
            let mut env: Vec<(u64, u64)> = mol
                .neighbors(i)
                .filter(|&(j, _)| is_center(j))
                .map(|(j, b)| (b.index() as u64, ids[j]))
                .collect();
            env.sort_unstable();
            let mut seq = Vec::with_capacity(1 + 2 * env.len());
            seq.push(ids[i]);
            for (b, id) in env {
                seq.push(b);
                seq.push(id);
            }
            next[i] = hash_seq(&seq);
        }
        ids = next;
        let mut grown = envs.clone();
        for &i in &centers {
            for (j, _) in mol.neighbors(i).filter(|&(j, _)| is_center(j)) {
                grown[i].insert((i.min(j), i.max(j)));
                grown[i].extend(envs[j].iter().copied());
            }
        }
        envs = grown;
        // Ties between atoms sharing an environment keep the smallest id.
        let mut fresh: Vec<(&BTreeSet<(usize, usize)>, u64)> = centers.iter().map(|&i| (&envs[i], ids[i])).collect();
        fresh.sort();
        for (env, id) in fresh {
            if seen_envs.insert(env.clone()) {
                features.insert(id);
            }
        }
    }
    Fingerprint { feature_ids: features, radius }
}

/// `|A ∩ B| / |A ∪ B|`; 1.0 when both sets are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    if a.radius != b.radius {
        return Err(CoreError::RadiusMismatch(a.radius, b.radius));
    }
    let inter = a.feature_ids.intersection(&b.feature_ids).count();
    let union = a.feature_ids.len() + b.feature_ids.len() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Tanimoto similarity of two molecules at the given radius.
pub fn similarity(a: &Molecule, b: &Molecule, radius: usize) -> f64 {
    tanimoto(&ecfp(a, radius), &ecfp(b, radius)).expect("same radius")
}
