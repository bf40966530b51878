//! Valence-based stability and validity checks.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::molecule::Molecule;

const VALENCE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub is_valid: bool,
    pub atom_stable_fraction: f64,
    pub mol_stable: bool,
    pub stable_atoms: usize,
    pub failure_reasons: Vec<String>,
}

/// An atom is stable when its total bond order equals one of its element's
/// allowed valences. A molecule is valid when its bond graph is connected and
/// no atom exceeds its largest allowed valence.
pub fn validate(mol: &Molecule) -> Result<ValidityReport> {
    let n = mol.n_atoms();
    if n == 0 {
        return Err(CoreError::InvalidMolecule("molecule has no atoms".into()));
    }
    let mut reasons = Vec::new();
    let mut stable = 0;
    let mut over_valent = false;
    for i in 0..n {
        let e = mol.element(i);
        let order = mol.bond_order_sum(i);
        if e
            .allowed_valences()
            .iter()
            .any(|&v| (order - v as f64).abs() < VALENCE_EPS)
        {
            stable += 1;
        }
        if order > e.max_valence() as f64 + VALENCE_EPS {
            over_valent = true;
            reasons.push(format!("atom {i} ({e}) has bond order {order} above {}", e.max_valence()));
        }
    }
    let components = connected_components(mol);
    if components.len() > 1 {
        reasons.push(format!("bond graph has {} fragments", components.len()));
    }
    Ok(ValidityReport {
        is_valid: components.len() == 1 && !over_valent,
        atom_stable_fraction: stable as f64 / n as f64,
        mol_stable: stable == n,
        stable_atoms: stable,
        failure_reasons: reasons,
    })
}

pub fn is_valid(mol: &Molecule) -> bool {
    validate(mol).map(|r| r.is_valid).unwrap_or(false)
}

/// Connected components of the bond graph, each sorted ascending.
pub fn connected_components(mol: &Molecule) -> Vec<Vec<usize>> {
    let n = mol.n_atoms();
    let mut label = vec![usize::MAX; n];
    let mut comps = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut stack = vec![start];
        let mut members = Vec::new();
        label[start] = id;
        while let Some(i) = stack.pop() {
            members.push(i);
            for (j, _) in mol.neighbors(i) {
                if label[j] == usize::MAX {
                    label[j] = id;
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps
}

/// Atoms within `k` bonds of any seed atom, ascending.
pub fn k_hop_neighborhood(mol: &Molecule, seeds: &[usize], k: usize) -> Vec<usize> {
    let n = mol.n_atoms();
    let mut dist = vec![usize::MAX; n];
    let mut frontier: Vec<usize> = Vec::new();
    for &s in seeds {
        if dist[s] != 0 {
            dist[s] = 0;
            frontier.push(s);
        }
    }
    for hop in 1..=k {
        let mut next = Vec::new();
        for &i in &frontier {
            for (j, _) in mol.neighbors(i) {
                if dist[j] == usize::MAX {
                    dist[j] = hop;
                    next.push(j);
                }
            }
        }
        frontier = next;
    }
    (0..n).filter(|&i| dist[i] != usize::MAX).collect()
}
