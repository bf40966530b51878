//! Dense relaxed molecular states exchanged between the networks, the
//! samplers and the guidance code.

use nalgebra::DMatrix;

use crate::error::{ModelError, Result};
use molprompt_core::{AtomVocab, BondType, Molecule, Vec3, NUM_BOND_TYPES};

/// Positions `n × 3`, atom rows `n × a` and bond rows `(n·n) × b` (row
/// `i·n + j`). Atom and bond rows lie on the probability simplex; the bond
/// rows are symmetric in `(i, j)` with "none" on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct MolState {
    pub pos: DMatrix<f64>,
    pub atoms: DMatrix<f64>,
    pub bonds: DMatrix<f64>,
}

impl MolState {
    pub fn n_atoms(&self) -> usize {
        self.pos.nrows()
    }

    pub fn from_molecule(mol: &Molecule, vocab: &AtomVocab) -> Result<MolState> {
        let n = mol.n_atoms();
        let atoms = mol.atom_onehot(vocab)?;
        let mut bonds = DMatrix::zeros(n * n, NUM_BOND_TYPES);
        for i in 0..n {
            for j in 0..n {
                bonds[(i * n + j, mol.bond(i, j).index())] = 1.0;
            }
        }
        let pos = DMatrix::from_fn(n, 3, |i, c| mol.position(i)[c]);
        Ok(MolState { pos, atoms, bonds })
    }

    /// Argmax decoding; ties go to the lowest category index.
    pub fn decode(&self, vocab: &AtomVocab) -> Result<Molecule> {
        let n = self.n_atoms();
        let elements = (0..n).map(|i| vocab.element(argmax(self.atoms.row(i).iter().copied()))).collect();
        let positions = (0..n).map(|i| Vec3::new(self.pos[(i, 0)], self.pos[(i, 1)], self.pos[(i, 2)])).collect();
        let mut mol = Molecule::new(elements, positions)?;
        for i in 0..n {
            for j in (i + 1)..n {
                let row = self.bonds.row(i * n + j);
                let k = argmax(row.iter().copied());
                mol.set_bond(i, j, BondType::from_index(k).expect("bond index in range"));
            }
        }
        Ok(mol)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, m) in [("positions", &self.pos), ("atom rows", &self.atoms), ("bond rows", &self.bonds)] {
            if let Some(k) = m.iter().position(|x| !x.is_finite()) {
                return Err(ModelError::NonFinite(format!("{name} (flat index {k})")));
            }
        }
        Ok(())
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.n_atoms().max(1) as f64;
        Vec3::new(self.pos.column(0).sum() / n, self.pos.column(1).sum() / n, self.pos.column(2).sum() / n)
    }

    pub fn translate(&mut self, shift: &Vec3) {
        for i in 0..self.n_atoms() {
            for c in 0..3 {
                self.pos[(i, c)] += shift[c];
            }
        }
    }

    /// Sub-state on `indices` (in the given order).
    pub fn subset(&self, indices: &[usize]) -> MolState {
        let n = self.n_atoms();
        let m = indices.len();
        let pos = DMatrix::from_fn(m, 3, |r, c| self.pos[(indices[r], c)]);
        let atoms = DMatrix::from_fn(m, self.atoms.ncols(), |r, c| self.atoms[(indices[r], c)]);
        let bonds = DMatrix::from_fn(m * m, self.bonds.ncols(), |r, c| {
            let (a, b) = (indices[r / m], indices[r % m]);
            self.bonds[(a * n + b, c)]
        });
        MolState { pos, atoms, bonds }
    }
}

/// Index of the largest entry; the first wins ties.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, v) in values.enumerate() {
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    best
}

/// Unordered pairs `(i, j)` with `i < j`.
pub fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect()
}

/// Builds symmetric `(n·n) × b` bond rows from rows over [`upper_pairs`];
/// the diagonal is set to "none".
pub fn bonds_from_upper(n: usize, upper: &DMatrix<f64>) -> DMatrix<f64> {
    let b = upper.ncols();
    let mut out = DMatrix::zeros(n * n, b);
    for (r, (i, j)) in upper_pairs(n).into_iter().enumerate() {
        for c in 0..b {
            out[(i * n + j, c)] = upper[(r, c)];
            out[(j * n + i, c)] = upper[(r, c)];
        }
    }
    for i in 0..n {
        out[(i * n + i, BondType::None.index())] = 1.0;
    }
    out
}

pub fn upper_rows(n: usize, bonds: &DMatrix<f64>) -> DMatrix<f64> {
    let pairs = upper_pairs(n);
    DMatrix::from_fn(pairs.len(), bonds.ncols(), |r, c| {
        let (i, j) = pairs[r];
        bonds[(i * n + j, c)]
    })
}

/// The denoiser's estimate of the clean state.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub pos0: DMatrix<f64>,
    pub atom_probs: DMatrix<f64>,
    pub bond_probs: DMatrix<f64>,
}
