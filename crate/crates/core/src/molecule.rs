//! The molecule data model: atom types, a dense symmetric bond matrix and
//! Cartesian positions, plus the canonical JSON document format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::element::Element;
use crate::error::{CoreError, Result};

pub type Vec3 = Vector3<f64>;

pub const NUM_BOND_TYPES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum BondType {
    #[default]
    None,
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondType {
    pub const ALL: [BondType; NUM_BOND_TYPES] = [
        BondType::None,
        BondType::Single,
        BondType::Double,
        BondType::Triple,
        BondType::Aromatic,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Option<BondType> {
        Self::ALL.get(k).copied()
    }

    /// Bond order used for valence bookkeeping; aromatic bonds count 1.5.
    pub fn order(self) -> f64 {
        match self {
            BondType::None => 0.0,
            BondType::Single => 1.0,
            BondType::Double => 2.0,
            BondType::Triple => 3.0,
            BondType::Aromatic => 1.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BondType::None => "none",
            BondType::Single => "single",
            BondType::Double => "double",
            BondType::Triple => "triple",
            BondType::Aromatic => "aromatic",
        }
    }

    pub fn from_name(name: &str) -> Option<BondType> {
        Self::ALL.iter().copied().find(|b| b.name() == name)
    }

    pub fn is_bond(self) -> bool {
        self != BondType::None
    }
}

/// Ordered list of elements that defines the columns of the atom one-hot matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AtomVocab(Vec<Element>);

impl Default for AtomVocab {
    fn default() -> Self {
        use Element::*;
        AtomVocab(vec![H, C, N, O, F, P, S, Cl, Br])
    }
}

impl AtomVocab {
    pub fn new(elements: Vec<Element>) -> Result<Self> {
        if elements.is_empty() {
            return Err(CoreError::Invalid("atom vocabulary is empty".into()));
        }
        let mut seen = elements.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != elements.len() {
            return Err(CoreError::Invalid("atom vocabulary has duplicates".into()));
        }
        Ok(AtomVocab(elements))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn elements(&self) -> &[Element] {
        &self.0
    }

    pub fn element(&self, k: usize) -> Element {
        self.0[k]
    }

    pub fn index_of(&self, e: Element) -> Option<usize> {
        self.0.iter().position(|&x| x == e)
    }
}

/// A molecule `(H, E, P)`: one element per atom, a dense symmetric bond
/// matrix whose diagonal is always [`BondType::None`], and finite positions
/// in ångström.
#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    elements: Vec<Element>,
    bonds: Vec<BondType>,
    positions: Vec<Vec3>,
}

impl Molecule {
    /// Atoms without any bonds.
    pub fn new(elements: Vec<Element>, positions: Vec<Vec3>) -> Result<Self> {
        if elements.len() != positions.len() {
            return Err(CoreError::InvalidMolecule(format!(
                "{} elements but {} positions",
                elements.len(),
                positions.len()
            )));
        }
        if let Some(i) = positions
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(CoreError::InvalidMolecule(format!(
                "position of atom {i} is not finite"
            )));
        }
        let n = elements.len();
        Ok(Molecule {
            elements,
            bonds: vec![BondType::None; n * n],
            positions,
        })
    }

    pub fn with_bonds(
        elements: Vec<Element>,
        positions: Vec<Vec3>,
        bonds: &[(usize, usize, BondType)],
    ) -> Result<Self> {
        let mut mol = Molecule::new(elements, positions)?;
        for &(i, j, b) in bonds {
            mol.try_set_bond(i, j, b)?;
        }
        Ok(mol)
    }

    pub fn n_atoms(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn element(&self, i: usize) -> Element {
        self.elements[i]
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn set_element(&mut self, i: usize, e: Element) {
        self.elements[i] = e;
    }

    pub fn position(&self, i: usize) -> Vec3 {
        self.positions[i]
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn set_position(&mut self, i: usize, p: Vec3) {
        assert!(p.iter().all(|c| c.is_finite()), "non-finite position");
        self.positions[i] = p;
    }

    pub fn bond(&self, i: usize, j: usize) -> BondType {
        self.bonds[i * self.n_atoms() + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    ///
    /// Panics on out-of-range indices or a real bond on the diagonal.
    pub fn set_bond(&mut self, i: usize, j: usize, b: BondType) {
        self.try_set_bond(i, j, b).expect("set_bond");
    }

    pub fn try_set_bond(&mut self, i: usize, j: usize, b: BondType) -> Result<()> {
        let n = self.n_atoms();
        if i >= n || j >= n {
            return Err(CoreError::InvalidMolecule(format!(
                "bond ({i}, {j}) references an atom outside 0..{n}"
            )));
        }
        if i == j && b.is_bond() {
            return Err(CoreError::InvalidMolecule(format!("self bond on atom {i}")));
        }
        self.bonds[i * n + j] = b;
        self.bonds[j * n + i] = b;
        Ok(())
    }

    /// Real bonds as `(i, j, type)` with `i < j`, in row-major order.
    pub fn bond_list(&self) -> Vec<(usize, usize, BondType)> {
        let n = self.n_atoms();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let b = self.bond(i, j);
                if b.is_bond() {
                    out.push((i, j, b));
                }
            }
        }
        out
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, BondType)> + '_ {
        let n = self.n_atoms();
        (0..n).filter_map(move |j| {
            let b = self.bond(i, j);
            b.is_bond().then_some((j, b))
        })
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    /// Total bond order of atom `i` (aromatic = 1.5).
    pub fn bond_order_sum(&self, i: usize) -> f64 {
        self.neighbors(i).map(|(_, b)| b.order()).sum()
    }

    pub fn hydrogen_count(&self, i: usize) -> usize {
        self.neighbors(i)
            .filter(|&(j, _)| self.elements[j].is_hydrogen())
            .count()
    }

    /// Reorders atoms so that new atom `k` is old atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Molecule {
        let n = self.n_atoms();
        assert_eq!(perm.len(), n, "permutation length");
        let mut out = Molecule {
            elements: perm.iter().map(|&p| self.elements[p]).collect(),
            bonds: vec![BondType::None; n * n],
            positions: perm.iter().map(|&p| self.positions[p]).collect(),
        };
        for a in 0..n {
            for b in 0..n {
                out.bonds[a * n + b] = self.bond(perm[a], perm[b]);
            }
        }
        out
    }

    /// Induced sub-molecule on `indices` (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Molecule {
        let m = indices.len();
        let mut out = Molecule {
            elements: indices.iter().map(|&p| self.elements[p]).collect(),
            bonds: vec![BondType::None; m * m],
            positions: indices.iter().map(|&p| self.positions[p]).collect(),
        };
        for a in 0..m {
            for b in 0..m {
                out.bonds[a * m + b] = self.bond(indices[a], indices[b]);
            }
        }
        out
    }

    /// Appends an unbonded atom and returns its index.
    pub fn push_atom(&mut self, e: Element, p: Vec3) -> usize {
        let n = self.n_atoms();
        let mut bonds = vec![BondType::None; (n + 1) * (n + 1)];
        for i in 0..n {
            for j in 0..n {
                bonds[i * (n + 1) + j] = self.bonds[i * n + j];
            }
        }
        self.bonds = bonds;
        self.elements.push(e);
        self.positions.push(p);
        n
    }

    pub fn translated(&self, shift: &Vec3) -> Molecule {
        let mut out = self.clone();
        for p in &mut out.positions {
            *p += shift;
        }
        out
    }

    /// Atom matrix `H` (n × a), one-hot over `vocab`.
    pub fn atom_onehot(&self, vocab: &AtomVocab) -> Result<DMatrix<f64>> {
        let mut h = DMatrix::zeros(self.n_atoms(), vocab.len());
        for (i, &e) in self.elements.iter().enumerate() {
            let k = vocab
                .index_of(e)
                .ok_or_else(|| CoreError::NotInVocabulary(e.to_string()))?;
            h[(i, k)] = 1.0;
        }
        Ok(h)
    }

    /// Atom type indices into `vocab`.
    pub fn atom_indices(&self, vocab: &AtomVocab) -> Result<Vec<usize>> {
        self.elements
            .iter()
            .map(|&e| {
                vocab
                    .index_of(e)
                    .ok_or_else(|| CoreError::NotInVocabulary(e.to_string()))
            })
            .collect()
    }

    /// Bond category indices, row-major `n × n`.
    pub fn bond_indices(&self) -> Vec<usize> {
        self.bonds.iter().map(|b| b.index()).collect()
    }

    /// Rebuilds a molecule from category indices.
    pub fn from_indices(
        vocab: &AtomVocab,
        atoms: &[usize],
        bonds: &[usize],
        positions: Vec<Vec3>,
    ) -> Result<Self> {
        let n = atoms.len();
        if bonds.len() != n * n {
            return Err(CoreError::InvalidMolecule(format!(
                "bond matrix has {} entries, expected {}",
                bonds.len(),
                n * n
            )));
        }
        let elements = atoms
            .iter()
            .map(|&k| {
                (k < vocab.len())
                    .then(|| vocab.element(k))
                    .ok_or_else(|| CoreError::InvalidMolecule(format!("atom category {k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mol = Molecule::new(elements, positions)?;
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (bonds[i * n + j], bonds[j * n + i]);
                if a != b {
                    return Err(CoreError::InvalidMolecule(format!(
                        "bond matrix asymmetric at ({i}, {j})"
                    )));
                }
                let bt = BondType::from_index(a)
                    .ok_or_else(|| CoreError::InvalidMolecule(format!("bond category {a}")))?;
                mol.try_set_bond(i, j, bt)?;
            }
        }
        Ok(mol)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        Self::from_json_value(&value)
    }

    pub fn from_json_value(value: &Value) -> Result<Self> {
        let schema = |path: &str, message: String| CoreError::Schema {
            path: path.to_string(),
            message,
        };
        let obj = value
            .as_object()
            .ok_or_else(|| schema("$", "expected an object".into()))?;
        for key in obj.keys() {
            if !matches!(key.as_str(), "atoms" | "positions" | "bonds") {
                return Err(schema(&format!("$.{key}"), "unknown field".into()));
            }
        }
        let atoms = obj
            .get("atoms")
            .and_then(Value::as_array)
            .ok_or_else(|| schema("$.atoms", "expected an array of element symbols".into()))?;
        let mut elements = Vec::with_capacity(atoms.len());
        for (k, a) in atoms.iter().enumerate() {
            let path = format!("$.atoms[{k}]");
            let sym = a
                .as_str()
                .ok_or_else(|| schema(&path, "expected a string".into()))?;
            let e: Element = sym
                .parse()
                .map_err(|_| schema(&path, format!("unknown element `{sym}`")))?;
            elements.push(e);
        }
        let n = elements.len();

        let positions_v = obj
            .get("positions")
            .and_then(Value::as_array)
            .ok_or_else(|| schema("$.positions", "expected an array of [x, y, z]".into()))?;
        if positions_v.len() != n {
            return Err(schema(
                "$.positions",
                format!("{} rows for {n} atoms", positions_v.len()),
            ));
        }
        let mut positions = Vec::with_capacity(n);
        for (k, row) in positions_v.iter().enumerate() {
            let path = format!("$.positions[{k}]");
            let row = row
                .as_array()
                .filter(|r| r.len() == 3)
                .ok_or_else(|| schema(&path, "expected [x, y, z]".into()))?;
            let mut p = Vec3::zeros();
            for c in 0..3 {
                let x = row[c]
                    .as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| schema(&format!("{path}[{c}]"), "expected a finite number".into()))?;
                p[c] = x;
            }
            positions.push(p);
        }

        let mut mol = Molecule::new(elements, positions)?;
        let bonds_v = match obj.get("bonds") {
            None => return Ok(mol),
            Some(v) => v
                .as_array()
                .ok_or_else(|| schema("$.bonds", "expected an array of [i, j, type]".into()))?,
        };
        let mut seen: BTreeMap<(usize, usize), BondType> = BTreeMap::new();
        for (k, entry) in bonds_v.iter().enumerate() {
            let path = format!("$.bonds[{k}]");
            let entry = entry
                .as_array()
                .filter(|e| e.len() == 3)
                .ok_or_else(|| schema(&path, "expected [i, j, type]".into()))?;
            let mut ends = [0usize; 2];
            for c in 0..2 {
                let idx = entry[c]
                    .as_u64()
                    .ok_or_else(|| schema(&format!("{path}[{c}]"), "expected an atom index".into()))?
                    as usize;
                if idx >= n {
                    return Err(schema(
                        &format!("{path}[{c}]"),
                        format!("atom index {idx} out of range for {n} atoms"),
                    ));
                }
                ends[c] = idx;
            }
            let name = entry[2]
                .as_str()
                .ok_or_else(|| schema(&format!("{path}[2]"), "expected a bond type".into()))?;
            let bt = BondType::from_name(name)
                .filter(|b| b.is_bond())
                .ok_or_else(|| schema(&format!("{path}[2]"), format!("invalid bond type `{name}`")))?;
            let (i, j) = (ends[0], ends[1]);
            if i == j {
                return Err(schema(&path, format!("self bond on atom {i}")));
            }
            let key = (i.min(j), i.max(j));
            if let Some(prev) = seen.insert(key, bt) {
                let message = if prev != bt {
                    format!(
                        "asymmetric bond: ({}, {}) listed as both {} and {}",
                        key.0,
                        key.1,
                        prev.name(),
                        bt.name()
                    )
                } else {
                    format!("duplicate bond ({}, {})", key.0, key.1)
                };
                return Err(schema(&path, message));
            }
            mol.set_bond(i, j, bt);
        }
        Ok(mol)
    }

    /// Canonical document: keys sorted, bonds listed once with `i < j` in
    /// row-major order, coordinates printed with six decimals.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\"atoms\":[");
        for (k, e) in self.elements.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            let _ = write!(s, "\"{}\"", e.symbol());
        }
        s.push_str("],\"bonds\":[");
        for (k, (i, j, b)) in self.bond_list().into_iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            let _ = write!(s, "[{i},{j},\"{}\"]", b.name());
        }
        s.push_str("],\"positions\":[");
        for (k, p) in self.positions.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            let _ = write!(s, "[{},{},{}]", fmt6(p.x), fmt6(p.y), fmt6(p.z));
        }
        s.push_str("]}");
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

fn fmt6(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}
