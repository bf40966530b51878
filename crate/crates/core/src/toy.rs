//! A small built-in corpus of organic molecules with force-field geometries,
//! plus reference molecules used by fingerprint and chirality checks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::LabeledMolecule;
use crate::element::Element;
use crate::error::Result;
use crate::geometry::{center_of_mass, Weights};
use crate::molecule::{BondType, Molecule, Vec3};
use crate::smiles::parse_smiles;

/// Molecules of at most 12 atoms (hydrogens included). Five-membered
/// heteroaromatics are written in Kekulé form so that every atom passes the
/// valence check.
pub const TOY_SMILES: &[&str] = &[
    "C", "CC", "CCC", "O", "N", "CO", "CCO", "CCCO", "CC(C)O", "CN", "CCN", "CNC", "COC", "C=O",
    "CC=O", "CCC=O", "CC(C)=O", "OC=O", "CC(=O)O", "NC=O", "CC(N)=O", "CNC=O", "NC(N)=O", "COC=O",
    "C=C", "CC=C", "C#C", "CC#C", "C#N", "CC#N", "C=CC#N", "C=CC=O", "OCCO", "NCCO", "NCC(=O)O",
    "OCC=O", "CF", "FCF", "CCF", "OCCF", "CCl", "CCCl", "OCCCl", "CBr", "CCBr", "CS", "CCS", "CSC",
    "NO", "NN", "CON", "OC1CC1", "C1CC1", "C1CO1", "C1CN1", "C1CCC1", "C1=CC=CO1", "C1=CC=CN1",
    "C1=CC=CS1", "C1=COC=N1", "C1=CN=CN1", "C1=CC=NN1", "O1N=CC=C1", "C1=CSC=N1", "P", "CP", "CC(=O)F",
    "O=C(F)F", "FC(Cl)Br", "OC(F)Cl", "CC(F)Cl",
];

/// Molecules with one stereocentre, for mirror-image tests.
pub const CHIRAL_SMILES: &[&str] = &["FC(Cl)Br", "OC(F)Cl", "NC(O)F", "CC(F)Cl", "CC(O)F"];

/// Larger reference molecules (not part of the toy corpus).
pub const REFERENCE_SMILES: &[(&str, &str)] = &[
    ("benzene", "c1ccccc1"),
    ("thiophene", "c1ccsc1"),
    ("naphthalene", "c1ccc2ccccc2c1"),
    ("quinoxaline", "c1ccc2nccnc2c1"),
];

fn covalent_radius(e: Element) -> f64 {
    match e {
        Element::H => 0.31,
        Element::B => 0.84,
        Element::C => 0.76,
        Element::N => 0.71,
        Element::O => 0.66,
        Element::F => 0.57,
        Element::Si => 1.11,
        Element::P => 1.07,
        Element::S => 1.05,
        Element::Cl => 1.02,
        Element::Br => 1.20,
        Element::I => 1.39,
    }
}

fn bond_length(mol: &Molecule, i: usize, j: usize, b: BondType) -> f64 {
    let shrink = match b {
        BondType::Double => 0.19,
        BondType::Triple => 0.33,
        BondType::Aromatic => 0.12,
        _ => 0.0,
    };
    covalent_radius(mol.element(i)) + covalent_radius(mol.element(j)) - shrink
}

/// Ideal bond angle at `center` from its bonding pattern.
fn ideal_angle(mol: &Molecule, center: usize) -> f64 {
    let mut doubles = 0;
    let mut unsaturated = false;
    for (_, b) in mol.neighbors(center) {
        match b {
            BondType::Triple => return 180.0,
            BondType::Double => {
                doubles += 1;
                unsaturated = true;
            }
            BondType::Aromatic => unsaturated = true,
            _ => {}
        }
    }
    if doubles >= 2 {
        180.0
    } else if unsaturated {
        120.0
    } else {
        109.47
    }
}

struct Restraint {
    i: usize,
    j: usize,
    target: f64,
    /// Repulsive restraints only push apart.
    repulsive: bool,
}

fn restraints(mol: &Molecule) -> Vec<Restraint> {
    let n = mol.n_atoms();
    let mut out = Vec::new();
    let mut topo = vec![vec![usize::MAX; n]; n];
    for (i, j, b) in mol.bond_list() {
        out.push(Restraint { i, j, target: bond_length(mol, i, j, b), repulsive: false });
        topo[i][j] = 1;
        topo[j][i] = 1;
    }
    for c in 0..n {
        let nb: Vec<(usize, BondType)> = mol.neighbors(c).collect();
        let theta = ideal_angle(mol, c).to_radians();
        for a in 0..nb.len() {
            for b in (a + 1)..nb.len() {
                let (i, bi) = nb[a];
                let (j, bj) = nb[b];
                if topo[i][j] == 1 {
                    continue;
                }
                let (li, lj) = (bond_length(mol, c, i, bi), bond_length(mol, c, j, bj));
                let d = (li * li + lj * lj - 2.0 * li * lj * theta.cos()).sqrt();
                out.push(Restraint { i, j, target: d, repulsive: false });
                topo[i][j] = 2;
                topo[j][i] = 2;
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if topo[i][j] == usize::MAX {
                let heavy = !mol.element(i).is_hydrogen() && !mol.element(j).is_hydrogen();
                let target = if heavy { 2.9 } else { 2.4 };
                out.push(Restraint { i, j, target, repulsive: true });
            }
        }
    }
    out
}

fn energy_and_grad(pos: &[Vec3], rs: &[Restraint], grad: &mut [Vec3]) -> f64 {
    grad.iter_mut().for_each(|g| *g = Vec3::zeros());
    let mut e = 0.0;
    for r in rs {
        let d = pos[r.i] - pos[r.j];
        let len = d.norm().max(1e-9);
        let diff = len - r.target;
        if r.repulsive && diff >= 0.0 {
            continue;
        }
        let w = if r.repulsive { 0.5 } else { 1.0 };
        e += w * diff * diff;
        let g = d * (2.0 * w * diff / len);
        grad[r.i] += g;
        grad[r.j] -= g;
    }
    e
}

/// Restrained gradient descent from a random start; the best of several
/// restarts is kept and returned centred at the origin.
pub fn embed_3d<R: Rng + ?Sized>(mol: &Molecule, rng: &mut R) -> Molecule {
    let n = mol.n_atoms();
    let rs = restraints(mol);
    let mut best: Option<(f64, Vec<Vec3>)> = None;
    for _ in 0..4 {
        let mut pos: Vec<Vec3> = (0..n)
            .map(|_| {
                Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * 1.5
            })
            .collect();
        let mut grad = vec![Vec3::zeros(); n];
        let mut vel = vec![Vec3::zeros(); n];
        let mut e = f64::INFINITY;
        for it in 0..4000 {
            e = energy_and_grad(&pos, &rs, &mut grad);
            if e < 1e-10 {
                break;
            }
            let lr = if it < 2000 { 0.02 } else { 0.01 };
            for k in 0..n {
                vel[k] = vel[k] * 0.8 - grad[k] * lr;
                pos[k] += vel[k];
            }
        }
        if best.as_ref().is_none_or(|(b, _)| e < *b) {
            best = Some((e, pos));
        }
    }
    let mut out = mol.clone();
    for (k, p) in best.expect("at least one restart").1.into_iter().enumerate() {
        out.set_position(k, p);
    }
    let com = center_of_mass(&out, Weights::Uniform).expect("non-empty");
    out.translated(&-com)
}

pub fn embed_smiles<R: Rng + ?Sized>(smiles: &str, rng: &mut R) -> Result<Molecule> {
    Ok(embed_3d(&parse_smiles(smiles)?, rng))
}

/// `conformers` geometries per toy SMILES, ids `toyNNN_k`, with structure
/// properties filled in.
pub fn toy_corpus(conformers: usize, seed: u64) -> Result<Vec<LabeledMolecule>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for (s, smiles) in TOY_SMILES.iter().enumerate() {
        let graph = parse_smiles(smiles)?;
        for k in 0..conformers {
            let mut item = LabeledMolecule::new(&format!("toy{s:03}_{k}"), embed_3d(&graph, &mut rng));
            item.fill_computed_properties()?;
            items.push(item);
        }
    }
    Ok(items)
}

pub fn reference_molecules(seed: u64) -> Result<BTreeMap<&'static str, Molecule>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    REFERENCE_SMILES
        .iter()
        .map(|(name, s)| Ok((*name, embed_smiles(s, &mut rng)?)))
        .collect()
}
