//! A deliberately small SMILES reader used to build fixtures and the toy
//! corpus: organic-subset atoms, lowercase aromatic atoms, `[xH]` bracket
//! atoms without charges, `- = # :` bonds, branches and ring closures.
//! Hydrogens are made explicit; positions are left at the origin.

use crate::element::Element;
use crate::error::{CoreError, Result};
use crate::molecule::{BondType, Molecule, Vec3};

struct Atom {
    element: Element,
    aromatic: bool,
    explicit_h: Option<usize>,
}

fn err(s: &str, pos: usize, what: &str) -> CoreError {
    CoreError::Invalid(format!("smiles `{s}` at {pos}: {what}"))
}

pub fn parse_smiles(s: &str) -> Result<Molecule> {
    let bytes = s.as_bytes();
    let mut atoms: Vec<Atom> = Vec::new();
    let mut bonds: Vec<(usize, usize, BondType)> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut prev: Option<usize> = None;
    let mut pending: Option<BondType> = None;
    let mut rings: std::collections::HashMap<u32, (usize, Option<BondType>)> = Default::default();
    let mut pos = 0;

    let connect = |atoms: &Vec<Atom>, a: usize, b: usize, explicit: Option<BondType>| {
        explicit.unwrap_or(if atoms[a].aromatic && atoms[b].aromatic {
            BondType::Aromatic
        } else {
            BondType::Single
        })
    };

    while pos < bytes.len() {
        let c = bytes[pos] as char;
        match c {
            '(' => {
                stack.push(prev.ok_or_else(|| err(s, pos, "branch before atom"))?);
                pos += 1;
            }
            ')' => {
                prev = Some(stack.pop().ok_or_else(|| err(s, pos, "unbalanced `)`"))?);
                pos += 1;
            }
            '-' | '=' | '#' | ':' => {
                pending = Some(match c {
                    '-' => BondType::Single,
                    '=' => BondType::Double,
                    '#' => BondType::Triple,
                    _ => BondType::Aromatic,
                });
                pos += 1;
            }
            '0'..='9' | '%' => {
                let (num, len) = if c == '%' {
                    let digits = s.get(pos + 1..pos + 3).ok_or_else(|| err(s, pos, "bad %nn"))?;
                    (digits.parse::<u32>().map_err(|_| err(s, pos, "bad %nn"))?, 3)
                } else {
                    (c.to_digit(10).unwrap(), 1)
                };
                let here = prev.ok_or_else(|| err(s, pos, "ring closure before atom"))?;
                if let Some((other, bt)) = rings.remove(&num) {
                    let explicit = pending.take().or(bt);
                    let b = connect(&atoms, other, here, explicit);
                    bonds.push((other, here, b));
                } else {
                    rings.insert(num, (here, pending.take()));
                }
                pos += len;
            }
            '[' => {
                let end = s[pos..].find(']').ok_or_else(|| err(s, pos, "unclosed `[`"))? + pos;
                let inner = &s[pos + 1..end];
                let (sym, h) = match inner.find('H') {
                    Some(k) if k > 0 => {
                        let count = &inner[k + 1..];
                        let h = if count.is_empty() {
                            1
                        } else {
                            count.parse().map_err(|_| err(s, pos, "bad H count"))?
                        };
                        (&inner[..k], h)
                    }
                    _ => (inner, 0),
                };
                let (element, aromatic) = parse_symbol(sym).ok_or_else(|| err(s, pos, "unknown atom"))?;
                let idx = atoms.len();
                atoms.push(Atom { element, aromatic, explicit_h: Some(h) });
                if let Some(p) = prev {
                    let b = connect(&atoms, p, idx, pending.take());
                    bonds.push((p, idx, b));
                }
                prev = Some(idx);
                pos = end + 1;
            }
            _ => {
                let two = s.get(pos..pos + 2);
                let (sym, len) = match two {
                    Some("Cl") | Some("Br") => (two.unwrap(), 2),
                    _ => (&s[pos..pos + 1], 1),
                };
                let (element, aromatic) = parse_symbol(sym).ok_or_else(|| err(s, pos, "unknown atom"))?;
                let idx = atoms.len();
                atoms.push(Atom { element, aromatic, explicit_h: None });
                if let Some(p) = prev {
                    let b = connect(&atoms, p, idx, pending.take());
                    bonds.push((p, idx, b));
                }
                prev = Some(idx);
                pos += len;
            }
        }
    }
    if !rings.is_empty() || !stack.is_empty() {
        return Err(err(s, pos, "unclosed ring or branch"));
    }

    let heavy = atoms.len();
    let mut h_counts = vec![0usize; heavy];
    for (i, a) in atoms.iter().enumerate() {
        h_counts[i] = match a.explicit_h {
            Some(h) => h,
            None => implicit_h(i, a, &bonds),
        };
    }
    let mut elements: Vec<Element> = atoms.iter().map(|a| a.element).collect();
    for (i, &h) in h_counts.iter().enumerate() {
        for _ in 0..h {
            bonds.push((i, elements.len(), BondType::Single));
            elements.push(Element::H);
        }
    }
    let n = elements.len();
    Molecule::with_bonds(elements, vec![Vec3::zeros(); n], &bonds)
}

fn parse_symbol(sym: &str) -> Option<(Element, bool)> {
    let aromatic = sym.chars().next()?.is_ascii_lowercase();
    let upper = if aromatic {
        let mut c = sym.chars();
        let first = c.next()?.to_ascii_uppercase();
        std::iter::once(first).chain(c).collect::<String>()
    } else {
        sym.to_string()
    };
    upper.parse().ok().map(|e| (e, aromatic))
}

fn implicit_h(i: usize, atom: &Atom, bonds: &[(usize, usize, BondType)]) -> usize {
    let mut aromatic = 0usize;
    let mut other = 0.0;
    for &(a, b, bt) in bonds {
        if a == i || b == i {
            if bt == BondType::Aromatic {
                aromatic += 1;
            } else {
                other += bt.order();
            }
        }
    }
    if atom.aromatic {
        // Ring carbons and pyridine-type nitrogens contribute one π bond;
        // O and S donate a lone pair and carry no hydrogen.
        let base = match atom.element {
            Element::C => 4.0,
            Element::N | Element::B | Element::P => 3.0,
            _ => return 0,
        };
        return (base - aromatic as f64 - other - 1.0).max(0.0) as usize;
    }
    let used = other;
    atom.element
        .allowed_valences()
        .iter()
        .map(|&v| v as f64)
        .find(|&v| v >= used - 1e-9)
        .map(|v| (v - used).round() as usize)
        .unwrap_or(0)
}
