//! Chemical elements and the shipped per-element data table.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Element {
    H,
    B,
    C,
    N,
    O,
    F,
    Si,
    P,
    S,
    Cl,
    Br,
    I,
}

pub const ALL_ELEMENTS: [Element; 12] = [
    Element::H,
    Element::B,
    Element::C,
    Element::N,
    Element::O,
    Element::F,
    Element::Si,
    Element::P,
    Element::S,
    Element::Cl,
    Element::Br,
    Element::I,
];

#[derive(Debug, Clone)]
struct ElementData {
    atomic_number: u32,
    mass: f64,
    valences: Vec<u32>,
}

const ELEMENT_TABLE: &str = include_str!("../data/elements.tsv");

fn table() -> &'static [ElementData; 12] {
    static TABLE: OnceLock<[ElementData; 12]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut rows: Vec<(Element, ElementData)> = Vec::new();
        for line in ELEMENT_TABLE.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let element: Element = cols[0].parse().expect("element table symbol");
            let data = ElementData {
                atomic_number: cols[1].parse().expect("element table atomic number"),
                mass: cols[2].parse().expect("element table mass"),
                valences: cols[3]
                    .split(',')
                    .map(|v| v.parse().expect("element table valence"))
                    .collect(),
            };
            rows.push((element, data));
        }
        std::array::from_fn(|k| {
            rows.iter()
                .find(|(e, _)| *e == ALL_ELEMENTS[k])
                .map(|(_, d)| d.clone())
                .unwrap_or_else(|| panic!("element table lacks {}", ALL_ELEMENTS[k]))
        })
    })
}

impl Element {
    fn index(self) -> usize {
        ALL_ELEMENTS.iter().position(|&e| e == self).unwrap()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::H => "H",
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
            Element::Si => "Si",
            Element::P => "P",
            Element::S => "S",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
        }
    }

    pub fn atomic_number(self) -> u32 {
        table()[self.index()].atomic_number
    }

    /// Standard atomic weight in daltons.
    pub fn mass(self) -> f64 {
        table()[self.index()].mass
    }

    pub fn allowed_valences(self) -> &'static [u32] {
        &table()[self.index()].valences
    }

    pub fn max_valence(self) -> u32 {
        *self.allowed_valences().iter().max().unwrap()
    }

    pub fn is_hydrogen(self) -> bool {
        self == Element::H
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Element {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_ELEMENTS
            .iter()
            .copied()
            .find(|e| e.symbol() == s)
            .ok_or_else(|| CoreError::UnknownElement(s.to_string()))
    }
}
