//! Property proxies, hit ratios and generative-quality metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chem::validate;
use crate::element::{Element, ALL_ELEMENTS};
use crate::error::{CoreError, Result};
use crate::fingerprint::ecfp;
use crate::molecule::{AtomVocab, BondType, Molecule, NUM_BOND_TYPES};

fn is_polar(e: Element) -> bool {
    matches!(e, Element::N | Element::O)
}

/// N/O atoms carrying at least one hydrogen.
pub fn count_hbd(mol: &Molecule) -> usize {
    (0..mol.n_atoms())
        .filter(|&i| is_polar(mol.element(i)) && mol.hydrogen_count(i) > 0)
        .count()
}

/// N/O atoms, plus F when `include_fluorine` is set.
pub fn count_hba(mol: &Molecule, include_fluorine: bool) -> usize {
    mol.elements()
        .iter()
        .filter(|&&e| is_polar(e) || (include_fluorine && e == Element::F))
        .count()
}

fn has_aromatic_bond(mol: &Molecule, i: usize) -> bool {
    mol.neighbors(i).any(|(_, b)| b == BondType::Aromatic)
}

/// Per-atom additive contribution table for the logP proxy.
#[derive(Debug, Clone)]
pub struct LogpTable(HashMap<String, f64>);

impl LogpTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(key), Some(v)) = (cols.next(), cols.next()) else {
                return Err(CoreError::Invalid(format!("bad logp row `{line}`")));
            };
            let v: f64 = v
                .parse()
                .map_err(|_| CoreError::Invalid(format!("bad logp value `{v}`")))?;
            map.insert(key.to_string(), v);
        }
        Ok(LogpTable(map))
    }

    pub fn shipped() -> &'static LogpTable {
        static T: OnceLock<LogpTable> = OnceLock::new();
        T.get_or_init(|| LogpTable::parse(include_str!("../data/logp.tsv")).expect("shipped logp table"))
    }

    fn key_for(mol: &Molecule, i: usize) -> String {
        let e = mol.element(i);
        if e.is_hydrogen() {
            let host = mol.neighbors(i).next().map(|(j, _)| mol.element(j));
            return match host {
                Some(Element::C) => "H:C".into(),
                Some(Element::N) => "H:N".into(),
                Some(Element::O) => "H:O".into(),
                _ => "H:other".into(),
            };
        }
        if has_aromatic_bond(mol, i) {
            format!("{e}:ar")
        } else {
            e.symbol().to_string()
        }
    }

    pub fn evaluate(&self, mol: &Molecule) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..mol.n_atoms() {
            let key = Self::key_for(mol, i);
            let v = self
                .0
                .get(&key)
                .or_else(|| self.0.get(mol.element(i).symbol()))
                .ok_or_else(|| CoreError::MissingContribution {
                    table: "logp",
                    element: mol.element(i).to_string(),
                })?;
            total += v;
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TpsaRow {
    element: Element,
    pattern: Option<[usize; 5]>,
    psa: f64,
}

/// Polar-surface contributions for N, O and S keyed by local bonding pattern.
#[derive(Debug, Clone)]
pub struct TpsaTable(Vec<TpsaRow>);

impl TpsaTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 7 {
                return Err(CoreError::Invalid(format!("bad tpsa row `{line}`")));
            }
            let element: Element = cols[0].parse()?;
            let pattern = if cols[1] == "*" {
                None
            } else {
                let mut p = [0usize; 5];
                for k in 0..5 {
                    p[k] = cols[1 + k]
                        .parse()
                        .map_err(|_| CoreError::Invalid(format!("bad tpsa row `{line}`")))?;
                }
                Some(p)
            };
            let psa = cols[6]
                .parse()
                .map_err(|_| CoreError::Invalid(format!("bad tpsa value in `{line}`")))?;
            rows.push(TpsaRow { element, pattern, psa });
        }
        Ok(TpsaTable(rows))
    }

    pub fn shipped() -> &'static TpsaTable {
        static T: OnceLock<TpsaTable> = OnceLock::new();
        T.get_or_init(|| TpsaTable::parse(include_str!("../data/tpsa.tsv")).expect("shipped tpsa table"))
    }

    pub fn evaluate(&self, mol: &Molecule) -> f64 {
        let mut total = 0.0;
        for i in 0..mol.n_atoms() {
            let e = mol.element(i);
            if !self.0.iter().any(|r| r.element == e) {
                continue;
            }
            let mut pattern = [mol.hydrogen_count(i), 0, 0, 0, 0];
            for (j, b) in mol.neighbors(i) {
                if mol.element(j).is_hydrogen() {
                    continue;
                }
                match b {
                    BondType::Single => pattern[1] += 1,
                    BondType::Double => pattern[2] += 1,
                    BondType::Triple => pattern[3] += 1,
                    BondType::Aromatic => pattern[4] += 1,
                    BondType::None => {}
                }
            }
            let exact = self
                .0
                .iter()
                .find(|r| r.element == e && r.pattern == Some(pattern));
            let row = exact.or_else(|| self.0.iter().find(|r| r.element == e && r.pattern.is_none()));
            total += row.map_or(0.0, |r| r.psa);
        }
        total
    }
}

pub fn logp_proxy(mol: &Molecule) -> Result<f64> {
    LogpTable::shipped().evaluate(mol)
}

/// Polar surface area proxy in Å².
pub fn tpsa_proxy(mol: &Molecule) -> f64 {
    TpsaTable::shipped().evaluate(mol)
}

/// Ridge regression over composition counts, used as a stand-in evaluator
/// for labelled properties that cannot be computed from structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearRegressor {
    pub label: String,
    pub weights: Vec<f64>,
}

impl LinearRegressor {
    fn features(mol: &Molecule) -> Vec<f64> {
        let mut f = vec![1.0];
        for e in ALL_ELEMENTS {
            f.push(mol.elements().iter().filter(|&&x| x == e).count() as f64);
        }
        let mut bonds = [0.0; NUM_BOND_TYPES];
        for (_, _, b) in mol.bond_list() {
            bonds[b.index()] += 1.0;
        }
        f.extend_from_slice(&bonds[1..]);
        f.push(count_hbd(mol) as f64);
        f.push(count_hba(mol, false) as f64);
        f
    }

    pub fn fit(label: &str, mols: &[Molecule], targets: &[f64], ridge: f64) -> Result<Self> {
        if mols.is_empty() || mols.len() != targets.len() {
            return Err(CoreError::LengthMismatch(mols.len(), targets.len()));
        }
        let rows: Vec<Vec<f64>> = mols.iter().map(Self::features).collect();
        let d = rows[0].len();
        let x = DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]);
        let y = DVector::from_column_slice(targets);
        let mut gram = x.transpose() * &x;
        for k in 1..d {
            gram[(k, k)] += ridge;
        }
        gram[(0, 0)] += 1e-9;
        let rhs = x.transpose() * y;
        let w = gram
            .cholesky()
            .ok_or_else(|| CoreError::Invalid("regressor normal equations are singular".into()))?
            .solve(&rhs);
        Ok(LinearRegressor { label: label.to_string(), weights: w.iter().copied().collect() })
    }

    pub fn predict(&self, mol: &Molecule) -> f64 {
        Self::features(mol)
            .iter()
            .zip(&self.weights)
            .map(|(a, b)| a * b)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increase,
    Decrease,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluator {
    Hbd,
    Hba,
    LogpProxy,
    TpsaProxy,
    Regressor(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertySpec {
    pub name: String,
    pub direction: Direction,
    pub evaluator: Evaluator,
    #[serde(default)]
    pub threshold: f64,
}

impl PropertySpec {
    pub fn new(name: &str, direction: Direction, evaluator: Evaluator) -> Self {
        PropertySpec { name: name.to_string(), direction, evaluator, threshold: 0.0 }
    }

    /// Improvement must be strictly above the threshold; ties fail.
    pub fn satisfied(&self, before: f64, after: f64) -> bool {
        let gain = match self.direction {
            Direction::Increase => after - before,
            Direction::Decrease => before - after,
        };
        gain > self.threshold
    }
}

/// Evaluation context: trained regressors looked up by label.
#[derive(Debug, Clone, Default)]
pub struct Evaluators {
    pub regressors: BTreeMap<String, LinearRegressor>,
}

impl Evaluators {
    pub fn evaluate(&self, evaluator: &Evaluator, mol: &Molecule) -> Result<f64> {
        Ok(match evaluator {
            Evaluator::Hbd => count_hbd(mol) as f64,
            Evaluator::Hba => count_hba(mol, false) as f64,
            Evaluator::LogpProxy => logp_proxy(mol)?,
            Evaluator::TpsaProxy => tpsa_proxy(mol),
            Evaluator::Regressor(label) => self
                .regressors
                .get(label)
                .ok_or_else(|| CoreError::Invalid(format!("no regressor trained for `{label}`")))?
                .predict(mol),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitReport {
    pub hits: Vec<u8>,
    pub hit_ratio: f64,
    pub validity_ratio: f64,
    /// Fraction of items satisfying each property on its own (validity not required).
    pub per_property: BTreeMap<String, f64>,
}

fn item_hit(
    input: &Molecule,
    output: &Molecule,
    specs: &[PropertySpec],
    ctx: &Evaluators,
) -> Result<(bool, Vec<bool>)> {
    let valid = !output.is_empty() && validate(output)?.is_valid;
    let mut sat = Vec::with_capacity(specs.len());
    for spec in specs {
        let before = ctx.evaluate(&spec.evaluator, input)?;
        let after = if output.is_empty() { before } else { ctx.evaluate(&spec.evaluator, output)? };
        sat.push(spec.satisfied(before, after));
    }
    Ok((valid, sat))
}

/// Hit = valid output that satisfies every spec; ratio over aligned pairs.
pub fn hit_ratio(
    inputs: &[Molecule],
    outputs: &[Molecule],
    specs: &[PropertySpec],
    ctx: &Evaluators,
) -> Result<HitReport> {
    multi_run_hit_ratio(inputs, std::slice::from_ref(&outputs.to_vec()), specs, ctx)
}

/// Any-hit aggregation over repeated runs: `runs[r][i]` is run `r`'s output
/// for input `i`. An input counts as hit if any run hits it.
pub fn multi_run_hit_ratio(
    inputs: &[Molecule],
    runs: &[Vec<Molecule>],
    specs: &[PropertySpec],
    ctx: &Evaluators,
) -> Result<HitReport> {
    if inputs.is_empty() {
        return Err(CoreError::Invalid("no inputs to evaluate".into()));
    }
    for run in runs {
        if run.len() != inputs.len() {
            return Err(CoreError::LengthMismatch(inputs.len(), run.len()));
        }
    }
    let n = inputs.len();
    let mut hits = vec![0u8; n];
    let mut valid_any = vec![false; n];
    let mut prop_any = vec![vec![false; specs.len()]; n];
    for run in runs {
        for i in 0..n {
            let (valid, sat) = item_hit(&inputs[i], &run[i], specs, ctx)?;
            if valid && sat.iter().all(|&s| s) {
                hits[i] = 1;
            }
            valid_any[i] |= valid;
            for (k, s) in sat.into_iter().enumerate() {
                prop_any[i][k] |= s;
            }
        }
    }
    let per_property = specs
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let c = prop_any.iter().filter(|row| row[k]).count();
            (s.name.clone(), c as f64 / n as f64)
        })
        .collect();
    Ok(HitReport {
        hit_ratio: hits.iter().map(|&h| h as f64).sum::<f64>() / n as f64,
        validity_ratio: valid_any.iter().filter(|&&v| v).count() as f64 / n as f64,
        hits,
        per_property,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub n_samples: usize,
    pub mol_stable: f64,
    pub atom_stable: f64,
    pub validity: f64,
    pub uniqueness: f64,
    pub atom_tv: f64,
    pub bond_tv: f64,
    /// Bond-length W1 (Å) per bond category present in both sets.
    pub bond_length_w1: BTreeMap<String, f64>,
}

/// Atom-type distribution over `vocab` pooled across molecules.
pub fn atom_type_distribution(mols: &[Molecule], vocab: &AtomVocab) -> Vec<f64> {
    let mut counts = vec![0.0; vocab.len()];
    let mut total = 0.0;
    for m in mols {
        for &e in m.elements() {
            if let Some(k) = vocab.index_of(e) {
                counts[k] += 1.0;
                total += 1.0;
            }
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

/// Bond-category distribution over all unordered atom pairs (including "none").
pub fn bond_type_distribution(mols: &[Molecule]) -> Vec<f64> {
    let mut counts = vec![0.0; NUM_BOND_TYPES];
    let mut total = 0.0;
    for m in mols {
        let n = m.n_atoms();
        for i in 0..n {
            for j in (i + 1)..n {
                counts[m.bond(i, j).index()] += 1.0;
                total += 1.0;
            }
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// 1-D Wasserstein-1 distance between two empirical samples.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut points: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    points.sort_by(f64::total_cmp);
    let cdf = |s: &[f64], x: f64| s.partition_point(|&v| v <= x) as f64 / s.len() as f64;
    points
        .windows(2)
        .map(|w| (cdf(&a, w[0]) - cdf(&b, w[0])).abs() * (w[1] - w[0]))
        .sum()
}

fn bond_lengths(mols: &[Molecule]) -> BTreeMap<BondType, Vec<f64>> {
    let mut out: BTreeMap<BondType, Vec<f64>> = BTreeMap::new();
    for m in mols {
        for (i, j, b) in m.bond_list() {
            out.entry(b).or_default().push((m.position(i) - m.position(j)).norm());
        }
    }
    out
}

pub fn generation_metrics(
    samples: &[Molecule],
    reference: &[Molecule],
    vocab: &AtomVocab,
) -> Result<GenerationMetrics> {
    if samples.is_empty() {
        return Err(CoreError::Invalid("no samples".into()));
    }
    let mut mol_stable = 0usize;
    let mut valid = 0usize;
    let mut stable_atoms = 0usize;
    let mut total_atoms = 0usize;
    let mut prints = BTreeSet::new();
    for m in samples {
        if m.is_empty() {
            continue;
        }
        let r = validate(m)?;
        mol_stable += r.mol_stable as usize;
        valid += r.is_valid as usize;
        stable_atoms += r.stable_atoms;
        total_atoms += m.n_atoms();
        prints.insert(ecfp(m, 2).feature_ids.into_iter().collect::<Vec<_>>());
    }
    let n = samples.len() as f64;
    let sample_lengths = bond_lengths(samples);
    let ref_lengths = bond_lengths(reference);
    let bond_length_w1 = sample_lengths
        .iter()
        .filter_map(|(b, xs)| ref_lengths.get(b).map(|ys| (b.name().to_string(), wasserstein1(xs, ys))))
        .collect();
    Ok(GenerationMetrics {
        n_samples: samples.len(),
        mol_stable: mol_stable as f64 / n,
        atom_stable: if total_atoms > 0 { stable_atoms as f64 / total_atoms as f64 } else { 0.0 },
        validity: valid as f64 / n,
        uniqueness: prints.len() as f64 / n,
        atom_tv: total_variation(
            &atom_type_distribution(samples, vocab),
            &atom_type_distribution(reference, vocab),
        ),
        bond_tv: total_variation(&bond_type_distribution(samples), &bond_type_distribution(reference)),
        bond_length_w1,
    })
}
