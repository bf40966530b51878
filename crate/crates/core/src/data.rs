//! Labelled corpora, template captions and train/validation splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::chem::validate;
use crate::error::{CoreError, Result};
use crate::evaluation::{count_hba, count_hbd, logp_proxy, tpsa_proxy};
use crate::molecule::{AtomVocab, Molecule, NUM_BOND_TYPES};

pub const PROPERTIES_FILE: &str = "properties.csv";

/// Properties computed from structure when the table does not provide them.
pub const COMPUTED_PROPERTIES: [&str; 4] = ["hbd", "hba", "logp_proxy", "tpsa_proxy"];

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMolecule {
    pub id: String,
    pub mol: Molecule,
    pub properties: BTreeMap<String, f64>,
    pub captions: Vec<String>,
}

impl LabeledMolecule {
    pub fn new(id: &str, mol: Molecule) -> Self {
        LabeledMolecule { id: id.to_string(), mol, properties: BTreeMap::new(), captions: Vec::new() }
    }

    /// Fills in the structure-computable properties that are not yet set.
    pub fn fill_computed_properties(&mut self) -> Result<()> {
        let entries = [
            ("hbd", count_hbd(&self.mol) as f64),
            ("hba", count_hba(&self.mol, false) as f64),
            ("logp_proxy", logp_proxy(&self.mol)?),
            ("tpsa_proxy", tpsa_proxy(&self.mol)),
        ];
        for (k, v) in entries {
            self.properties.entry(k.to_string()).or_insert(v);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub items: Vec<LabeledMolecule>,
    pub vocab: AtomVocab,
    pub atom_marginal: Vec<f64>,
    pub bond_marginal: Vec<f64>,
}

impl Corpus {
    /// Marginals are counted over all atoms and all unordered atom pairs
    /// (pairs without a bond count as "none"). An empty item list yields
    /// all-zero marginals.
    pub fn from_items(items: Vec<LabeledMolecule>, vocab: AtomVocab) -> Result<Corpus> {
        let mut atoms = vec![0.0; vocab.len()];
        let mut bonds = vec![0.0; NUM_BOND_TYPES];
        for item in &items {
            for k in item.mol.atom_indices(&vocab)? {
                atoms[k] += 1.0;
            }
            let n = item.mol.n_atoms();
            for i in 0..n {
                for j in (i + 1)..n {
                    bonds[item.mol.bond(i, j).index()] += 1.0;
                }
            }
        }
        normalize(&mut atoms);
        normalize(&mut bonds);
        Ok(Corpus { items, vocab, atom_marginal: atoms, bond_marginal: bonds })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn molecules(&self) -> Vec<Molecule> {
        self.items.iter().map(|i| i.mol.clone()).collect()
    }

    /// Histogram of atom counts, used to draw sizes for unconditional sampling.
    pub fn size_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for item in &self.items {
            *h.entry(item.mol.n_atoms()).or_insert(0) += 1;
        }
        h
    }

    /// Median of every property that appears on at least one item.
    pub fn median_thresholds(&self) -> BTreeMap<String, f64> {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for item in &self.items {
            for (k, &v) in &item.properties {
                values.entry(k.clone()).or_default().push(v);
            }
        }
        values
            .into_iter()
            .map(|(k, mut v)| {
                v.sort_by(f64::total_cmp);
                let n = v.len();
                let med = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
                (k, med)
            })
            .collect()
    }

    /// Regenerates every item's captions with median thresholds. Templates
    /// naming a property that no item carries are skipped.
    pub fn attach_captions(&mut self, templates: &[Template], compound: bool) -> Result<()> {
        let thresholds = self.median_thresholds();
        let usable: Vec<Template> = templates
            .iter()
            .filter(|t| t.properties().all(|p| thresholds.contains_key(p)))
            .cloned()
            .collect();
        for item in &mut self.items {
            item.captions = caption_from_properties(item, &usable, &thresholds, compound)?;
        }
        Ok(())
    }
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

/// Loads `*.json` molecule documents from `dir` together with the optional
/// `properties.csv` (first column `id` matching file stems). Molecules that
/// fail validation or use elements outside `vocab` are skipped with a log line.
pub fn load_corpus(dir: impl AsRef<Path>, vocab: &AtomVocab, required_columns: &[String]) -> Result<Corpus> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }

    let table = read_properties(&dir.join(PROPERTIES_FILE))?;
    if let Some((header, _)) = &table {
        for col in required_columns {
            if !header.contains(col) && !COMPUTED_PROPERTIES.contains(&col.as_str()) {
                return Err(CoreError::MissingColumn(col.clone()));
            }
        }
    } else if let Some(col) = required_columns.iter().find(|c| !COMPUTED_PROPERTIES.contains(&c.as_str())) {
        return Err(CoreError::MissingColumn(col.clone()));
    }

    let parsed: Vec<Option<LabeledMolecule>> = paths
        .par_iter()
        .map(|path| -> Result<Option<LabeledMolecule>> {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let mol = Molecule::read(path)?;
            if let Err(e) = mol.atom_indices(vocab) {
                log::warn!("skipping {id}: {e}");
                return Ok(None);
            }
            match validate(&mol) {
                Ok(r) if r.is_valid => {}
                Ok(r) => {
                    log::warn!("skipping {id}: {}", r.failure_reasons.join("; "));
                    return Ok(None);
                }
                Err(e) => {
                    log::warn!("skipping {id}: {e}");
                    return Ok(None);
                }
            }
            let mut item = LabeledMolecule::new(&id, mol);
            if let Some((_, rows)) = &table {
                if let Some(props) = rows.get(&id) {
                    item.properties = props.clone();
                }
            }
            item.fill_computed_properties()?;
            Ok(Some(item))
        })
        .collect::<Result<_>>()?;
    let items: Vec<LabeledMolecule> = parsed.into_iter().flatten().collect();
    if items.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    Corpus::from_items(items, vocab.clone())
}

type PropertyTable = (Vec<String>, BTreeMap<String, BTreeMap<String, f64>>);

fn read_properties(path: &Path) -> Result<Option<PropertyTable>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("id") {
        return Err(CoreError::Schema {
            path: path.display().to_string(),
            message: "first column must be `id`".into(),
        });
    }
    let mut rows = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut props = BTreeMap::new();
        for (col, field) in header.iter().zip(rec.iter()).skip(1) {
            if field.trim().is_empty() {
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| CoreError::Schema {
                path: format!("{}:{}:{col}", path.display(), line + 2),
                message: format!("`{field}` is not a number"),
            })?;
            props.insert(col.clone(), v);
        }
        rows.insert(rec.get(0).unwrap_or_default().to_string(), props);
    }
    Ok(Some((header[1..].to_vec(), rows)))
}

/// Writes a corpus directory in the layout read by [`load_corpus`].
pub fn write_corpus(dir: impl AsRef<Path>, items: &[LabeledMolecule]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut columns: Vec<String> = items
        .iter()
        .flat_map(|i| i.properties.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    columns.insert(0, "id".into());
    let mut w = csv::Writer::from_path(dir.join(PROPERTIES_FILE))?;
    w.write_record(&columns)?;
    for item in items {
        item.mol.write(dir.join(format!("{}.json", item.id)))?;
        let mut row = vec![item.id.clone()];
        for c in &columns[1..] {
            row.push(item.properties.get(c).map(|v| format!("{v}")).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    Slot { property: String, high: String, low: String },
}

/// A caption template such as `This molecule has {hba:more|fewer} hydrogen
/// bond acceptors.`. A bare `{prop}` slot expands to `high`/`low`. A slot
/// whose chosen word is empty suppresses the whole caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    source: String,
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(line: &str) -> Result<Template> {
        let mut pieces = Vec::new();
        let mut rest = line;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                pieces.push(Piece::Text(rest[..open].to_string()));
            }
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| CoreError::Invalid(format!("unclosed placeholder in `{line}`")))?
                + open;
            let inner = &rest[open + 1..close];
            let (property, words) = inner.split_once(':').unwrap_or((inner, "high|low"));
            let (high, low) = words
                .split_once('|')
                .ok_or_else(|| CoreError::Invalid(format!("placeholder `{inner}` needs high|low words")))?;
            if property.trim().is_empty() {
                return Err(CoreError::UnknownPlaceholder(inner.to_string()));
            }
            pieces.push(Piece::Slot {
                property: property.trim().to_string(),
                high: high.to_string(),
                low: low.to_string(),
            });
            rest = &rest[close + 1..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_string()));
        }
        Ok(Template { source: line.to_string(), pieces })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn properties(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot { property, .. } => Some(property.as_str()),
            Piece::Text(_) => None,
        })
    }

    /// `Ok(None)` when a referenced property is absent from the item or the
    /// selected word is empty.
    pub fn render(&self, properties: &BTreeMap<String, f64>, thresholds: &BTreeMap<String, f64>) -> Result<Option<String>> {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot { property, high, low } => {
                    let Some(&v) = properties.get(property) else {
                        if thresholds.contains_key(property) {
                            return Ok(None);
                        }
                        return Err(CoreError::UnknownPlaceholder(property.clone()));
                    };
                    let cut = thresholds
                        .get(property)
                        .ok_or_else(|| CoreError::UnknownPlaceholder(property.clone()))?;
                    let word = if v > *cut { high } else { low };
                    if word.is_empty() {
                        return Ok(None);
                    }
                    out.push_str(word);
                }
            }
        }
        Ok(Some(out))
    }
}

pub const DEFAULT_TEMPLATES: &str = "\
This molecule has {homo_lumo_gap} HOMO-LUMO gap value.
This molecule has {hbd:more|} hydrogen bond donors.
This molecule has {hba:more|fewer} hydrogen bond acceptors.
This molecule is {logp_proxy:insoluble|soluble} in water.
This molecule has {tpsa_proxy:high|low} polar surface area.
";

/// One template per non-empty line; `#` starts a comment line.
pub fn parse_templates(text: &str) -> Result<Vec<Template>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(Template::parse)
        .collect()
}

pub fn default_templates() -> Vec<Template> {
    parse_templates(DEFAULT_TEMPLATES).expect("built-in templates parse")
}

/// Renders every applicable template in template order. With `compound`,
/// an extra caption joins the first two sentences in prompt style
/// ("This molecule is soluble in water, which has more ...") and appends any
/// further clauses with "and".
pub fn caption_from_properties(
    item: &LabeledMolecule,
    templates: &[Template],
    thresholds: &BTreeMap<String, f64>,
    compound: bool,
) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for t in templates {
        if let Some(c) = t.render(&item.properties, thresholds)? {
            out.push(c);
        }
    }
    if compound && out.len() >= 2 {
        let clause = |s: &str| {
            let s = s.trim_end_matches('.');
            s.strip_prefix("This molecule ").unwrap_or(s).to_string()
        };
        let mut joined = format!("{}, which {}", out[0].trim_end_matches('.'), clause(&out[1]));
        for extra in &out[2..] {
            joined.push_str(" and ");
            joined.push_str(&clause(extra));
        }
        joined.push('.');
        out.push(joined);
    }
    Ok(out)
}

/// Shuffled split into `(train, validation)`; `fractions` must lie in
/// `[0, 1]` and sum to 1.
pub fn split(corpus: &Corpus, fractions: (f64, f64), seed: u64) -> Result<(Corpus, Corpus)> {
    let (a, b) = fractions;
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
        return Err(CoreError::InvalidFractions(format!("({a}, {b}) outside [0, 1]")));
    }
    if (a + b - 1.0).abs() > 1e-9 {
        return Err(CoreError::InvalidFractions(format!("({a}, {b}) does not sum to 1")));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (a * corpus.len() as f64).round() as usize;
    let pick = |idx: &[usize]| -> Result<Corpus> {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Corpus::from_items(idx.iter().map(|&i| corpus.items[i].clone()).collect(), corpus.vocab.clone())
    };
    Ok((pick(&order[..n_train])?, pick(&order[n_train..])?))
}
