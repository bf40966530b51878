//! Contrastive text/structure alignment: a pooled molecule encoder built
//! from the graph transformer, a pluggable text encoder, the alignment
//! score and its gradient with respect to a relaxed molecular state.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, GraphBatch, GraphTransformer};
use crate::error::{ModelError, Result};
use crate::nn::{device, ensure_finite, log_softmax, scalar, Init, Linear, Mlp, Params};
use crate::sampler::{noise_to, Frame};
use crate::state::MolState;
use molprompt_core::NoiseSchedule;

pub const ALIGN_CONFIG_FILE: &str = "align.json";
pub const ALIGN_PARAMS_FILE: &str = "align.safetensors";
pub const EXTERNAL_EMBEDDINGS_FILE: &str = "text_embeddings.jsonl";
const UNKNOWN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub embed_dim: usize,
    pub encoder: DenoiserConfig,
    pub word_dim: usize,
    pub text_hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_molecule: bool,
    pub freeze_text: bool,
    pub initial_logit_scale: f64,
    /// Probability of training on the clean molecule rather than a noised one.
    pub clean_fraction: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            embed_dim: 128,
            encoder: DenoiserConfig::default(),
            word_dim: 64,
            text_hidden: 128,
            learning_rate: 1e-5,
            epochs: 32,
            batch_size: 32,
            seed: 0,
            freeze_molecule: false,
            freeze_text: false,
            initial_logit_scale: (1.0f64 / 0.07).ln(),
            clean_fraction: 0.5,
        }
    }
}

impl AlignConfig {
    pub fn small(atom_types: usize) -> Self {
        AlignConfig {
            embed_dim: 64,
            encoder: DenoiserConfig::small(atom_types),
            word_dim: 32,
            text_hidden: 64,
            ..Default::default()
        }
    }
}

/// Lower-cased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Fixed-width text embeddings computed elsewhere and exchanged as JSON
/// lines `{"text": ..., "embedding": [...]}`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub entries: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    text: String,
    embedding: Vec<f64>,
}

impl EmbeddingTable {
    pub fn parse(text: &str) -> Result<EmbeddingTable> {
        let mut table = EmbeddingTable::default();
        for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: EmbeddingLine = serde_json::from_str(line)?;
            if table.entries.is_empty() {
                table.dim = e.embedding.len();
            } else if e.embedding.len() != table.dim {
                return Err(ModelError::Config(format!(
                    "embedding on line {} has width {}, expected {}",
                    k + 1,
                    e.embedding.len(),
                    table.dim
                )));
            }
            table.entries.insert(e.text, e.embedding);
        }
        if table.dim == 0 {
            return Err(ModelError::Config("empty embedding table".into()));
        }
        Ok(table)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (text, e) in &self.entries {
            out.push_str(&serde_json::to_string(&EmbeddingLine { text: text.clone(), embedding: e.clone() })?);
            out.push('\n');
        }
        Ok(out)
    }

    fn get(&self, text: &str) -> Result<&Vec<f64>> {
        self.entries
            .get(text)
            .ok_or_else(|| ModelError::Config(format!("no external embedding for `{text}`")))
    }
}

/// How text is turned into features before the learned map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    /// Word vocabulary; index 0 is the unknown word.
    Words(Vec<String>),
    External { dim: usize },
}

impl TextSource {
    pub fn words_from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> TextSource {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        TextSource::Words(std::iter::once(UNKNOWN.to_string()).chain(words).collect())
    }
}

enum TextEncoder {
    Words { index: BTreeMap<String, usize>, table: Tensor, map: Mlp },
    External { table: EmbeddingTable, map: Mlp },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignMeta {
    pub config: AlignConfig,
    pub text: TextSource,
    pub epoch: usize,
    pub losses: Vec<f64>,
}

pub struct AlignmentModel {
    pub params: Params,
    pub meta: AlignMeta,
    encoder: GraphTransformer,
    pool: Linear,
    text: TextEncoder,
    logit_scale: Tensor,
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

impl AlignmentModel {
    pub fn new(config: &AlignConfig, text: TextSource, external: Option<EmbeddingTable>) -> Result<AlignmentModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = Params::new();
        let encoder = GraphTransformer::new(&mut p, "mol", &config.encoder, &mut rng)?;
        let pool = Linear::new(&mut p, "mol.pool", config.encoder.node_dim, config.embed_dim, &mut rng)?;
        let text_enc = match &text {
            TextSource::Words(words) => {
                let table = p.create(
                    "text.words",
                    &[words.len(), config.word_dim],
                    Init::Scaled { fan_in: 1, gain: 1.0 },
                    &mut rng,
                )?;
                let map = Mlp::new(&mut p, "text.map", config.word_dim, config.text_hidden, config.embed_dim, &mut rng)?;
                let index = words.iter().enumerate().map(|(k, w)| (w.clone(), k)).collect();
                TextEncoder::Words { index, table, map }
            }
            TextSource::External { dim } => {
                let table = external.ok_or_else(|| ModelError::Config("external text source needs a table".into()))?;
                if table.dim != *dim {
                    return Err(ModelError::Config(format!("table width {} != {dim}", table.dim)));
                }
                let map = Mlp::new(&mut p, "text.map", *dim, config.text_hidden, config.embed_dim, &mut rng)?;
                TextEncoder::External { table, map }
            }
        };
        let logit_scale = p.create("logit_scale", &[1], Init::Const(config.initial_logit_scale), &mut rng)?;
        let meta = AlignMeta { config: config.clone(), text, epoch: 0, losses: Vec::new() };
        Ok(AlignmentModel { params: p, meta, encoder, pool, text: text_enc, logit_scale })
    }

    pub fn embed_dim(&self) -> usize {
        self.meta.config.embed_dim
    }

    /// Unit molecule embeddings `[B, d]`.
    pub fn encode_batch(&self, batch: &GraphBatch) -> Result<Tensor> {
        let lat = self.encoder.forward(batch)?;
        let pooled = lat.a.broadcast_mul(&batch.mask)?.sum(1)?.broadcast_div(&batch.counts.squeeze(2)?)?;
        l2_normalize(&self.pool.forward(&pooled)?)
    }

    pub fn encode_molecules(&self, states: &[&MolState], steps: &[usize]) -> Result<Tensor> {
        self.encode_batch(&GraphBatch::new(states, steps)?)
    }

    /// Unit text embeddings `[B, d]`.
    pub fn encode_texts(&self, texts: &[&str]) -> Result<Tensor> {
        if texts.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let dev = device();
        match &self.text {
            TextEncoder::Words { index, table, map } => {
                let v = index.len();
                let mut bag = vec![0.0; texts.len() * v];
                for (r, text) in texts.iter().enumerate() {
                    let words = tokenize(text);
                    if words.is_empty() {
                        return Err(ModelError::EmptyPrompt);
                    }
                    let w = 1.0 / words.len() as f64;
                    for word in &words {
                        bag[r * v + index.get(word).copied().unwrap_or(0)] += w;
                    }
                }
                let bag = Tensor::from_vec(bag, (texts.len(), v), &dev)?;
                l2_normalize(&map.forward(&bag.matmul(table)?)?)
            }
            TextEncoder::External { table, map } => {
                let mut rows = Vec::with_capacity(texts.len() * table.dim);
                for text in texts {
                    if text.trim().is_empty() {
                        return Err(ModelError::EmptyPrompt);
                    }
                    rows.extend_from_slice(table.get(text)?);
                }
                let x = Tensor::from_vec(rows, (texts.len(), table.dim), &dev)?;
                l2_normalize(&map.forward(&x)?)
            }
        }
    }

    pub fn text_embedding(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.encode_texts(&[text])?.squeeze(0)?.to_vec1()?)
    }

    pub fn logit_scale(&self) -> Result<f64> {
        scalar(&self.logit_scale)
    }

    /// Vars updated by training under the freeze flags.
    fn trainable(&self) -> Vec<Var> {
        let c = &self.meta.config;
        self.params
            .names()
            .filter(|n| !(c.freeze_molecule && n.starts_with("mol.")) && !(c.freeze_text && n.starts_with("text.")))
            .filter_map(|n| self.params.get(n).cloned())
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(ALIGN_CONFIG_FILE), serde_json::to_string_pretty(&self.meta)?)?;
        self.params.save(dir.join(ALIGN_PARAMS_FILE))?;
        if let TextEncoder::External { table, .. } = &self.text {
            fs::File::create(dir.join(EXTERNAL_EMBEDDINGS_FILE))?.write_all(table.to_jsonl()?.as_bytes())?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<AlignmentModel> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(ALIGN_CONFIG_FILE))
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", dir.join(ALIGN_CONFIG_FILE).display())))?;
        let meta: AlignMeta = serde_json::from_str(&text)?;
        let external = match meta.text {
            TextSource::External { .. } => Some(EmbeddingTable::read(dir.join(EXTERNAL_EMBEDDINGS_FILE))?),
            TextSource::Words(_) => None,
        };
        let mut model = AlignmentModel::new(&meta.config, meta.text.clone(), external)?;
        model.params.load(dir.join(ALIGN_PARAMS_FILE))?;
        model.meta = meta;
        Ok(model)
    }
}

/// Symmetric cross-entropy between the similarity logits `[B, B]` and soft
/// targets (rows and columns each summing to one).
pub fn info_nce(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let b = logits.dim(0)? as f64;
    let rows = log_softmax(logits, 1)?.mul(targets)?.sum_all()?;
    let cols = log_softmax(logits, 0)?.mul(targets)?.sum_all()?;
    Ok(rows.add(&cols)?.affine(-0.5 / b, 0.0)?)
}

/// Pairs whose texts are identical are all treated as positives.
pub fn soft_targets(texts: &[&str]) -> Result<Tensor> {
    let b = texts.len();
    let mut t = vec![0.0; b * b];
    for i in 0..b {
        let same: Vec<usize> = (0..b).filter(|&j| texts[j] == texts[i]).collect();
        for &j in &same {
            t[i * b + j] = 1.0 / same.len() as f64;
        }
    }
    Ok(Tensor::from_vec(t, (b, b), &device())?)
}

/// One contrastive loss on a batch of (molecule, text) pairs at the given steps.
pub fn contrastive_loss(model: &AlignmentModel, mols: &[&MolState], steps: &[usize], texts: &[&str]) -> Result<Tensor> {
    if mols.len() < 2 || mols.len() != texts.len() {
        return Err(ModelError::Config(format!("contrastive batch needs >= 2 aligned pairs, got {}", mols.len())));
    }
    let x = model.encode_molecules(mols, steps)?;
    let y = model.encode_texts(texts)?;
    let logits = x.matmul(&y.t()?)?.broadcast_mul(&model.logit_scale.exp()?)?;
    info_nce(&logits, &soft_targets(texts)?)
}

/// Trains `model` in place on clean `pairs`, noising each molecule to a
/// random step (or leaving it clean) so that the encoder can score noisy
/// states during guidance. Returns the per-epoch mean losses.
pub fn contrastive_train(
    model: &mut AlignmentModel,
    pairs: &[(MolState, String)],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let config = model.meta.config.clone();
    if pairs.len() < 2 || config.batch_size < 2 {
        return Err(ModelError::Config("contrastive training needs batches of at least 2 pairs".into()));
    }
    let vars = model.trainable();
    if vars.is_empty() {
        return Err(ModelError::NothingToOptimize);
    }
    let mut opt = AdamW::new(vars, ParamsAdamW { lr: config.learning_rate, weight_decay: 0.0, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(17));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let mut mols = Vec::with_capacity(chunk.len());
            let mut steps = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let t = if rng.random::<f64>() < config.clean_fraction { 0 } else { rng.random_range(1..=schedule.steps) };
                mols.push(noise_to(&pairs[i].0, t, schedule, Frame::Centred, &mut rng)?);
                steps.push(t);
            }
            let refs: Vec<&MolState> = mols.iter().collect();
            let texts: Vec<&str> = chunk.iter().map(|&i| pairs[i].1.as_str()).collect();
            let loss = contrastive_loss(model, &refs, &steps, &texts)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(ModelError::NonFinite(format!("contrastive loss at epoch {epoch}")));
            }
            opt.backward_step(&loss)?;
            sum += v;
            count += 1;
        }
        let mean = sum / count.max(1) as f64;
        log::info!("align epoch {epoch}: loss {mean:.4}");
        losses.push(mean);
        model.meta.losses.push(mean);
        model.meta.epoch += 1;
    }
    Ok(losses)
}

/// Cosine similarity between the molecule embedding at step `t` and the
/// prompt embedding.
pub fn alignment_score(model: &AlignmentModel, state: &MolState, t: usize, prompt: &str) -> Result<f64> {
    if prompt.trim().is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    let x = model.encode_molecules(&[state], &[t])?;
    let y = model.encode_texts(&[prompt])?;
    scalar(&x.mul(&y)?.sum_all()?)
}

/// Words that join identity phrases and are dropped when splitting.
const CONNECTIVES: &[&str] = &["this", "molecule", "it", "is", "has", "have", "which", "and", "that", "with"];

fn strip_connectives(fragment: &str) -> String {
    let mut words: Vec<&str> = fragment.split_whitespace().collect();
    while let Some(first) = words.first() {
        if CONNECTIVES.contains(&first.to_lowercase().as_str()) {
            words.remove(0);
        } else {
            break;
        }
    }
    words.join(" ")
}

/// Splits a prompt into identity phrases at commas, "and" and "which".
/// A single-clause prompt has no identities.
pub fn split_identities(prompt: &str) -> Vec<String> {
    let trimmed = prompt.trim().trim_end_matches(['.', '!', ';']).trim();
    let mut clauses = Vec::new();
    for part in trimmed.split([',', ';']) {
        let mut current: Vec<&str> = Vec::new();
        for word in part.split_whitespace() {
            let lw = word.to_lowercase();
            if (lw == "and" || lw == "which") && !current.is_empty() {
                clauses.push(current.join(" "));
                current.clear();
            }
            current.push(word);
        }
        if !current.is_empty() {
            clauses.push(current.join(" "));
        }
    }
    let identities: Vec<String> = clauses.iter().map(|c| strip_connectives(c)).filter(|c| !c.is_empty()).collect();
    if identities.len() < 2 {
        Vec::new()
    } else {
        identities
    }
}

/// `(y0, y1, …)`: the prompt followed by its identities when splitting is on.
pub fn prompt_texts(prompt: &str, split: bool) -> Vec<String> {
    let mut out = vec![prompt.to_string()];
    if split {
        out.extend(split_identities(prompt));
    }
    out
}

/// Gradients of `E = Σ_k ‖y_k − x(M)‖²` with respect to the relaxed state,
/// where `x` is the unit molecule embedding and `y_k` the unit prompt
/// embeddings. Descending `E` raises the alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSignal {
    pub grad_positions: DMatrix<f64>,
    pub grad_atoms: DMatrix<f64>,
    /// `(n·n) × b`; row `(i, j)` equals row `(j, i)` and holds the derivative
    /// along a symmetric change of the pair.
    pub grad_bonds: DMatrix<f64>,
    /// Cosine alignment with the first prompt embedding.
    pub score: f64,
}

pub fn alignment_energy(model: &AlignmentModel, batch: &GraphBatch, targets: &[Vec<f64>]) -> Result<(Tensor, Tensor)> {
    let x = model.encode_batch(batch)?.squeeze(0)?;
    let mut energy: Option<Tensor> = None;
    for y in targets {
        let y = Tensor::from_slice(y, y.len(), &device())?;
        let term = y.sub(&x)?.sqr()?.sum_all()?;
        energy = Some(match energy {
            None => term,
            Some(e) => e.add(&term)?,
        });
    }
    let energy = energy.ok_or(ModelError::EmptyPrompt)?;
    Ok((energy, x))
}

pub fn alignment_gradient(model: &AlignmentModel, state: &MolState, t: usize, targets: &[Vec<f64>]) -> Result<GuidanceSignal> {
    let n = state.n_atoms();
    let (a, b) = (state.atoms.ncols(), state.bonds.ncols());
    let dev = device();
    let to_vec = |m: &DMatrix<f64>| -> Vec<f64> { m.transpose().iter().copied().collect() };
    let pos = Var::from_tensor(&Tensor::from_vec(to_vec(&state.pos), (1, n, 3), &dev)?)?;
    let atoms = Var::from_tensor(&Tensor::from_vec(to_vec(&state.atoms), (1, n, a), &dev)?)?;
    let bonds = Var::from_tensor(&Tensor::from_vec(to_vec(&state.bonds), (1, n, n, b), &dev)?)?;
    let batch = GraphBatch::single(atoms.as_tensor().clone(), bonds.as_tensor().clone(), pos.as_tensor().clone(), t)?;
    let (energy, x) = alignment_energy(model, &batch, targets)?;
    let grads = energy.backward()?;
    let fetch = |v: &Var, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
        let g = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; rows * cols],
        };
        Ok(DMatrix::from_row_slice(rows, cols, &g))
    };
    let grad_positions = fetch(&pos, n, 3)?;
    let grad_atoms = fetch(&atoms, n, a)?;
    let raw = fetch(&bonds, n * n, b)?;
    let mut grad_bonds = DMatrix::zeros(n * n, b);
    for i in 0..n {
        for j in 0..n {
            for c in 0..b {
                grad_bonds[(i * n + j, c)] = raw[(i * n + j, c)] + raw[(j * n + i, c)];
            }
        }
    }
    for (name, m) in [("positions", &grad_positions), ("atoms", &grad_atoms), ("bonds", &grad_bonds)] {
        if let Some(k) = m.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(format!("alignment gradient w.r.t. {name} (flat index {k})")));
        }
    }
    ensure_finite(&x, "molecule embedding")?;
    let y0 = Tensor::from_slice(&targets[0], targets[0].len(), &dev)?;
    let score = scalar(&x.mul(&y0)?.sum_all()?)?;
    Ok(GuidanceSignal { grad_positions, grad_atoms, grad_bonds, score })
}
