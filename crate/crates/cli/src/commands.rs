//! The subcommands. Each takes a resolved [`RunConfig`] and returns the
//! directory it wrote.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use molprompt_core::data::{default_templates, load_corpus, parse_templates, write_corpus, Corpus};
use molprompt_core::evaluation::{
    generation_metrics, hit_ratio, multi_run_hit_ratio, Evaluator, Evaluators, GenerationMetrics, HitReport,
    LinearRegressor, PropertySpec,
};
use molprompt_core::toy::toy_corpus;
use molprompt_core::{similarity, validate, AtomVocab, Molecule, DEFAULT_RADIUS};
use molprompt_model::align::{alignment_score, contrastive_train, AlignmentModel, EmbeddingTable, TextSource};
use molprompt_model::guidance::{choose_partial_t, run_jobs, Guide, Job, Models, PromptGuide};
use molprompt_model::trainer::{draw_size, sample_batch, train, DiffusionCheckpoint};
use molprompt_model::MolState;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.csv";
pub const SAMPLE_METRICS_FILE: &str = "metrics.json";
const REGRESSOR_RIDGE: f64 = 1e-3;

pub fn make_toy_corpus(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir()?;
    let items = toy_corpus(cfg.toy.conformers, cfg.seed())?;
    write_corpus(&out, &items)?;
    cfg.write_resolved(&out)?;
    log::info!("wrote {} molecules to {}", items.len(), out.display());
    Ok(out)
}

fn load_training_corpus(cfg: &RunConfig, vocab: &AtomVocab) -> Result<Corpus> {
    Ok(load_corpus(cfg.corpus_dir()?, vocab, &[])?)
}

pub fn train_diffusion(cfg: &RunConfig) -> Result<PathBuf> {
    let dest = match &cfg.out {
        Some(o) => o.clone(),
        None => cfg.diffusion_dir()?,
    };
    let corpus = load_training_corpus(cfg, &AtomVocab::default())?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.checkpoint_dir = Some(dest.clone());
    let ckpt = train(&corpus, &cfg.model, &train_cfg)?;
    ckpt.save(&dest)?;
    cfg.write_resolved(&dest)?;
    if let Some(m) = ckpt.metrics.last() {
        log::info!("epoch {}: loss {:.4}", m.epoch, m.loss);
    }
    Ok(dest)
}

pub fn train_align(cfg: &RunConfig) -> Result<PathBuf> {
    let dest = match &cfg.out {
        Some(o) => o.clone(),
        None => cfg.align_dir()?,
    };
    let diffusion = DiffusionCheckpoint::load(cfg.diffusion_dir()?)?;
    let vocab = diffusion.meta.vocab.clone();
    let mut corpus = load_training_corpus(cfg, &vocab)?;
    let templates = match &cfg.text.templates {
        Some(p) => parse_templates(&fs::read_to_string(p)?)?,
        None => default_templates(),
    };
    corpus.attach_captions(&templates, cfg.text.compound_captions)?;
    let mut pairs = Vec::new();
    for item in &corpus.items {
        let state = MolState::from_molecule(&item.mol, &vocab)?;
        for c in &item.captions {
            pairs.push((state.clone(), c.clone()));
        }
    }
    if pairs.len() < 2 {
        return Err(CliError::Usage("the corpus yields fewer than two captioned molecules".into()));
    }
    let (text, external) = match &cfg.text.external_embeddings {
        Some(p) => {
            let table = EmbeddingTable::read(p)?;
            (TextSource::External { dim: table.dim }, Some(table))
        }
        None => (TextSource::words_from_corpus(pairs.iter().map(|(_, c)| c.as_str())), None),
    };
    let mut align_cfg = cfg.align.clone();
    align_cfg.encoder.atom_types = vocab.len();
    let mut model = AlignmentModel::new(&align_cfg, text, external)?;
    let losses = contrastive_train(&mut model, &pairs, &diffusion.schedule)?;
    model.save(&dest)?;
    cfg.write_resolved(&dest)?;
    if let Some(l) = losses.last() {
        log::info!("{} caption pairs, final contrastive loss {l:.4}", pairs.len());
    }
    Ok(dest)
}

/// Molecule files named directly or found (as `*.json`) in directories,
/// keyed by file stem.
pub fn collect_molecules(paths: &[PathBuf]) -> Result<Vec<(String, Molecule)>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            files.extend(molecule_files(p)?);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(CliError::Usage(format!("{} does not exist", p.display())));
        }
    }
    files
        .iter()
        .map(|f| {
            let id = f.file_stem().and_then(|s| s.to_str()).unwrap_or("molecule").to_string();
            Ok((id, Molecule::read(f)?))
        })
        .collect()
}

/// Regressor evaluators named by `specs`, fitted on the corpus column of the
/// same label.
fn evaluators(cfg: &RunConfig, specs: &[PropertySpec]) -> Result<Evaluators> {
    let labels: BTreeSet<&str> = specs
        .iter()
        .filter_map(|s| match &s.evaluator {
            Evaluator::Regressor(l) => Some(l.as_str()),
            _ => None,
        })
        .collect();
    let mut ctx = Evaluators::default();
    if labels.is_empty() {
        return Ok(ctx);
    }
    let columns: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    let corpus = load_corpus(cfg.corpus_dir()?, &AtomVocab::default(), &columns)?;
    for label in labels {
        let (mols, ys): (Vec<Molecule>, Vec<f64>) = corpus
            .items
            .iter()
            .filter_map(|i| i.properties.get(label).map(|&y| (i.mol.clone(), y)))
            .unzip();
        ctx.regressors.insert(label.to_string(), LinearRegressor::fit(label, &mols, &ys, REGRESSOR_RIDGE)?);
    }
    Ok(ctx)
}

#[derive(Debug, Clone, Serialize)]
struct ManifestRow {
    run: usize,
    input: String,
    seed: u64,
    partial_t: usize,
    score_before: Option<f64>,
    score_after: Option<f64>,
    tanimoto: f64,
    valid: bool,
    hit: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
struct OptimizeSummary {
    n_inputs: usize,
    n_runs: usize,
    per_run_hit_ratio: Vec<f64>,
    single_run: Option<HitReport>,
    any_hit: Option<HitReport>,
}

/// Seed of run `r` on input `i`.
pub fn job_seed(seed: u64, run: usize, input: usize) -> u64 {
    seed.wrapping_add((run as u64) << 32).wrapping_add(input as u64)
}

fn score(model: &AlignmentModel, mol: &Molecule, vocab: &AtomVocab, prompt: &str) -> Result<Option<f64>> {
    if prompt.trim().is_empty() || mol.is_empty() {
        return Ok(None);
    }
    Ok(Some(alignment_score(model, &MolState::from_molecule(mol, vocab)?, 0, prompt)?))
}

pub fn optimize(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir()?;
    let opt = &cfg.optimize;
    if opt.n_runs == 0 {
        return Err(CliError::Usage("optimize.n_runs must be at least 1".into()));
    }
    let inputs = collect_molecules(&opt.molecules)?;
    if inputs.is_empty() {
        return Err(CliError::Usage("no input molecules: set optimize.molecules".into()));
    }
    let diffusion = DiffusionCheckpoint::load(cfg.diffusion_dir()?)?;
    let align = AlignmentModel::load(cfg.align_dir()?)?;
    let vocab = &diffusion.meta.vocab;
    cfg.guidance.validate(diffusion.schedule.steps)?;
    let ctx = evaluators(cfg, &opt.specs)?;
    let guide = if cfg.guidance.lambda > 0.0 {
        Some(PromptGuide::new(&align, &opt.prompt, cfg.guidance.identity_split)?)
    } else {
        None
    };
    let models = Models {
        denoiser: &diffusion.model,
        schedule: &diffusion.schedule,
        vocab,
        guide: guide.as_ref().map(|g| g as &dyn Guide),
    };
    let tasks: Vec<(usize, usize)> = (0..opt.n_runs).flat_map(|r| (0..inputs.len()).map(move |i| (r, i))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers.max(1)).build()?;
    let results: Vec<(usize, Molecule)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(r, i)| -> Result<(usize, Molecule)> {
                let seed = job_seed(cfg.seed(), r, i);
                let m0 = &inputs[i].1;
                let t = choose_partial_t(m0, &models, &cfg.guidance, seed)?;
                let job = Job { molecule: m0.clone(), task: opt.task.clone(), seed };
                Ok((t, run_jobs(&[job], t, &models, &cfg.guidance, None)?.remove(0)))
            })
            .collect::<Result<_>>()
    })?;

    fs::create_dir_all(&out)?;
    let mut runs: Vec<Vec<Molecule>> = vec![Vec::with_capacity(inputs.len()); opt.n_runs];
    let mut manifest = csv::Writer::from_path(out.join(MANIFEST_FILE))?;
    for (&(r, i), (t, mol)) in tasks.iter().zip(results) {
        let dir = out.join(format!("run_{r:02}"));
        fs::create_dir_all(&dir)?;
        let (id, m0) = &inputs[i];
        mol.write(dir.join(format!("{id}.json")))?;
        let valid = !mol.is_empty() && validate(&mol)?.is_valid;
        let hit = if opt.specs.is_empty() {
            None
        } else {
            Some(hit_ratio(std::slice::from_ref(m0), std::slice::from_ref(&mol), &opt.specs, &ctx)?.hit_ratio > 0.0)
        };
        manifest.serialize(ManifestRow {
            run: r,
            input: id.clone(),
            seed: job_seed(cfg.seed(), r, i),
            partial_t: t,
            score_before: score(&align, m0, vocab, &opt.prompt)?,
            score_after: score(&align, &mol, vocab, &opt.prompt)?,
            tanimoto: if mol.is_empty() { 0.0 } else { similarity(m0, &mol, DEFAULT_RADIUS) },
            valid,
            hit,
        })?;
        runs[r].push(mol);
    }
    manifest.flush()?;

    let originals: Vec<Molecule> = inputs.iter().map(|(_, m)| m.clone()).collect();
    let summary = if opt.specs.is_empty() {
        OptimizeSummary { n_inputs: inputs.len(), n_runs: opt.n_runs, per_run_hit_ratio: Vec::new(), single_run: None, any_hit: None }
    } else {
        let per_run = runs
            .iter()
            .map(|run| Ok(hit_ratio(&originals, run, &opt.specs, &ctx)?.hit_ratio))
            .collect::<Result<Vec<f64>>>()?;
        OptimizeSummary {
            n_inputs: inputs.len(),
            n_runs: opt.n_runs,
            per_run_hit_ratio: per_run,
            single_run: Some(hit_ratio(&originals, &runs[0], &opt.specs, &ctx)?),
            any_hit: Some(multi_run_hit_ratio(&originals, &runs, &opt.specs, &ctx)?),
        }
    };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    cfg.write_resolved(&out)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
struct EvaluateSummary {
    n_inputs: usize,
    runs: Vec<HitReport>,
    any_hit: HitReport,
}

pub fn evaluate(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir()?;
    let ev = &cfg.evaluate;
    let input_dir = ev.inputs.clone().ok_or_else(|| CliError::Usage("evaluate.inputs is not set".into()))?;
    if ev.outputs.is_empty() {
        return Err(CliError::Usage("evaluate.outputs is empty".into()));
    }
    if ev.specs.is_empty() {
        return Err(CliError::Usage("evaluate.specs is empty".into()));
    }
    let inputs = collect_molecules(std::slice::from_ref(&input_dir))?;
    if inputs.is_empty() {
        return Err(CliError::Usage(format!("no molecules in {}", input_dir.display())));
    }
    let ctx = evaluators(cfg, &ev.specs)?;
    let mut runs = Vec::with_capacity(ev.outputs.len());
    for dir in &ev.outputs {
        let found: BTreeMap<String, Molecule> = collect_molecules(std::slice::from_ref(dir))?.into_iter().collect();
        if found.is_empty() {
            return Err(CliError::Usage(format!("output directory {} holds no molecules", dir.display())));
        }
        let run = inputs
            .iter()
            .map(|(id, _)| {
                found.get(id).cloned().unwrap_or_else(|| {
                    log::warn!("{}: no output for {id}; counted as a miss", dir.display());
                    Molecule::new(Vec::new(), Vec::new()).expect("empty molecule")
                })
            })
            .collect::<Vec<_>>();
        runs.push(run);
    }
    let originals: Vec<Molecule> = inputs.iter().map(|(_, m)| m.clone()).collect();

    fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_path(out.join(REPORT_FILE))?;
    let mut header = vec!["run".to_string(), "input".into(), "valid".into()];
    for s in &ev.specs {
        header.push(format!("{}_before", s.name));
        header.push(format!("{}_after", s.name));
    }
    header.push("hit".into());
    w.write_record(&header)?;
    let mut reports = Vec::with_capacity(runs.len());
    for (r, run) in runs.iter().enumerate() {
        let report = hit_ratio(&originals, run, &ev.specs, &ctx)?;
        for (i, ((id, m0), m)) in inputs.iter().zip(run).enumerate() {
            let valid = !m.is_empty() && validate(m)?.is_valid;
            let mut row = vec![r.to_string(), id.clone(), valid.to_string()];
            for s in &ev.specs {
                let before = ctx.evaluate(&s.evaluator, m0)?;
                row.push(before.to_string());
                row.push(if m.is_empty() { String::new() } else { ctx.evaluate(&s.evaluator, m)?.to_string() });
            }
            row.push((report.hits[i] == 1).to_string());
            w.write_record(&row)?;
        }
        reports.push(report);
    }
    w.flush()?;
    let summary = EvaluateSummary {
        n_inputs: inputs.len(),
        any_hit: multi_run_hit_ratio(&originals, &runs, &ev.specs, &ctx)?,
        runs: reports,
    };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    cfg.write_resolved(&out)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
struct SampleReport {
    n_samples: usize,
    /// Whether the distribution terms compare against `corpus`.
    reference: bool,
    metrics: Option<GenerationMetrics>,
}

pub fn sample(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir()?;
    let s = &cfg.sample;
    let ckpt = DiffusionCheckpoint::load(cfg.diffusion_dir()?)?;
    let vocab = &ckpt.meta.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let sizes = (0..s.n)
        .map(|_| match s.n_atoms {
            Some(n) => Ok(n),
            None => Ok(draw_size(&ckpt.meta.size_histogram, &mut rng)?),
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut samples = Vec::with_capacity(s.n);
    for (c, chunk) in sizes.chunks(s.batch_size.max(1)).enumerate() {
        let offset = (c * s.batch_size.max(1)) as u64;
        for st in sample_batch(&ckpt.model, &ckpt.schedule, chunk, cfg.seed().wrapping_add(offset))? {
            samples.push(st.decode(vocab)?);
        }
    }
    fs::create_dir_all(&out)?;
    for (k, m) in samples.iter().enumerate() {
        m.write(out.join(format!("sample_{k:04}.json")))?;
    }
    let reference = match &cfg.corpus {
        Some(_) => load_training_corpus(cfg, vocab)?.molecules(),
        None => Vec::new(),
    };
    let report = SampleReport {
        n_samples: samples.len(),
        reference: !reference.is_empty(),
        metrics: if samples.is_empty() { None } else { Some(generation_metrics(&samples, &reference, vocab)?) },
    };
    fs::write(out.join(SAMPLE_METRICS_FILE), serde_json::to_string_pretty(&report)?)?;
    cfg.write_resolved(&out)?;
    Ok(out)
}

/// `*.json` files in `dir` other than the reports this tool writes.
pub fn molecule_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|f| f.extension().is_some_and(|x| x == "json"))
        .filter(|f| f.file_name().is_some_and(|n| n != SUMMARY_FILE && n != SAMPLE_METRICS_FILE))
        .collect();
    files.sort();
    Ok(files)
}
