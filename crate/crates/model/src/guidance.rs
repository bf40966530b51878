//! Prompt-guided reverse sampling, the manifold constraint, choice of the
//! partial noising depth and the three optimization variants.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::{alignment_gradient, prompt_texts, AlignmentModel, GuidanceSignal};
use crate::error::{ModelError, Result};
use crate::sampler::{noise_to, reverse_run, Frame, Kernels, StepHook};
use crate::state::{upper_pairs, upper_rows, MolState, Prediction};
use crate::Denoise;
use molprompt_core::chem::{is_valid, k_hop_neighborhood};
use molprompt_core::schedules::{remove_mean_rows, sample_index};
use molprompt_core::{similarity, AtomVocab, BondType, Molecule, NoiseSchedule, Vec3, DEFAULT_RADIUS};

/// Noising depth: an explicit step count or a named preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PartialT {
    Steps(usize),
    Preset(String),
}

/// Named presets as fractions of an 800-step chain.
pub const PARTIAL_T_PRESETS: &[(&str, usize)] = &[("500", 500), ("800", 800)];
const PRESET_BASE: f64 = 800.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub sigma_y: f64,
    /// `None` picks the depth from `similarity_target`, else the "500" preset.
    pub partial_t: Option<PartialT>,
    pub manifold_constraint: bool,
    /// Remove the whole component along the score direction, not only a
    /// negative one.
    pub unconditional_projection: bool,
    pub identity_split: bool,
    pub similarity_target: Option<[f64; 2]>,
    /// Drop added atoms that end up without any bond.
    pub drop_unbonded_extras: bool,
    /// Largest anchor-to-atom distance accepted by the site variant (Å).
    pub site_radius: f64,
    pub probe_replicas: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lambda: 1.0,
            sigma_y: 1.0,
            partial_t: None,
            manifold_constraint: true,
            unconditional_projection: false,
            identity_split: false,
            similarity_target: None,
            drop_unbonded_extras: true,
            site_radius: 2.0,
            probe_replicas: 4,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.sigma_y > 0.0) {
            return Err(ModelError::Config("need lambda >= 0 and sigma_y > 0".into()));
        }
        if let Some([lo, hi]) = self.similarity_target {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(ModelError::Config(format!("similarity band [{lo}, {hi}] outside 0 <= lo <= hi <= 1")));
            }
        }
        if let Some(p) = &self.partial_t {
            resolve_partial_t(p, steps)?;
        }
        Ok(())
    }

    /// `λ / σ_y²`.
    pub fn lambda_eff(&self) -> f64 {
        self.lambda / (self.sigma_y * self.sigma_y)
    }
}

pub fn resolve_partial_t(p: &PartialT, steps: usize) -> Result<usize> {
    match p {
        PartialT::Steps(s) if *s <= steps => Ok(*s),
        PartialT::Steps(s) => Err(ModelError::Config(format!("partial_t {s} exceeds T = {steps}"))),
        PartialT::Preset(name) => PARTIAL_T_PRESETS
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, k)| ((k as f64 / PRESET_BASE) * steps as f64).round() as usize)
            .ok_or_else(|| ModelError::Config(format!("unknown partial_t preset `{name}`"))),
    }
}

/// Anything that supplies a guidance signal for a noisy state.
pub trait Guide: Sync {
    fn signal(&self, state: &MolState, t: usize) -> Result<GuidanceSignal>;
}

/// Guidance towards a text prompt through an alignment model.
pub struct PromptGuide<'a> {
    pub model: &'a AlignmentModel,
    pub targets: Vec<Vec<f64>>,
}

impl<'a> PromptGuide<'a> {
    pub fn new(model: &'a AlignmentModel, prompt: &str, identity_split: bool) -> Result<Self> {
        if prompt.trim().is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        let targets = prompt_texts(prompt, identity_split)
            .iter()
            .map(|t| model.text_embedding(t))
            .collect::<Result<_>>()?;
        Ok(PromptGuide { model, targets })
    }
}

impl Guide for PromptGuide<'_> {
    fn signal(&self, state: &MolState, t: usize) -> Result<GuidanceSignal> {
        alignment_gradient(self.model, state, t, &self.targets)
    }
}

/// Exponential tilt of a Gaussian with per-coordinate variance `var` by
/// `exp(−λ·g·x)`: the mean moves by `−λ·var·g`.
pub fn tilt_position_mean(mean: &mut DMatrix<f64>, var: f64, grad: &DMatrix<f64>, lambda_eff: f64) {
    *mean -= grad * (lambda_eff * var);
}

/// Rows multiplied by `exp(−λ·g_k)` and renormalized.
pub fn tilt_categorical(probs: &mut DMatrix<f64>, grad: &DMatrix<f64>, lambda_eff: f64) -> Result<()> {
    for r in 0..probs.nrows() {
        let shift = (0..probs.ncols()).map(|c| -lambda_eff * grad[(r, c)]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..probs.ncols() {
            let v = probs[(r, c)] * (-lambda_eff * grad[(r, c)] - shift).exp();
            probs[(r, c)] = v;
            sum += v;
        }
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(ModelError::NonFinite(format!("tilted categorical row {r} (normalizer {sum})")));
        }
        for c in 0..probs.ncols() {
            probs[(r, c)] /= sum;
        }
    }
    Ok(())
}

/// Removes the part of `df` that points against `score`: conditionally
/// (only a negative component) or, with `unconditional`, all of it.
/// A zero score leaves `df` untouched.
pub fn manifold_project(df: &DMatrix<f64>, score: &DMatrix<f64>, unconditional: bool) -> DMatrix<f64> {
    let norm = score.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return df.clone();
    }
    let unit = score / norm;
    let s = df.dot(&unit);
    if s < 0.0 || unconditional {
        df - unit * s
    } else {
        df.clone()
    }
}

/// Score of the noising kernel at the predicted clean positions,
/// `(√ᾱ_t·P̂0 − P_t) / (1 − ᾱ_t)`.
pub fn position_score(p_t: &DMatrix<f64>, pred_p0: &DMatrix<f64>, t: usize, schedule: &NoiseSchedule) -> DMatrix<f64> {
    let ab = schedule.alpha_bar[t];
    (pred_p0 * ab.sqrt() - p_t) / (1.0 - ab)
}

/// Tilts the reverse kernels of one state by a guidance signal.
pub fn guide_kernels(
    kernels: &mut Kernels,
    signal: &GuidanceSignal,
    state: &MolState,
    pred: &Prediction,
    t: usize,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
) -> Result<()> {
    let lambda = config.lambda_eff();
    let mut g = signal.grad_positions.clone();
    if config.manifold_constraint {
        // The projection acts on the ascent direction of log p(y | M).
        let score = position_score(&state.pos, &pred.pos0, t, schedule);
        g = -manifold_project(&(-g), &score, config.unconditional_projection);
    }
    tilt_position_mean(&mut kernels.pos_mean, kernels.pos_var, &g, lambda);
    tilt_categorical(&mut kernels.atom_probs, &signal.grad_atoms, lambda)?;
    tilt_categorical(&mut kernels.bond_probs, &upper_rows(state.n_atoms(), &signal.grad_bonds), lambda)?;
    if let Some(k) = kernels.pos_mean.iter().position(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite(format!("tilted position mean (flat index {k})")));
    }
    Ok(())
}

/// Entries re-imposed after every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Clamp {
    pub atoms: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub clean: MolState,
}

impl Clamp {
    pub fn apply(&self, state: &mut MolState) {
        let n = state.n_atoms();
        for &i in &self.atoms {
            state.pos.set_row(i, &self.clean.pos.row(i));
            state.atoms.set_row(i, &self.clean.atoms.row(i));
        }
        for &(i, j) in &self.pairs {
            state.bonds.set_row(i * n + j, &self.clean.bonds.row(i * n + j));
            state.bonds.set_row(j * n + i, &self.clean.bonds.row(j * n + i));
        }
    }
}

/// Observer of intermediate states: job index, new step index and the
/// state in the input coordinate frame.
pub type StepObserver<'o> = dyn FnMut(usize, usize, &MolState) + 'o;

struct GuidedHook<'a, 'o> {
    guide: Option<&'a dyn Guide>,
    config: &'a GuidanceConfig,
    schedule: &'a NoiseSchedule,
    clamps: Vec<Option<Clamp>>,
    origins: Vec<Vec3>,
    observer: Option<&'a mut StepObserver<'o>>,
}

impl StepHook for GuidedHook<'_, '_> {
    fn tilt(&mut self, _k: usize, t: usize, state: &MolState, pred: &Prediction, kernels: &mut Kernels) -> Result<()> {
        let Some(guide) = self.guide else { return Ok(()) };
        if self.config.lambda == 0.0 {
            return Ok(());
        }
        let signal = guide.signal(state, t)?;
        guide_kernels(kernels, &signal, state, pred, t, self.schedule, self.config)
    }

    fn after(&mut self, k: usize, t_new: usize, state: &mut MolState) -> Result<()> {
        if let Some(c) = &self.clamps[k] {
            c.apply(state);
        }
        if let Some(obs) = self.observer.as_mut() {
            let mut abs = state.clone();
            abs.translate(&self.origins[k]);
            obs(k, t_new, &abs);
        }
        Ok(())
    }
}

/// The trained pieces an optimization run needs.
pub struct Models<'a> {
    pub denoiser: &'a dyn Denoise,
    pub schedule: &'a NoiseSchedule,
    pub vocab: &'a AtomVocab,
    pub guide: Option<&'a dyn Guide>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizationTask {
    Flexible {
        #[serde(default)]
        n_extra: usize,
    },
    Constrained {
        protected_atoms: Vec<usize>,
        /// Defaults to every pair of protected atoms.
        #[serde(default)]
        protected_bonds: Option<Vec<[usize; 2]>>,
        #[serde(default)]
        n_extra: usize,
    },
    Site {
        anchors: Vec<[f64; 3]>,
        k: usize,
        n_new: usize,
    },
}

/// One optimization job: input molecule, task and random seed.
#[derive(Debug, Clone)]
pub struct Job {
    pub molecule: Molecule,
    pub task: OptimizationTask,
    pub seed: u64,
}

/// Atoms drawn from the stationary marginals, with bond rows to `n_existing`
/// atoms and among themselves.
struct Extras {
    atoms: DMatrix<f64>,
    /// Rows for pairs `(i, n_existing + e)` with `i < n_existing + e`, in
    /// order of `e` then `i`.
    bonds: Vec<Vec<f64>>,
    pos: Vec<Vec3>,
}

fn onehot(k: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[k] = 1.0;
    v
}

fn sample_extras<R: Rng + ?Sized>(n_existing: usize, count: usize, schedule: &NoiseSchedule, rng: &mut R) -> Extras {
    let a = schedule.m_h.len();
    let b = schedule.m_e.len();
    let mut atoms = DMatrix::zeros(count, a);
    let mut bonds = Vec::new();
    for e in 0..count {
        atoms[(e, sample_index(schedule.m_h.iter().copied(), rng))] = 1.0;
        for _ in 0..(n_existing + e) {
            bonds.push(onehot(sample_index(schedule.m_e.iter().copied(), rng), b));
        }
    }
    let pos = (0..count)
        .map(|_| Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    Extras { atoms, bonds, pos }
}

fn append_extras(state: &MolState, extras: &Extras) -> MolState {
    let n0 = state.n_atoms();
    let count = extras.atoms.nrows();
    let n = n0 + count;
    let (a, b) = (state.atoms.ncols(), state.bonds.ncols());
    let mut out = MolState {
        pos: DMatrix::zeros(n, 3),
        atoms: DMatrix::zeros(n, a),
        bonds: DMatrix::zeros(n * n, b),
    };
    for i in 0..n0 {
        out.pos.set_row(i, &state.pos.row(i));
        out.atoms.set_row(i, &state.atoms.row(i));
        for j in 0..n0 {
            out.bonds.set_row(i * n + j, &state.bonds.row(i * n0 + j));
        }
    }
    let mut r = 0;
    for e in 0..count {
        let ie = n0 + e;
        for c in 0..3 {
            out.pos[(ie, c)] = extras.pos[e][c];
        }
        out.atoms.set_row(ie, &extras.atoms.row(e));
        out.bonds[(ie * n + ie, BondType::None.index())] = 1.0;
        for i in 0..ie {
            for c in 0..b {
                out.bonds[(i * n + ie, c)] = extras.bonds[r][c];
                out.bonds[(ie * n + i, c)] = extras.bonds[r][c];
            }
            r += 1;
        }
    }
    out
}

/// Initial positions of `n_new` site atoms: standard normal draws
/// translated so that their mean equals the mean of the anchors.
pub fn init_site_positions<R: Rng + ?Sized>(n_new: usize, anchors: &[Vec3], rng: &mut R) -> Result<Vec<Vec3>> {
    if anchors.is_empty() || n_new == 0 {
        return Err(ModelError::Config("site initialization needs anchors and n_new >= 1".into()));
    }
    let target = anchors.iter().fold(Vec3::zeros(), |s, a| s + a) / anchors.len() as f64;
    let raw: Vec<Vec3> = (0..n_new)
        .map(|_| Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let mean = raw.iter().fold(Vec3::zeros(), |s, p| s + p) / n_new as f64;
    Ok(raw.into_iter().map(|p| p - mean + target).collect())
}

fn centroid(mol: &Molecule) -> Vec3 {
    mol.positions().iter().fold(Vec3::zeros(), |s, p| s + p) / mol.n_atoms().max(1) as f64
}

/// Anchor → nearest atom, failing when an anchor is farther than `radius`
/// from every atom.
pub fn appointed_atoms(mol: &Molecule, anchors: &[Vec3], radius: f64) -> Result<Vec<usize>> {
    let mut out = BTreeSet::new();
    for (index, a) in anchors.iter().enumerate() {
        let (idx, d) = (0..mol.n_atoms())
            .map(|i| (i, (mol.position(i) - a).norm()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .ok_or(ModelError::EmptyBatch)?;
        if d > radius {
            return Err(ModelError::AmbiguousSite { index, distance: d, limit: radius });
        }
        out.insert(idx);
    }
    Ok(out.into_iter().collect())
}

/// A job turned into an initial noisy state plus what is needed to map the
/// final state back to a molecule.
struct Prepared {
    state: MolState,
    frame: Frame,
    origin: Vec3,
    clamp: Option<Clamp>,
    /// Original atom index of every working atom (`None` for added atoms).
    source: Vec<Option<usize>>,
    base: Molecule,
}

fn prepare<R: Rng + ?Sized>(job: &Job, t_prime: usize, models: &Models, config: &GuidanceConfig, rng: &mut R) -> Result<Prepared> {
    let m0 = &job.molecule;
    if m0.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if !is_valid(m0) {
        return Err(ModelError::InvalidInput("input molecule fails the validity check".into()));
    }
    let schedule = models.schedule;
    match &job.task {
        OptimizationTask::Flexible { n_extra } | OptimizationTask::Constrained { n_extra, .. } => {
            let origin = centroid(m0);
            let mut clean = MolState::from_molecule(m0, models.vocab)?;
            clean.translate(&(-origin));
            let n0 = clean.n_atoms();
            let extras = sample_extras(n0, *n_extra, schedule, rng);
            let mut full = append_extras(&clean, &extras);
            let source: Vec<Option<usize>> = (0..full.n_atoms()).map(|i| (i < n0).then_some(i)).collect();
            if let OptimizationTask::Constrained { protected_atoms, protected_bonds, .. } = &job.task {
                if let Some(&bad) = protected_atoms.iter().find(|&&i| i >= n0) {
                    return Err(ModelError::Config(format!("protected atom {bad} out of range")));
                }
                let atoms: BTreeSet<usize> = protected_atoms.iter().copied().collect();
                if atoms.len() == n0 && *n_extra == 0 {
                    return Err(ModelError::NothingToOptimize);
                }
                let pairs: Vec<(usize, usize)> = match protected_bonds {
                    Some(list) => list.iter().map(|&[i, j]| (i.min(j), i.max(j))).collect(),
                    None => upper_pairs(n0).into_iter().filter(|(i, j)| atoms.contains(i) && atoms.contains(j)).collect(),
                };
                if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| j >= n0 || i == j) {
                    return Err(ModelError::Config(format!("protected bond ({i}, {j}) invalid")));
                }
                let clamp = Clamp { atoms: atoms.into_iter().collect(), pairs, clean: full.clone() };
                let mut state = noise_to(&full, t_prime, schedule, Frame::Fixed, rng)?;
                clamp.apply(&mut state);
                return Ok(Prepared { state, frame: Frame::Fixed, origin, clamp: Some(clamp), source, base: m0.clone() });
            }
            let shift = full.pos.row_mean();
            remove_mean_rows(&mut full.pos);
            let origin = origin + Vec3::new(shift[0], shift[1], shift[2]);
            let state = noise_to(&full, t_prime, schedule, Frame::Centred, rng)?;
            Ok(Prepared { state, frame: Frame::Centred, origin, clamp: None, source, base: m0.clone() })
        }
        OptimizationTask::Site { anchors, k, n_new } => {
            let anchors: Vec<Vec3> = anchors.iter().map(|a| Vec3::new(a[0], a[1], a[2])).collect();
            if anchors.is_empty() {
                return Err(ModelError::Config("site optimization needs at least one anchor".into()));
            }
            let appointed = appointed_atoms(m0, &anchors, config.site_radius)?;
            let context = k_hop_neighborhood(m0, &appointed, *k);
            let origin = anchors.iter().fold(Vec3::zeros(), |s, a| s + a) / anchors.len() as f64;
            let sub = m0.subset(&context);
            let mut clean = MolState::from_molecule(&sub, models.vocab)?;
            clean.translate(&(-origin));
            let ns = clean.n_atoms();
            let positions = init_site_positions(*n_new, &anchors, rng)?;
            let mut extras = sample_extras(ns, *n_new, schedule, rng);
            extras.pos = positions.iter().map(|p| p - origin).collect();
            let fixed: Vec<usize> = (0..ns).filter(|&i| !appointed.contains(&context[i])).collect();
            let fixed_set: BTreeSet<usize> = fixed.iter().copied().collect();
            let pairs = upper_pairs(ns).into_iter().filter(|(i, j)| fixed_set.contains(i) && fixed_set.contains(j)).collect();
            let noised = noise_to(&clean, t_prime, schedule, Frame::Fixed, rng)?;
            let mut state = append_extras(&noised, &extras);
            let clean_full = append_extras(&clean, &extras);
            let clamp = Clamp { atoms: fixed, pairs, clean: clean_full };
            clamp.apply(&mut state);
            let source = context.iter().map(|&i| Some(i)).chain((0..*n_new).map(|_| None)).collect();
            Ok(Prepared { state, frame: Frame::Fixed, origin, clamp: Some(clamp), source, base: m0.clone() })
        }
    }
}

/// Maps the working state back: working atoms overwrite their source atoms,
/// added atoms are appended (optionally dropped when they have no bond).
fn finish(p: &Prepared, state: &MolState, vocab: &AtomVocab, drop_unbonded: bool) -> Result<Molecule> {
    let mut work = state.clone();
    work.translate(&p.origin);
    let decoded = work.decode(vocab)?;
    let n = decoded.n_atoms();
    let keep: Vec<usize> = (0..n)
        .filter(|&i| p.source[i].is_some() || !drop_unbonded || decoded.degree(i) > 0)
        .collect();
    let mut out = p.base.clone();
    let mut index = vec![usize::MAX; n];
    for &i in &keep {
        index[i] = match p.source[i] {
            Some(orig) => {
                out.set_element(orig, decoded.element(i));
                out.set_position(orig, decoded.position(i));
                orig
            }
            None => out.push_atom(decoded.element(i), decoded.position(i)),
        };
    }
    for (a, &i) in keep.iter().enumerate() {
        for &j in &keep[a + 1..] {
            out.set_bond(index[i], index[j], decoded.bond(i, j));
        }
    }
    Ok(out)
}

/// Runs a batch of jobs at noising depth `t_prime`; each job owns the
/// random stream seeded with its seed. Returns the optimized molecules.
pub fn run_jobs(
    jobs: &[Job],
    t_prime: usize,
    models: &Models,
    config: &GuidanceConfig,
    observer: Option<&mut StepObserver<'_>>,
) -> Result<Vec<Molecule>> {
    config.validate(models.schedule.steps)?;
    if t_prime > models.schedule.steps {
        return Err(ModelError::Config(format!("partial_t {t_prime} exceeds T = {}", models.schedule.steps)));
    }
    let mut rngs: Vec<ChaCha8Rng> = jobs.iter().map(|j| ChaCha8Rng::seed_from_u64(j.seed)).collect();
    let prepared = jobs
        .iter()
        .zip(rngs.iter_mut())
        .map(|(j, r)| prepare(j, t_prime, models, config, r))
        .collect::<Result<Vec<_>>>()?;
    let mut hook = GuidedHook {
        guide: models.guide,
        config,
        schedule: models.schedule,
        clamps: prepared.iter().map(|p| p.clamp.clone()).collect(),
        origins: prepared.iter().map(|p| p.origin).collect(),
        observer,
    };
    if let Some(obs) = hook.observer.as_mut() {
        for (k, p) in prepared.iter().enumerate() {
            let mut abs = p.state.clone();
            abs.translate(&p.origin);
            obs(k, t_prime, &abs);
        }
    }
    let frames: Vec<Frame> = prepared.iter().map(|p| p.frame).collect();
    let init = prepared.iter().map(|p| p.state.clone()).collect();
    let finals = reverse_run(models.denoiser, models.schedule, &frames, init, t_prime, &mut rngs, &mut hook)?;
    prepared
        .iter()
        .zip(&finals)
        .map(|(p, s)| {
            if t_prime == 0 && p.source.iter().all(|s| s.is_some()) && p.source.len() == p.base.n_atoms() {
                return Ok(p.base.clone());
            }
            finish(p, s, models.vocab, config.drop_unbonded_extras)
        })
        .collect()
}

/// Noising depth from the config: explicit steps or preset, else the largest
/// grid depth whose unguided probes keep the mean Tanimoto similarity to
/// `m0` inside the target band, else the "500" preset.
pub fn choose_partial_t(m0: &Molecule, models: &Models, config: &GuidanceConfig, seed: u64) -> Result<usize> {
    let steps = models.schedule.steps;
    if let Some(p) = &config.partial_t {
        return resolve_partial_t(p, steps);
    }
    let Some([lo, hi]) = config.similarity_target else {
        return resolve_partial_t(&PartialT::Preset("500".into()), steps);
    };
    let mut grid: Vec<usize> = (0..12).map(|k| (steps as f64 / 2f64.powi(k)).round() as usize).filter(|&t| t >= 1).collect();
    grid.dedup();
    let probe = Models { guide: None, ..*models };
    for &t in &grid {
        let jobs: Vec<Job> = (0..config.probe_replicas.max(1))
            .map(|r| Job { molecule: m0.clone(), task: OptimizationTask::Flexible { n_extra: 0 }, seed: seed.wrapping_add(r as u64) })
            .collect();
        let outs = run_jobs(&jobs, t, &probe, config, None)?;
        let mean = outs.iter().map(|o| similarity(m0, o, DEFAULT_RADIUS)).sum::<f64>() / outs.len() as f64;
        log::debug!("partial_t probe {t}: mean similarity {mean:.3}");
        if mean >= lo && mean <= hi {
            return Ok(t);
        }
    }
    let smallest = *grid.last().expect("non-empty grid");
    log::warn!("no noising depth keeps similarity within [{lo}, {hi}]; using {smallest}");
    Ok(smallest)
}

fn single(job: Job, models: &Models, config: &GuidanceConfig, observer: Option<&mut StepObserver<'_>>) -> Result<Molecule> {
    let t = choose_partial_t(&job.molecule, models, config, job.seed)?;
    Ok(run_jobs(std::slice::from_ref(&job), t, models, config, observer)?.remove(0))
}

pub fn optimize_flexible(m0: &Molecule, n_extra: usize, models: &Models, config: &GuidanceConfig, seed: u64) -> Result<Molecule> {
    single(Job { molecule: m0.clone(), task: OptimizationTask::Flexible { n_extra }, seed }, models, config, None)
}

pub fn optimize_constrained(
    m0: &Molecule,
    protected_atoms: &[usize],
    n_extra: usize,
    models: &Models,
    config: &GuidanceConfig,
    seed: u64,
    observer: Option<&mut StepObserver<'_>>,
) -> Result<Molecule> {
    let task = OptimizationTask::Constrained { protected_atoms: protected_atoms.to_vec(), protected_bonds: None, n_extra };
    single(Job { molecule: m0.clone(), task, seed }, models, config, observer)
}

#[allow(clippy::too_many_arguments)]
pub fn optimize_site(
    m0: &Molecule,
    anchors: &[Vec3],
    k: usize,
    n_new: usize,
    models: &Models,
    config: &GuidanceConfig,
    seed: u64,
    observer: Option<&mut StepObserver<'_>>,
) -> Result<Molecule> {
    let task = OptimizationTask::Site { anchors: anchors.iter().map(|a| [a[0], a[1], a[2]]).collect(), k, n_new };
    single(Job { molecule: m0.clone(), task, seed }, models, config, observer)
}
