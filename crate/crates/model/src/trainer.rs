//! Diffusion training, checkpoints and unconditional sampling.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig, GraphBatch};
use crate::error::{ModelError, Result};
use crate::nn::{device, log_softmax, scalar, DTYPE};
use crate::sampler::{noise_to, prior_state, reverse_run, Frame, NoHook};
use crate::state::MolState;
use molprompt_core::data::Corpus;
use molprompt_core::schedules::{remove_mean_rows, ScheduleArrays, DEFAULT_STEPS};
use molprompt_core::{build_schedule, AtomVocab, NoiseSchedule, ScheduleKind};

pub const CONFIG_FILE: &str = "config.json";
pub const SCHEDULE_FILE: &str = "schedule.json";
pub const PARAMS_FILE: &str = "params.safetensors";
pub const METRICS_FILE: &str = "metrics.csv";

/// Weight on the position term as a function of the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    #[default]
    Constant,
    /// `min(SNR(t), 5)`.
    ClippedSnr,
}

/// Learning rate over the epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from `learning_rate` down to zero at the last epoch.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: LrDecay,
    /// Decay of an exponential moving average of the weights; the averaged
    /// weights are the ones saved and returned.
    pub ema_decay: Option<f64>,
    pub batch_size: usize,
    pub lambda_t: LambdaPolicy,
    pub position_weight: f64,
    pub atom_weight: f64,
    pub bond_weight: f64,
    pub seed: u64,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 32,
            learning_rate: 1e-5,
            lr_decay: LrDecay::Constant,
            ema_decay: None,
            batch_size: 32,
            lambda_t: LambdaPolicy::Constant,
            position_weight: 1.0,
            atom_weight: 1.0,
            bond_weight: 1.0,
            seed: 0,
            diffusion_steps: DEFAULT_STEPS,
            schedule: ScheduleKind::Cosine,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::Config("learning_rate must be positive".into()));
        }
        let w = [self.position_weight, self.atom_weight, self.bond_weight];
        if w.iter().any(|x| !(*x >= 0.0)) || w.iter().all(|x| *x == 0.0) {
            return Err(ModelError::Config("loss weights must be non-negative and not all zero".into()));
        }
        if self.ema_decay.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            return Err(ModelError::Config("ema_decay must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.diffusion_steps == 0 {
            return Err(ModelError::Config("batch_size and diffusion_steps must be positive".into()));
        }
        Ok(())
    }

    /// Rate used during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            LrDecay::Constant => self.learning_rate,
            LrDecay::Cosine => {
                let f = (epoch.saturating_sub(1)) as f64 / self.epochs.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * f).cos())
            }
        }
    }

    fn lambda(&self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self.lambda_t {
            LambdaPolicy::Constant => 1.0,
            LambdaPolicy::ClippedSnr => schedule.snr(t).min(5.0),
        }
    }
}

/// Clean states with centred positions.
pub fn states_from_corpus(corpus: &Corpus) -> Result<Vec<MolState>> {
    corpus
        .items
        .iter()
        .map(|item| {
            let mut s = MolState::from_molecule(&item.mol, &corpus.vocab)?;
            remove_mean_rows(&mut s.pos);
            Ok(s)
        })
        .collect()
}

/// The random part of one loss evaluation, kept separate so the loss is a
/// deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub steps: Vec<usize>,
    pub noisy: Vec<MolState>,
}

pub fn draw_noise<R: Rng + ?Sized>(clean: &[&MolState], schedule: &NoiseSchedule, rng: &mut R) -> Result<NoiseDraw> {
    let mut steps = Vec::with_capacity(clean.len());
    let mut noisy = Vec::with_capacity(clean.len());
    for s in clean {
        let t = rng.random_range(1..=schedule.steps);
        steps.push(t);
        noisy.push(noise_to(s, t, schedule, Frame::Centred, rng)?);
    }
    Ok(NoiseDraw { steps, noisy })
}

pub struct LossTerms {
    pub total: Tensor,
    pub position: f64,
    pub atom: f64,
    pub bond: f64,
}

/// Batch-averaged reconstruction loss. Each molecule contributes
/// `λ_t·w_P·mean_i ‖P0_i − pred_i‖² + w_H·mean_i CE_i + w_E·mean_{i≠j} CE_ij`.
pub fn diffusion_loss(
    model: &Denoiser,
    clean: &[&MolState],
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<LossTerms> {
    if clean.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let noisy: Vec<&MolState> = draw.noisy.iter().collect();
    let batch = GraphBatch::new(&noisy, &draw.steps)?;
    let target = GraphBatch::new(clean, &draw.steps)?;
    let out = model.forward(&batch)?;
    let bsz = clean.len();
    let dev = device();
    let nmax = target.mask.dim(1)?;

    let counts = target.counts.flatten_all()?;
    let lambdas: Vec<f64> = draw.steps.iter().map(|&t| config.lambda(schedule, t)).collect();
    let lambdas = Tensor::from_vec(lambdas, bsz, &dev)?;
    let pos = out
        .pos0
        .sub(&target.p)?
        .sqr()?
        .broadcast_mul(&target.mask)?
        .flatten_from(1)?
        .sum(1)?
        .div(&counts)?;
    let pos = pos.mul(&lambdas)?;

    let atom = log_softmax(&out.atom_logits, 2)?
        .mul(&target.h)?
        .sum(D::Minus1)?
        .mul(&target.mask.squeeze(2)?)?
        .sum(1)?
        .div(&counts)?
        .neg()?;

    let eye = Tensor::eye(nmax, DTYPE, &dev)?.reshape((1, nmax, nmax))?;
    let off = target.pair_mask.squeeze(3)?.broadcast_sub(&eye)?.relu()?;
    let pairs = off.flatten_from(1)?.sum(1)?.clamp(1.0, f64::INFINITY)?;
    let bond = log_softmax(&out.bond_logits, 3)?
        .mul(&target.e)?
        .sum(D::Minus1)?
        .mul(&off)?
        .flatten_from(1)?
        .sum(1)?
        .div(&pairs)?
        .neg()?;

    let scale = 1.0 / bsz as f64;
    let (pos, atom, bond) = (pos.sum_all()?.affine(scale, 0.0)?, atom.sum_all()?.affine(scale, 0.0)?, bond.sum_all()?.affine(scale, 0.0)?);
    let total = pos
        .affine(config.position_weight, 0.0)?
        .add(&atom.affine(config.atom_weight, 0.0)?)?
        .add(&bond.affine(config.bond_weight, 0.0)?)?;
    Ok(LossTerms { position: scalar(&pos)?, atom: scalar(&atom)?, bond: scalar(&bond)?, total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub position: f64,
    pub atom: f64,
    pub bond: f64,
}

/// Everything a checkpoint directory's `config.json` records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionMeta {
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub vocab: AtomVocab,
    pub size_histogram: BTreeMap<usize, usize>,
    pub epoch: usize,
}

pub struct DiffusionCheckpoint {
    pub model: Denoiser,
    pub schedule: NoiseSchedule,
    pub meta: DiffusionMeta,
    pub metrics: Vec<EpochMetrics>,
}

impl DiffusionCheckpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.meta)?)?;
        fs::write(dir.join(SCHEDULE_FILE), serde_json::to_string_pretty(&self.schedule.to_arrays())?)?;
        self.model.params.save(dir.join(PARAMS_FILE))?;
        let mut f = fs::File::create(dir.join(METRICS_FILE))?;
        writeln!(f, "epoch,loss,position,atom,bond")?;
        for m in &self.metrics {
            writeln!(f, "{},{},{},{},{}", m.epoch, m.loss, m.position, m.atom, m.bond)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<DiffusionCheckpoint> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<String> {
            fs::read_to_string(dir.join(name))
                .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", dir.join(name).display())))
        };
        let meta: DiffusionMeta = serde_json::from_str(&read(CONFIG_FILE)?)?;
        let arrays: ScheduleArrays = serde_json::from_str(&read(SCHEDULE_FILE)?)?;
        let schedule = NoiseSchedule::from_arrays(&arrays)?;
        let model = Denoiser::new(&meta.model, 0)?;
        model.params.load(dir.join(PARAMS_FILE))?;
        let mut metrics = Vec::new();
        if let Ok(text) = fs::read_to_string(dir.join(METRICS_FILE)) {
            for line in text.lines().skip(1) {
                let v: Vec<f64> = line.split(',').filter_map(|x| x.parse().ok()).collect();
                if v.len() == 5 {
                    metrics.push(EpochMetrics { epoch: v[0] as usize, loss: v[1], position: v[2], atom: v[3], bond: v[4] });
                }
            }
        }
        Ok(DiffusionCheckpoint { model, schedule, meta, metrics })
    }
}

/// Trains a fresh denoiser on `corpus`. A checkpoint is written after every
/// epoch (and for the initialization) when `checkpoint_dir` is set.
pub fn train(corpus: &Corpus, model_config: &DenoiserConfig, config: &TrainConfig) -> Result<DiffusionCheckpoint> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut model_config = model_config.clone();
    model_config.atom_types = corpus.vocab.len();
    let schedule = build_schedule(config.diffusion_steps, config.schedule, &corpus.atom_marginal, &corpus.bond_marginal)?;
    let model = Denoiser::new(&model_config, config.seed)?;
    let meta = DiffusionMeta {
        model: model_config,
        train: config.clone(),
        vocab: corpus.vocab.clone(),
        size_histogram: corpus.size_histogram(),
        epoch: 0,
    };
    let mut ckpt = DiffusionCheckpoint { model, schedule, meta, metrics: Vec::new() };
    if let Some(dir) = &config.checkpoint_dir {
        ckpt.save(dir)?;
    }
    let states = states_from_corpus(corpus)?;
    let mut opt = AdamW::new(
        ckpt.model.params.vars(),
        ParamsAdamW { lr: config.learning_rate, weight_decay: 0.0, ..Default::default() },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..states.len()).collect();
    let vars = ckpt.model.params.vars();
    let mut ema = match config.ema_decay {
        Some(_) => Some(vars.iter().map(|v| v.as_tensor().detach().copy()).collect::<candle_core::Result<Vec<_>>>()?),
        None => None,
    };
    for epoch in 1..=config.epochs {
        opt.set_learning_rate(config.learning_rate_at(epoch));
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let clean: Vec<&MolState> = chunk.iter().map(|&i| &states[i]).collect();
            let draw = draw_noise(&clean, &ckpt.schedule, &mut rng)?;
            let terms = diffusion_loss(&ckpt.model, &clean, &draw, &ckpt.schedule, config)?;
            let total = scalar(&terms.total)?;
            if !total.is_finite() {
                return Err(ModelError::NonFinite(format!(
                    "loss at epoch {epoch}, batch {b} (position {}, atom {}, bond {}, steps {:?})",
                    terms.position, terms.atom, terms.bond, draw.steps
                )));
            }
            opt.backward_step(&terms.total)?;
            if let (Some(avg), Some(d)) = (ema.as_mut(), config.ema_decay) {
                for (a, v) in avg.iter_mut().zip(&vars) {
                    *a = ((&*a * d)? + (v.as_tensor() * (1.0 - d))?)?.detach();
                }
            }
            for (s, v) in sums.iter_mut().zip([total, terms.position, terms.atom, terms.bond]) {
                *s += v;
            }
            batches += 1;
        }
        let k = batches.max(1) as f64;
        let m = EpochMetrics { epoch, loss: sums[0] / k, position: sums[1] / k, atom: sums[2] / k, bond: sums[3] / k };
        log::info!("epoch {epoch}: loss {:.4} (pos {:.4}, atom {:.4}, bond {:.4})", m.loss, m.position, m.atom, m.bond);
        ckpt.metrics.push(m);
        ckpt.meta.epoch = epoch;
        if let Some(dir) = &config.checkpoint_dir {
            with_weights(&vars, ema.as_deref(), || ckpt.save(dir))?;
        }
    }
    if let Some(avg) = &ema {
        for (v, a) in vars.iter().zip(avg) {
            v.set(a)?;
        }
    }
    Ok(ckpt)
}

/// Runs `f` with `weights` swapped into `vars`, restoring the originals afterwards.
fn with_weights<T>(vars: &[Var], weights: Option<&[Tensor]>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let Some(weights) = weights else { return f() };
    let live: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().detach().copy()).collect::<candle_core::Result<_>>()?;
    for (v, w) in vars.iter().zip(weights) {
        v.set(w)?;
    }
    let out = f();
    for (v, w) in vars.iter().zip(&live) {
        v.set(w)?;
    }
    out
}

/// Draws a molecule size from a histogram of sizes.
pub fn draw_size<R: Rng + ?Sized>(histogram: &BTreeMap<usize, usize>, rng: &mut R) -> Result<usize> {
    let sizes: Vec<(usize, usize)> = histogram.iter().map(|(&k, &v)| (k, v)).filter(|(k, v)| *k > 0 && *v > 0).collect();
    if sizes.is_empty() {
        return Err(ModelError::Config("empty size histogram".into()));
    }
    let k = molprompt_core::schedules::sample_index(sizes.iter().map(|&(_, c)| c as f64), rng);
    Ok(sizes[k].0)
}

/// One unconditional sample of `n_atoms` atoms.
pub fn sample_unconditional(
    model: &dyn crate::Denoise,
    schedule: &NoiseSchedule,
    n_atoms: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MolState> {
    let mut stream = ChaCha8Rng::seed_from_u64(rng.random());
    let init = prior_state(n_atoms, schedule, Frame::Centred, &mut stream);
    let mut out = reverse_run(model, schedule, &[Frame::Centred], vec![init], schedule.steps, std::slice::from_mut(&mut stream), &mut NoHook)?;
    Ok(out.pop().expect("one state"))
}

/// Batched unconditional sampling; sample `k` uses the stream seeded with
/// `seed + k`, so results do not depend on how the work is chunked into
/// batches of the same composition.
pub fn sample_batch(
    model: &dyn crate::Denoise,
    schedule: &NoiseSchedule,
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<MolState>> {
    let mut rngs: Vec<ChaCha8Rng> = (0..sizes.len()).map(|k| ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64))).collect();
    let init = sizes
        .iter()
        .zip(rngs.iter_mut())
        .map(|(&n, r)| prior_state(n, schedule, Frame::Centred, r))
        .collect();
    reverse_run(model, schedule, &vec![Frame::Centred; sizes.len()], init, schedule.steps, &mut rngs, &mut NoHook)
}
