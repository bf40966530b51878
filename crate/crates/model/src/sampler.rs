//! Ancestral sampling machinery shared by unconditional generation and the
//! guided optimizers.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ModelError, Result};
use crate::state::{argmax, bonds_from_upper, upper_rows, MolState, Prediction};
use crate::Denoise;
use molprompt_core::schedules::{com_free_noise, remove_mean_rows, sample_onehot_rows};
use molprompt_core::{Chain, NoiseSchedule};

/// Coordinate convention for positions during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Zero centroid; noise is projected onto the centroid-free subspace.
    Centred,
    /// Positions live in a fixed external frame and are never recentred.
    Fixed,
}

fn position_noise<R: Rng + ?Sized>(n: usize, frame: Frame, rng: &mut R) -> DMatrix<f64> {
    match frame {
        Frame::Centred => com_free_noise(n, rng),
        Frame::Fixed => DMatrix::from_fn(n, 3, |_, _| rng.sample::<f64, _>(StandardNormal)),
    }
}

/// Draws `n` atoms from the terminal distribution: normal positions and
/// categorical rows from the stationary marginals.
pub fn prior_state<R: Rng + ?Sized>(n: usize, schedule: &NoiseSchedule, frame: Frame, rng: &mut R) -> MolState {
    let m_h = DMatrix::from_fn(n, schedule.m_h.len(), |_, c| schedule.m_h[c]);
    let pairs = n * n.saturating_sub(1) / 2;
    let m_e = DMatrix::from_fn(pairs, schedule.m_e.len(), |_, c| schedule.m_e[c]);
    let pos = position_noise(n, frame, rng);
    let atoms = sample_onehot_rows(&m_h, rng);
    let bonds = bonds_from_upper(n, &sample_onehot_rows(&m_e, rng));
    MolState { pos, atoms, bonds }
}

/// Forward jump from a clean state to step `t`; `t = 0` returns the input.
pub fn noise_to<R: Rng + ?Sized>(
    clean: &MolState,
    t: usize,
    schedule: &NoiseSchedule,
    frame: Frame,
    rng: &mut R,
) -> Result<MolState> {
    if t == 0 {
        return Ok(clean.clone());
    }
    let n = clean.n_atoms();
    let eps = position_noise(n, frame, rng);
    let pos = schedule.forward_position(&clean.pos, t, &eps)?;
    let atoms = schedule.forward_discrete_from_start(&clean.atoms, t, Chain::Atom, rng)?;
    let upper = schedule.forward_discrete_from_start(&upper_rows(n, &clean.bonds), t, Chain::Bond, rng)?;
    Ok(MolState { pos, atoms, bonds: bonds_from_upper(n, &upper) })
}

/// The reverse kernel `p(M_{t−1} | M_t)` of one state. At `t = 1` the kernel
/// is the clean-state estimate itself with zero position variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernels {
    pub pos_mean: DMatrix<f64>,
    /// Per-coordinate variance.
    pub pos_var: f64,
    pub atom_probs: DMatrix<f64>,
    /// Rows over unordered pairs `i < j`.
    pub bond_probs: DMatrix<f64>,
}

pub fn reverse_kernels(state: &MolState, pred: &Prediction, t: usize, schedule: &NoiseSchedule) -> Result<Kernels> {
    let n = state.n_atoms();
    let pred_bonds = upper_rows(n, &pred.bond_probs);
    if t == 1 {
        return Ok(Kernels {
            pos_mean: pred.pos0.clone(),
            pos_var: 0.0,
            atom_probs: pred.atom_probs.clone(),
            bond_probs: pred_bonds,
        });
    }
    let (pos_mean, pos_var) = schedule.posterior_position(&state.pos, &pred.pos0, t)?;
    let atom_probs = schedule.posterior_discrete(&state.atoms, &pred.atom_probs, t, Chain::Atom)?;
    let bond_probs = schedule.posterior_discrete(&upper_rows(n, &state.bonds), &pred_bonds, t, Chain::Bond)?;
    Ok(Kernels { pos_mean, pos_var, atom_probs, bond_probs })
}

fn argmax_rows(p: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(p.nrows(), p.ncols());
    for r in 0..p.nrows() {
        out[(r, argmax(p.row(r).iter().copied()))] = 1.0;
    }
    out
}

/// Samples `M_{t−1}`. The last step (`t = 1`) is deterministic: argmax
/// categories and the mean positions.
pub fn draw<R: Rng + ?Sized>(k: &Kernels, t: usize, frame: Frame, rng: &mut R) -> MolState {
    let n = k.pos_mean.nrows();
    if t == 1 {
        return MolState {
            pos: k.pos_mean.clone(),
            atoms: argmax_rows(&k.atom_probs),
            bonds: bonds_from_upper(n, &argmax_rows(&k.bond_probs)),
        };
    }
    let mut pos = &k.pos_mean + position_noise(n, frame, rng) * k.pos_var.sqrt();
    if frame == Frame::Centred {
        remove_mean_rows(&mut pos);
    }
    let atoms = sample_onehot_rows(&k.atom_probs, rng);
    let bonds = bonds_from_upper(n, &sample_onehot_rows(&k.bond_probs, rng));
    MolState { pos, atoms, bonds }
}

/// Per-step callbacks of a reverse run. `k` indexes the state in the batch.
pub trait StepHook {
    /// Called on every kernel before it is sampled.
    fn tilt(&mut self, _k: usize, _t: usize, _state: &MolState, _pred: &Prediction, _kernels: &mut Kernels) -> Result<()> {
        Ok(())
    }

    /// Called on every new state `M_{t_new}`.
    fn after(&mut self, _k: usize, _t_new: usize, _state: &mut MolState) -> Result<()> {
        Ok(())
    }
}

pub struct NoHook;

impl StepHook for NoHook {}

/// Runs `t_start, …, 1` on a batch of states, each with its own random
/// stream, so a state's trajectory does not depend on its neighbours' draws.
pub fn reverse_run(
    model: &dyn Denoise,
    schedule: &NoiseSchedule,
    frames: &[Frame],
    mut states: Vec<MolState>,
    t_start: usize,
    rngs: &mut [ChaCha8Rng],
    hook: &mut dyn StepHook,
) -> Result<Vec<MolState>> {
    if rngs.len() != states.len() || frames.len() != states.len() {
        return Err(ModelError::Config("one random stream and one frame per state required".into()));
    }
    if t_start > schedule.steps {
        return Err(ModelError::Config(format!("start step {t_start} exceeds T = {}", schedule.steps)));
    }
    for t in (1..=t_start).rev() {
        let refs: Vec<&MolState> = states.iter().collect();
        let preds = model.predict(&refs, &vec![t; refs.len()])?;
        let mut next = Vec::with_capacity(states.len());
        for (k, (state, pred)) in states.iter().zip(&preds).enumerate() {
            let mut kernels = reverse_kernels(state, pred, t, schedule)?;
            hook.tilt(k, t, state, pred, &mut kernels)?;
            let mut new = draw(&kernels, t, frames[k], &mut rngs[k]);
            hook.after(k, t - 1, &mut new)?;
            new.check_finite()?;
            next.push(new);
        }
        states = next;
    }
    Ok(states)
}
