//! Noise schedules for the joint position / atom-type / bond-type chain and
//! the exact forward and posterior kernels.
//!
//! All per-step arrays are indexed `0..=T`; index 0 is the clean state
//! (`β_0 = 0`, `ᾱ_0 = 1`, `Q̄_0 = I`).

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const DEFAULT_STEPS: usize = 800;
const MAX_BETA: f64 = 0.999;
const ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

/// Which categorical chain a kernel acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chain {
    Atom,
    Bond,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorParams {
    pub mu: f64,
    pub nu: f64,
    /// Posterior variance.
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub alpha_z: Vec<f64>,
    pub beta_z: Vec<f64>,
    pub q_atom: Vec<DMatrix<f64>>,
    pub q_bond: Vec<DMatrix<f64>>,
    pub qbar_atom: Vec<DMatrix<f64>>,
    pub qbar_bond: Vec<DMatrix<f64>>,
    pub m_h: Vec<f64>,
    pub m_e: Vec<f64>,
}

/// Plain arrays stored in checkpoints; the matrices are rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleArrays {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub m_h: Vec<f64>,
    pub m_e: Vec<f64>,
}

fn check_marginal(m: &[f64], name: &str) -> Result<()> {
    if m.is_empty() {
        return Err(CoreError::Schedule(format!("{name} is empty")));
    }
    if m.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(CoreError::Schedule(format!("{name} has a negative or non-finite entry")));
    }
    let s: f64 = m.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(CoreError::Schedule(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `Q = α·I + (1 − α)·1·m`.
fn mixing_matrix(alpha: f64, m: &[f64]) -> DMatrix<f64> {
    let k = m.len();
    DMatrix::from_fn(k, k, |r, c| (1.0 - alpha) * m[c] + if r == c { alpha } else { 0.0 })
}

fn cosine_betas(steps: usize) -> Vec<f64> {
    let s = 0.008;
    let f = |t: usize| {
        let x = (t as f64 / steps as f64 + s) / (1.0 + s) * PI / 2.0;
        x.cos().powi(2)
    };
    let mut beta = vec![0.0];
    for t in 1..=steps {
        beta.push((1.0 - f(t) / f(t - 1)).clamp(0.0, MAX_BETA));
    }
    beta
}

fn linear_betas(steps: usize) -> Vec<f64> {
    let scale = 1000.0 / steps as f64;
    let start = 1e-4 * scale;
    let end = (0.02 * scale).min(MAX_BETA);
    let mut beta = vec![0.0];
    for t in 1..=steps {
        let frac = (t - 1) as f64 / (steps - 1) as f64;
        beta.push(start + frac * (end - start));
    }
    beta
}

pub fn build_schedule(steps: usize, kind: ScheduleKind, m_h: &[f64], m_e: &[f64]) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(CoreError::Schedule(format!("need at least 2 steps, got {steps}")));
    }
    let beta = match kind {
        ScheduleKind::Cosine => cosine_betas(steps),
        ScheduleKind::Linear => linear_betas(steps),
    };
    let mut sched = NoiseSchedule::from_betas(beta, m_h, m_e)?;
    sched.kind = kind;
    let last = sched.alpha_bar[steps];
    if last >= 1e-3 {
        return Err(CoreError::Schedule(format!("alpha_bar at T is {last:e}, not below 1e-3")));
    }
    Ok(sched)
}

impl NoiseSchedule {
    /// Builds a schedule from explicit `β_1..β_T` (with a leading `β_0 = 0`).
    /// The discrete chain uses `α^z_t = 1 − β_t`, so its cumulative mixing
    /// weight equals `ᾱ_t`.
    pub fn from_betas(beta: Vec<f64>, m_h: &[f64], m_e: &[f64]) -> Result<NoiseSchedule> {
        check_marginal(m_h, "atom marginal")?;
        check_marginal(m_e, "bond marginal")?;
        if beta.len() < 2 || beta[0] != 0.0 {
            return Err(CoreError::Schedule("betas must start with a zero entry for t = 0".into()));
        }
        if beta[1..].iter().any(|&b| !(0.0..1.0).contains(&b)) {
            return Err(CoreError::Schedule("every beta must lie in [0, 1)".into()));
        }
        let steps = beta.len() - 1;
        let mut alpha_bar = vec![1.0];
        for t in 1..=steps {
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta[t]));
        }
        let alpha_z: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let beta_z = beta.clone();
        let build = |m: &[f64]| {
            let q: Vec<DMatrix<f64>> = alpha_z.iter().map(|&a| mixing_matrix(a, m)).collect();
            let mut qbar = vec![DMatrix::identity(m.len(), m.len())];
            for t in 1..=steps {
                let next = &qbar[t - 1] * &q[t];
                qbar.push(next);
            }
            (q, qbar)
        };
        let (q_atom, qbar_atom) = build(m_h);
        let (q_bond, qbar_bond) = build(m_e);
        Ok(NoiseSchedule {
            steps,
            kind: ScheduleKind::Cosine,
            beta,
            alpha_bar,
            alpha_z,
            beta_z,
            q_atom,
            q_bond,
            qbar_atom,
            qbar_bond,
            m_h: m_h.to_vec(),
            m_e: m_e.to_vec(),
        })
    }

    pub fn to_arrays(&self) -> ScheduleArrays {
        ScheduleArrays {
            steps: self.steps,
            kind: self.kind,
            beta: self.beta.clone(),
            alpha_bar: self.alpha_bar.clone(),
            m_h: self.m_h.clone(),
            m_e: self.m_e.clone(),
        }
    }

    pub fn from_arrays(a: &ScheduleArrays) -> Result<NoiseSchedule> {
        if a.beta.len() != a.steps + 1 {
            return Err(CoreError::Schedule("beta length does not match steps".into()));
        }
        let mut s = NoiseSchedule::from_betas(a.beta.clone(), &a.m_h, &a.m_e)?;
        s.kind = a.kind;
        Ok(s)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(CoreError::StepOutOfRange { t, lo: 1, hi: self.steps });
        }
        Ok(())
    }

    pub fn q(&self, chain: Chain, t: usize) -> &DMatrix<f64> {
        match chain {
            Chain::Atom => &self.q_atom[t],
            Chain::Bond => &self.q_bond[t],
        }
    }

    pub fn qbar(&self, chain: Chain, t: usize) -> &DMatrix<f64> {
        match chain {
            Chain::Atom => &self.qbar_atom[t],
            Chain::Bond => &self.qbar_bond[t],
        }
    }

    pub fn marginal(&self, chain: Chain) -> &[f64] {
        match chain {
            Chain::Atom => &self.m_h,
            Chain::Bond => &self.m_e,
        }
    }

    /// Signal-to-noise ratio `ᾱ_t / (1 − ᾱ_t)`.
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / (1.0 - self.alpha_bar[t])
    }

    /// `P_t = √ᾱ_t·P0 + √(1 − ᾱ_t)·ε`.
    pub fn forward_position(&self, p0: &DMatrix<f64>, t: usize, eps: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_step(t)?;
        let ab = self.alpha_bar[t];
        Ok(p0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
    }

    /// One forward step: each row is resampled from `z·Q_t`.
    pub fn forward_discrete<R: Rng + ?Sized>(
        &self,
        z_prev: &DMatrix<f64>,
        t: usize,
        chain: Chain,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        self.check_step(t)?;
        Ok(sample_onehot_rows(&(z_prev * self.q(chain, t)), rng))
    }

    /// Direct jump from the clean state: each row is sampled from `z0·Q̄_t`.
    pub fn forward_discrete_from_start<R: Rng + ?Sized>(
        &self,
        z0: &DMatrix<f64>,
        t: usize,
        chain: Chain,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        self.check_step(t)?;
        Ok(sample_onehot_rows(&(z0 * self.qbar(chain, t)), rng))
    }

    pub fn posterior_params(&self, t: usize) -> Result<PosteriorParams> {
        self.check_step(t)?;
        let (ab, ab_prev, b) = (self.alpha_bar[t], self.alpha_bar[t - 1], self.beta[t]);
        let denom = 1.0 - ab;
        if denom <= 0.0 {
            return Err(CoreError::Schedule(format!("alpha_bar at step {t} is 1")));
        }
        Ok(PosteriorParams {
            mu: ab_prev.sqrt() * b / denom,
            nu: (1.0 - b).sqrt() * (1.0 - ab_prev) / denom,
            sigma: (b * (1.0 - ab_prev) / denom).max(0.0),
        })
    }

    /// Gaussian posterior `q(P_{t−1} | P_t, P0 = predicted)`: returns the mean
    /// and the per-coordinate variance.
    pub fn posterior_position(
        &self,
        p_t: &DMatrix<f64>,
        predicted_p0: &DMatrix<f64>,
        t: usize,
    ) -> Result<(DMatrix<f64>, f64)> {
        let pp = self.posterior_params(t)?;
        Ok((predicted_p0 * pp.mu + p_t * pp.nu, pp.sigma))
    }

    /// Categorical posterior per row:
    /// `∝ (z_t·Q_tᵀ) ⊙ (p̂0·Q̄_{t−1})`, normalized.
    pub fn posterior_discrete(
        &self,
        z_t: &DMatrix<f64>,
        predicted_z0: &DMatrix<f64>,
        t: usize,
        chain: Chain,
    ) -> Result<DMatrix<f64>> {
        self.check_step(t)?;
        let like = z_t * self.q(chain, t).transpose();
        let prior = predicted_z0 * self.qbar(chain, t - 1);
        let mut out = like.component_mul(&prior);
        for mut row in out.row_iter_mut() {
            let s: f64 = row.sum();
            if !(s > 0.0) || !s.is_finite() {
                return Err(CoreError::ZeroNormalizer(t));
            }
            row /= s;
        }
        Ok(out)
    }
}

/// Index drawn from a (not necessarily normalized) non-negative row.
pub fn sample_index<R: Rng + ?Sized>(weights: impl IntoIterator<Item = f64> + Clone, rng: &mut R) -> usize {
    let total: f64 = weights.clone().into_iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, w) in weights.into_iter().enumerate() {
        if w > 0.0 {
            last = k;
        }
        acc += w;
        if u < acc {
            return k;
        }
    }
    last
}

pub fn sample_onehot_rows<R: Rng + ?Sized>(probs: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(probs.nrows(), probs.ncols());
    for r in 0..probs.nrows() {
        let k = sample_index(probs.row(r).iter().copied(), rng);
        out[(r, k)] = 1.0;
    }
    out
}

/// Standard normal `n × 3` noise with its mean row removed.
pub fn com_free_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let mut eps = DMatrix::from_fn(n, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
    remove_mean_rows(&mut eps);
    eps
}

pub fn remove_mean_rows(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    if n == 0 {
        return;
    }
    for c in 0..3 {
        let mean = p.column(c).sum() / n as f64;
        p.column_mut(c).add_scalar_mut(-mean);
    }
}
