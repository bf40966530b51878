//! The equivariant graph transformer and the denoiser heads built on it.

use candle_core::{Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::frames::{frame_tensors, FrameTensors};
use crate::nn::{device, ensure_finite, softmax, step_embedding, Init, LayerNorm, Linear, Mlp, Params, DTYPE};
use crate::state::{MolState, Prediction};
use molprompt_core::{BondType, NUM_BOND_TYPES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub node_dim: usize,
    pub edge_dim: usize,
    /// Hidden width of the maps that read or write frame coordinates.
    pub pos_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub atom_types: usize,
    pub bond_types: usize,
    /// Initial scale of the per-layer position update.
    pub position_gain: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            node_dim: 256,
            edge_dim: 128,
            pos_dim: 64,
            layers: 5,
            heads: 8,
            time_dim: 32,
            atom_types: 9,
            bond_types: NUM_BOND_TYPES,
            position_gain: 0.1,
        }
    }
}

impl DenoiserConfig {
    /// Narrow settings for the toy corpus and tests.
    pub fn small(atom_types: usize) -> Self {
        DenoiserConfig {
            node_dim: 64,
            edge_dim: 32,
            pos_dim: 32,
            layers: 3,
            heads: 4,
            time_dim: 16,
            atom_types,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.node_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "need layers >= 1 and node_dim ({}) divisible by heads ({})",
                self.node_dim, self.heads
            )));
        }
        if self.time_dim < 2 || self.atom_types == 0 || self.bond_types == 0 {
            return Err(ModelError::Config("time_dim >= 2 and non-empty vocabularies required".into()));
        }
        Ok(())
    }
}

/// Padded batch of relaxed molecular states.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    /// `[B, N, a]`
    pub h: Tensor,
    /// `[B, N, N, b]`
    pub e: Tensor,
    /// `[B, N, 3]`
    pub p: Tensor,
    /// `[B, N, 1]`
    pub mask: Tensor,
    /// `[B, N, N, 1]`
    pub pair_mask: Tensor,
    /// `[B, 1, 1]`
    pub counts: Tensor,
    pub steps: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl GraphBatch {
    pub fn new(states: &[&MolState], steps: &[usize]) -> Result<GraphBatch> {
        if states.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if states.len() != steps.len() {
            return Err(ModelError::Config("one step per state required".into()));
        }
        let bsz = states.len();
        let nmax = states.iter().map(|s| s.n_atoms()).max().unwrap_or(0);
        let a = states[0].atoms.ncols();
        let b = states[0].bonds.ncols();
        let mut h = vec![0.0; bsz * nmax * a];
        let mut e = vec![0.0; bsz * nmax * nmax * b];
        let mut p = vec![0.0; bsz * nmax * 3];
        let mut mask = vec![0.0; bsz * nmax];
        let mut sizes = Vec::with_capacity(bsz);
        for (s, st) in states.iter().enumerate() {
            let n = st.n_atoms();
            if st.atoms.ncols() != a || st.bonds.ncols() != b {
                return Err(ModelError::Config("states disagree on vocabulary sizes".into()));
            }
            sizes.push(n);
            for i in 0..n {
                mask[s * nmax + i] = 1.0;
                for c in 0..a {
                    h[(s * nmax + i) * a + c] = st.atoms[(i, c)];
                }
                for c in 0..3 {
                    p[(s * nmax + i) * 3 + c] = st.pos[(i, c)];
                }
                for j in 0..n {
                    for c in 0..b {
                        e[((s * nmax + i) * nmax + j) * b + c] = st.bonds[(i * n + j, c)];
                    }
                }
            }
        }
        let dev = device();
        let h = Tensor::from_vec(h, (bsz, nmax, a), &dev)?;
        let e = Tensor::from_vec(e, (bsz, nmax, nmax, b), &dev)?;
        let p = Tensor::from_vec(p, (bsz, nmax, 3), &dev)?;
        Self::assemble(h, e, p, Tensor::from_vec(mask, (bsz, nmax, 1), &dev)?, steps.to_vec(), sizes)
    }

    /// A single unpadded molecule from (possibly variable) tensors shaped
    /// `[1, n, a]`, `[1, n, n, b]`, `[1, n, 3]`.
    pub fn single(h: Tensor, e: Tensor, p: Tensor, step: usize) -> Result<GraphBatch> {
        let n = p.dim(1)?;
        let mask = Tensor::ones((1, n, 1), DTYPE, &device())?;
        Self::assemble(h, e, p, mask, vec![step], vec![n])
    }

    fn assemble(h: Tensor, e: Tensor, p: Tensor, mask: Tensor, steps: Vec<usize>, sizes: Vec<usize>) -> Result<GraphBatch> {
        let pair_mask = mask.unsqueeze(2)?.broadcast_mul(&mask.unsqueeze(1)?)?;
        let counts = mask.sum_keepdim(1)?;
        Ok(GraphBatch { h, e, p, mask, pair_mask, counts, steps, sizes })
    }

    pub fn batch_size(&self) -> usize {
        self.sizes.len()
    }

    /// Mean position of the real atoms, `[B, 1, 3]`.
    pub fn centroid(&self) -> Result<Tensor> {
        Ok(self.p.broadcast_mul(&self.mask)?.sum_keepdim(1)?.broadcast_div(&self.counts)?)
    }

    pub fn centre(&self, p: &Tensor) -> Result<Tensor> {
        let com = p.broadcast_mul(&self.mask)?.sum_keepdim(1)?.broadcast_div(&self.counts)?;
        Ok(p.broadcast_sub(&com)?.broadcast_mul(&self.mask)?)
    }

    /// Mean over `j` of per-edge vectors `[B, N, N, 3]`, counting real atoms.
    fn edge_mean(&self, v: &Tensor) -> Result<Tensor> {
        Ok(v.sum(2)?.broadcast_div(&self.counts)?)
    }
}

struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    att_bias: Mlp,
    node_update: Mlp,
    node_norm: LayerNorm,
    edge_i: Linear,
    edge_j: Linear,
    edge_out: Linear,
    edge_norm: LayerNorm,
    pos_coeff: Mlp,
    pos_gain: Tensor,
    heads: usize,
}

/// Scalar edge geometry: coordinates of the current and of the input
/// positions of both endpoints in the current frames, zeroed on degenerate
/// edges. `[B, N, N, 12]`.
fn edge_geometry(frames: &FrameTensors, p: &Tensor, p0: &Tensor) -> Result<Tensor> {
    let parts = [
        frames.scalarize(p, true)?,
        frames.scalarize(p, false)?,
        frames.scalarize(p0, true)?,
        frames.scalarize(p0, false)?,
    ];
    Ok(Tensor::cat(&parts, D::Minus1)?.broadcast_mul(&frames.ok)?)
}

const GEOMETRY_DIM: usize = 12;

impl Layer {
    fn new(p: &mut Params, name: &str, cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<Layer> {
        let (dn, de, dp, h) = (cfg.node_dim, cfg.edge_dim, cfg.pos_dim, cfg.heads);
        Ok(Layer {
            q: Linear::no_bias(p, &format!("{name}.q"), dn, dn, 1.0, rng)?,
            k: Linear::no_bias(p, &format!("{name}.k"), dn, dn, 1.0, rng)?,
            v: Linear::no_bias(p, &format!("{name}.v"), dn, dn, 1.0, rng)?,
            att_bias: Mlp::new(p, &format!("{name}.att_bias"), GEOMETRY_DIM + de, dp, h, rng)?,
            node_update: Mlp::new(p, &format!("{name}.node_update"), dn, dn, dn, rng)?,
            node_norm: LayerNorm::new(p, &format!("{name}.node_norm"), dn, rng)?,
            edge_i: Linear::new(p, &format!("{name}.edge_i"), dn, de, rng)?,
            edge_j: Linear::no_bias(p, &format!("{name}.edge_j"), dn, de, 1.0, rng)?,
            edge_out: Linear::new(p, &format!("{name}.edge_out"), de, de, rng)?,
            edge_norm: LayerNorm::new(p, &format!("{name}.edge_norm"), de, rng)?,
            pos_coeff: Mlp::new(p, &format!("{name}.pos_coeff"), h + de + GEOMETRY_DIM, dp, 3, rng)?,
            pos_gain: p.create(&format!("{name}.pos_gain"), &[1], Init::Const(cfg.position_gain), rng)?,
            heads: h,
        })
    }

    fn forward(&self, batch: &GraphBatch, a: &Tensor, w: &Tensor, p: &Tensor, p0: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (bsz, n, dn) = a.dims3()?;
        let dh = dn / self.heads;
        let frames = frame_tensors(p, &batch.pair_mask)?;
        let geo = edge_geometry(&frames, p, p0)?;

        let split = |x: Tensor| -> Result<Tensor> {
            Ok(x.reshape((bsz, n, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(a)?)?;
        let k = split(self.k.forward(a)?)?;
        let v = split(self.v.forward(a)?)?;
        let bias = self
            .att_bias
            .forward(&Tensor::cat(&[&geo, w], D::Minus1)?)?
            .permute((0, 3, 1, 2))?;
        let key_mask = batch.mask.squeeze(2)?.affine(1e9, -1e9)?.reshape((bsz, 1, 1, n))?;
        let logits = q
            .matmul(&k.transpose(2, 3)?.contiguous()?)?
            .affine(1.0 / (dh as f64).sqrt(), 0.0)?
            .add(&bias)?
            .broadcast_add(&key_mask)?;
        let alpha = softmax(&logits, 3)?;
        let dx = alpha.matmul(&v)?.transpose(1, 2)?.reshape((bsz, n, dn))?;

        let a_new = self.node_norm.forward(&a.add(&self.node_update.forward(&dx)?)?)?;
        let ew = self
            .edge_i
            .forward(&dx)?
            .unsqueeze(2)?
            .broadcast_add(&self.edge_j.forward(&dx)?.unsqueeze(1)?)?
            .silu()?;
        let w_new = self.edge_norm.forward(&w.add(&self.edge_out.forward(&ew)?)?)?;

        let alpha_e = alpha.permute((0, 2, 3, 1))?;
        let coeff = self
            .pos_coeff
            .forward(&Tensor::cat(&[&alpha_e, &w_new, &geo], D::Minus1)?)?
            .broadcast_mul(&frames.ok)?;
        let dp = batch.edge_mean(&frames.tensorize(&coeff)?)?.broadcast_mul(&batch.mask)?;
        // E3 normalization of the update: unit RMS over real atoms times a
        // learned gain. A zero update stays exactly zero.
        let ms = dp.sqr()?.sum_keepdim(2)?.sum_keepdim(1)?.broadcast_div(&batch.counts)?;
        let dp = dp.broadcast_div(&(ms + 1e-6)?.sqrt()?)?.broadcast_mul(&self.pos_gain)?;
        let p_new = batch.centre(&p.add(&dp)?)?;
        Ok((a_new, w_new, p_new))
    }
}

/// Node features read off the (noisy) bond rows: bond count and bond order
/// sum, both divided by 4.
const GRAPH_FEATURES: usize = 2;

fn graph_features(e: &Tensor) -> Result<Tensor> {
    let b = e.dim(3)?;
    let weights = |f: fn(BondType) -> f64| -> Result<Tensor> {
        let w: Vec<f64> = (0..b).map(|k| BondType::from_index(k).map_or(0.0, f) / 4.0).collect();
        Ok(Tensor::from_vec(w, (b, 1), e.device())?)
    };
    let per_pair = |w: Tensor| -> Result<Tensor> {
        let (bsz, n, _, _) = e.dims4()?;
        Ok(e.reshape((bsz * n * n, b))?.matmul(&w)?.reshape((bsz, n, n))?.sum(2)?.unsqueeze(2)?)
    };
    let degree = per_pair(weights(|t| if t.is_bond() { 1.0 } else { 0.0 })?)?;
    let valence = per_pair(weights(BondType::order)?)?;
    Ok(Tensor::cat(&[&degree, &valence], D::Minus1)?)
}

/// Hidden state after the attention stack.
pub struct Latent {
    pub a: Tensor,
    pub w: Tensor,
    pub p: Tensor,
    pub p0: Tensor,
    pub com: Tensor,
}

/// Embedding plus the stack of equivariant attention layers, shared by the
/// denoiser and the alignment molecule encoder.
pub struct GraphTransformer {
    cfg: DenoiserConfig,
    atom_in: Linear,
    time_in: Linear,
    bond_in: Linear,
    layers: Vec<Layer>,
}

impl GraphTransformer {
    pub fn new(p: &mut Params, name: &str, cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(GraphTransformer {
            cfg: cfg.clone(),
            atom_in: Linear::new(p, &format!("{name}.atom_in"), cfg.atom_types + GRAPH_FEATURES, cfg.node_dim, rng)?,
            time_in: Linear::no_bias(p, &format!("{name}.time_in"), cfg.time_dim, cfg.node_dim, 1.0, rng)?,
            bond_in: Linear::new(p, &format!("{name}.bond_in"), cfg.bond_types, cfg.edge_dim, rng)?,
            layers: (0..cfg.layers)
                .map(|l| Layer::new(p, &format!("{name}.layer{l}"), cfg, rng))
                .collect::<Result<_>>()?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn forward(&self, batch: &GraphBatch) -> Result<Latent> {
        let com = batch.centroid()?;
        let p0 = batch.centre(&batch.p)?;
        let temb = self.time_in.forward(&step_embedding(&batch.steps, self.cfg.time_dim)?)?.unsqueeze(1)?;
        let h = Tensor::cat(&[&batch.h, &graph_features(&batch.e)?], D::Minus1)?;
        let mut a = self.atom_in.forward(&h)?.broadcast_add(&temb)?;
        let mut w = self.bond_in.forward(&batch.e)?;
        let mut p = p0.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let (na, nw, np) = layer.forward(batch, &a, &w, &p, &p0)?;
            ensure_finite(&na, &format!("layer {l} node features"))?;
            ensure_finite(&np, &format!("layer {l} positions"))?;
            (a, w, p) = (na, nw, np);
        }
        Ok(Latent { a, w, p, p0, com })
    }
}

/// Raw network outputs on a padded batch.
pub struct DenoiserOutput {
    /// `[B, N, 3]`, in the input coordinate frame.
    pub pos0: Tensor,
    /// `[B, N, a]`
    pub atom_logits: Tensor,
    /// `[B, N, N, b]`, symmetric in the two atom axes.
    pub bond_logits: Tensor,
}

pub struct Denoiser {
    pub params: Params,
    trunk: GraphTransformer,
    atom_head: Mlp,
    edge_head: Mlp,
    pos_head: Mlp,
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, seed: u64) -> Result<Denoiser> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let trunk = GraphTransformer::new(&mut p, "trunk", cfg, &mut rng)?;
        let pair_in = cfg.edge_dim + cfg.node_dim + GEOMETRY_DIM;
        let atom_head = Mlp::new(&mut p, "atom_head", cfg.node_dim, cfg.node_dim, cfg.atom_types, &mut rng)?;
        let edge_head = Mlp::new(&mut p, "edge_head", pair_in, cfg.edge_dim, cfg.bond_types, &mut rng)?;
        let pos_head = Mlp::new(&mut p, "pos_head", pair_in, cfg.pos_dim, 3, &mut rng)?;
        Ok(Denoiser { params: p, trunk, atom_head, edge_head, pos_head })
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.trunk.config()
    }

    pub fn forward(&self, batch: &GraphBatch) -> Result<DenoiserOutput> {
        let lat = self.trunk.forward(batch)?;
        let frames0 = frame_tensors(&lat.p0, &batch.pair_mask)?;
        let geo = edge_geometry(&frames0, &lat.p, &lat.p0)?;
        let pair_nodes = lat.a.unsqueeze(2)?.broadcast_add(&lat.a.unsqueeze(1)?)?;
        let h = Tensor::cat(&[&lat.w, &pair_nodes, &geo], D::Minus1)?;

        let atom_logits = self.atom_head.forward(&lat.a)?;
        let raw = self.edge_head.forward(&h)?;
        let bond_logits = raw.add(&raw.transpose(1, 2)?)?.affine(0.5, 0.0)?;
        let coeff = self.pos_head.forward(&h)?.broadcast_mul(&frames0.ok)?;
        let shift = batch.edge_mean(&frames0.tensorize(&coeff)?)?;
        let pos0 = batch.centre(&lat.p0.add(&shift)?)?.broadcast_add(&lat.com)?.broadcast_mul(&batch.mask)?;
        ensure_finite(&pos0, "predicted positions")?;
        Ok(DenoiserOutput { pos0, atom_logits, bond_logits })
    }

    /// Per-state predictions with padding removed and categorical rows
    /// turned into probabilities.
    pub fn predict(&self, states: &[&MolState], steps: &[usize]) -> Result<Vec<Prediction>> {
        let batch = GraphBatch::new(states, steps)?;
        let out = self.forward(&batch)?;
        let pos = out.pos0.to_vec3::<f64>()?;
        let atoms = softmax(&out.atom_logits, 2)?.to_vec3::<f64>()?;
        let bonds = softmax(&out.bond_logits, 3)?;
        let (bsz, nmax, _, b) = bonds.dims4()?;
        let bonds = bonds.reshape((bsz, nmax * nmax, b))?.to_vec3::<f64>()?;
        let a = self.config().atom_types;
        Ok(batch
            .sizes
            .iter()
            .enumerate()
            .map(|(s, &n)| Prediction {
                pos0: nalgebra::DMatrix::from_fn(n, 3, |i, c| pos[s][i][c]),
                atom_probs: nalgebra::DMatrix::from_fn(n, a, |i, c| atoms[s][i][c]),
                bond_probs: nalgebra::DMatrix::from_fn(n * n, b, |r, c| bonds[s][(r / n) * nmax + r % n][c]),
            })
            .collect())
    }
}
