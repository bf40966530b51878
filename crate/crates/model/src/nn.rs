//! Parameter storage and the small building blocks shared by the networks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ModelError, Result};

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled { fan_in: usize, gain: f64 },
    Const(f64),
}

/// Named trainable parameters, initialized from a seeded stream so that
/// two stores built with the same seed are identical.
#[derive(Debug, Clone)]
pub struct Params {
    vars: BTreeMap<String, Var>,
}

impl Params {
    pub fn new() -> Self {
        Params { vars: BTreeMap::new() }
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(ModelError::Config(format!("duplicate parameter `{name}`")));
        }
        let count: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Scaled { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                (0..count).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
            }
            Init::Const(c) => vec![c; count],
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Sets every parameter whose name passes `filter` to zero.
    pub fn zero_where(&self, filter: impl Fn(&str) -> bool) -> Result<()> {
        for (name, var) in &self.vars {
            if filter(name) {
                var.set(&var.zeros_like()?)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map: HashMap<String, Tensor> =
            self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every parameter from a safetensors archive; names and
    /// shapes must match exactly.
    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let map = candle_core::safetensors::load(path, &device())?;
        if map.len() != self.vars.len() {
            return Err(ModelError::Checkpoint(format!(
                "archive holds {} arrays, model expects {}",
                map.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = map
                .get(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing array `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(ModelError::Checkpoint(format!(
                    "array `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DTYPE)?)?;
        }
        Ok(())
    }
}

impl Default for Params {
    fn default() -> Self {
        Params::new()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    out: usize,
}

impl Linear {
    pub fn new(p: &mut Params, name: &str, input: usize, out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = p.create(&format!("{name}.weight"), &[input, out], Init::Scaled { fan_in: input, gain: 1.0 }, rng)?;
        let bias = p.create(&format!("{name}.bias"), &[out], Init::Const(0.0), rng)?;
        Ok(Linear { weight, bias: Some(bias), out })
    }

    pub fn no_bias(p: &mut Params, name: &str, input: usize, out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = p.create(&format!("{name}.weight"), &[input, out], Init::Scaled { fan_in: input, gain }, rng)?;
        Ok(Linear { weight, bias: None, out })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / last.max(1);
        let mut y = x.reshape((rows, last))?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out;
        Ok(y.reshape(out_dims)?)
    }
}

/// Two-layer perceptron with a SiLU hidden activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    a: Linear,
    b: Linear,
}

impl Mlp {
    pub fn new(p: &mut Params, name: &str, input: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Mlp {
            a: Linear::new(p, &format!("{name}.0"), input, hidden, rng)?,
            b: Linear::new(p, &format!("{name}.1"), hidden, out, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.b.forward(&self.a.forward(x)?.silu()?)
    }
}

/// Layer normalization over the last dimension with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    shift: Tensor,
}

impl LayerNorm {
    pub fn new(p: &mut Params, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(LayerNorm {
            gain: p.create(&format!("{name}.gain"), &[dim], Init::Const(1.0), rng)?,
            shift: p.create(&format!("{name}.shift"), &[dim], Init::Const(0.0), rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

/// Softmax over `dim` with the maximum subtracted (as a constant) first.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Sinusoidal embedding of integer steps, shape `[len(steps), dim]`.
pub fn step_embedding(steps: &[usize], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        for k in 0..dim {
            let freq = (-(10_000f64).ln() * (k % half) as f64 / half as f64).exp();
            let x = t as f64 * freq;
            data.push(if k < half { x.sin() } else { x.cos() });
        }
    }
    Ok(Tensor::from_vec(data, (steps.len(), dim), &device())?)
}

pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let bad = t.flatten_all()?.to_vec1::<f64>()?.iter().any(|x| !x.is_finite());
    if bad {
        return Err(ModelError::NonFinite(what.to_string()));
    }
    Ok(())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_vec1::<f64>()?[0])
}
