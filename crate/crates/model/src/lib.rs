//! Neural components: the equivariant graph transformer, diffusion
//! training and sampling, the molecule/text alignment model and guided
//! optimization.

pub mod align;
pub mod denoiser;
pub mod error;
pub mod frames;
pub mod guidance;
pub mod nn;
pub mod sampler;
pub mod state;
pub mod trainer;

pub use denoiser::{Denoiser, DenoiserConfig, GraphBatch, GraphTransformer};
pub use error::{ModelError, Result};
pub use state::{MolState, Prediction};

/// Anything that maps noisy states at given steps to clean-state estimates.
pub trait Denoise: Sync {
    fn predict(&self, states: &[&MolState], steps: &[usize]) -> Result<Vec<Prediction>>;
}

impl Denoise for Denoiser {
    fn predict(&self, states: &[&MolState], steps: &[usize]) -> Result<Vec<Prediction>> {
        Denoiser::predict(self, states, steps)
    }
}
