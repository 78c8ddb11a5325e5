//! Style-based generator: latent codes, noise, checkpoints and synthesis.

mod generator;
mod latent;

pub use generator::{
    auto_alpha, code_vars, map_latent, map_latents, mapping_forward, mean_latent, noise_vars, sample_noise,
    sample_w, sample_z, synthesis_forward, synthesize, synthesize_batch, truncate, GeneratorArch,
    GeneratorCheckpoint, NoiseStack, Provenance, MAPPING_LR_MUL,
};
pub use latent::{LatentCode, LatentSpace, COLLAPSE_TOL};
