#![allow(dead_code)]

use pti_core::datagen::FactorRegressor;
use pti_core::gan::{mean_latent, sample_noise, sample_w, synthesize, GeneratorArch, GeneratorCheckpoint};
use pti_core::perceptual::PerceptualBackbone;
use pti_core::ImageTensor;

/// Small 32px generator with active noise inputs and a mean latent.
pub fn tiny_generator(seed: u64) -> GeneratorCheckpoint {
    let mut arch = GeneratorArch::new(32, 8).unwrap();
    arch.channels = vec![6, 6, 4, 4];
    let mut c = GeneratorCheckpoint::init(arch, seed);
    for (n, t) in c.synthesis.iter_mut() {
        if n.ends_with("noise_gain") {
            t.data_mut()[0] = 0.3;
        }
    }
    c.mean_latent = Some(mean_latent(256, seed, &c).unwrap().values().to_vec());
    c.alpha_auto = Some(1.0);
    c
}

pub fn render(gen: &GeneratorCheckpoint, index: u64) -> ImageTensor {
    let w = sample_w(99, index, 1, gen).unwrap().remove(0);
    synthesize(&w, &sample_noise(1000 + index, gen), 1.0, gen).unwrap()
}

pub fn backbone(gen: &GeneratorCheckpoint) -> PerceptualBackbone {
    let images: Vec<ImageTensor> = (0..8).map(|i| render(gen, i)).collect();
    let refs: Vec<&ImageTensor> = images.iter().collect();
    PerceptualBackbone::from_regressor(&FactorRegressor::untrained(32, 5), &refs).unwrap()
}
