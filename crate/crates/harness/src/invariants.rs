//! Training-free invariant suite on a small randomly initialized generator:
//! latent interpolation, W/W+ broadcast, loss identities, edit algebra,
//! analytic-vs-numeric gradients and checkpoint round trips.

use pti_core::datagen::{FactorRegressor, IdentityEmbedder};
use pti_core::editing::{apply_edit, DirectionMeta, DirectionMethod, EditDirection};
use pti_core::gan::{sample_noise, sample_w, synthesize, GeneratorArch, GeneratorCheckpoint, LatentCode};
use pti_core::metrics::{ms_ssim_distortion, mse};
use pti_core::perceptual::{noise_regularization, noise_regularization_grad, PerceptualBackbone};
use pti_core::pivotal::{interpolate_latent, Alpha, PivotSet, PivotTarget, TuningConfig, TuningObjective};
use pti_core::seed;
use pti_tensor::ParamStore;
use rand::Rng;

use crate::error::{HarnessError, Result};

pub const GRADIENT_TOL: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// A 32px generator small enough to evaluate in milliseconds, with non-zero
/// noise gains so noise inputs matter.
pub fn tiny_generator(seed: u64) -> GeneratorCheckpoint {
    let mut arch = GeneratorArch::new(32, 8).expect("32px is supported");
    arch.channels = vec![6, 6, 4, 4];
    let mut c = GeneratorCheckpoint::init(arch, seed);
    for (n, t) in c.synthesis.iter_mut() {
        if n.ends_with("noise_gain") {
            t.data_mut()[0] = 0.3;
        }
    }
    c
}

struct Fixture {
    gen: GeneratorCheckpoint,
    backbone: PerceptualBackbone,
    embedder: IdentityEmbedder,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let gen = tiny_generator(seed);
    let ws = sample_w(seed, 0, 16, &gen)?;
    let images = ws
        .iter()
        .enumerate()
        .map(|(i, w)| synthesize(w, &sample_noise(seed::derive(seed, i as u64), &gen), 1.0, &gen))
        .collect::<pti_core::Result<Vec<_>>>()?;
    let refs: Vec<_> = images.iter().collect();
    let backbone = PerceptualBackbone::from_regressor(&FactorRegressor::untrained(32, seed), &refs)?;
    Ok(Fixture {
        gen,
        backbone,
        embedder: IdentityEmbedder::untrained(32, 8, seed),
    })
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

fn interpolation_norm(seed: u64) -> Result<Check> {
    let mut rng = seed::rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let d = rng.gen_range(2..96);
        let p: Vec<f32> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z: Vec<f32> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let alpha = 10f64.powf(rng.gen_range(-2.0..1.0));
        let r = interpolate_latent(&LatentCode::w(p.clone())?, &LatentCode::w(z)?, alpha)?;
        let err = (l2(r.values(), &p) - alpha).abs() / alpha.max(1.0);
        worst = worst.max(err);
    }
    Ok(check(
        "interpolation norm identity",
        worst <= 1e-6,
        format!("max |‖w_r − w_p‖ − α| / max(α, 1) = {worst:.2e}"),
    ))
}

fn broadcast(f: &Fixture, seed: u64) -> Result<Check> {
    let layers = f.gen.num_layers();
    let mut equal = true;
    for (i, w) in sample_w(seed, 100, 8, &f.gen)?.iter().enumerate() {
        let noise = sample_noise(seed::derive(seed, 1000 + i as u64), &f.gen);
        let a = synthesize(w, &noise, 1.0, &f.gen)?;
        let b = synthesize(&w.to_wplus(layers)?, &noise, 1.0, &f.gen)?;
        equal &= a.pixels().iter().zip(b.pixels()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    Ok(check("W/W+ broadcast", equal, "8 codes rendered as W and broadcast W+".into()))
}

fn distortion_zero(f: &Fixture, seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for (i, w) in sample_w(seed, 200, 8, &f.gen)?.iter().enumerate() {
        let x = synthesize(w, &sample_noise(seed::derive(seed, 2000 + i as u64), &f.gen), 1.0, &f.gen)?;
        let y = x.clone();
        for v in [
            mse(&x, &y)?,
            f.backbone.distance(&x, &y)?,
            ms_ssim_distortion(&x, &y)?,
            1.0 - f.embedder.similarity(&x, &y),
        ] {
            worst = worst.max(v.abs());
        }
    }
    Ok(check(
        "distortion zero on identical pairs",
        worst <= 1e-6,
        format!("largest metric on identical pairs {worst:.2e}"),
    ))
}

fn tuning_setup(f: &Fixture, seed: u64) -> Result<(PivotSet, TuningConfig)> {
    let w = sample_w(seed, 300, 1, &f.gen)?.remove(0);
    let noise = sample_noise(seed::derive(seed, 3000), &f.gen);
    let other = sample_w(seed, 301, 1, &f.gen)?.remove(0);
    let target = synthesize(&other, &noise, 1.0, &f.gen)?;
    let set = PivotSet::single(PivotTarget { pivot: w, noise, target }, &f.gen)?;
    let cfg = TuningConfig {
        alpha: Alpha::Absolute(1.0),
        seed,
        ..TuningConfig::default()
    };
    Ok((set, cfg))
}

fn regularizer_zero(f: &Fixture, seed: u64) -> Result<Check> {
    let (set, cfg) = tuning_setup(f, seed)?;
    let obj = TuningObjective::new(&f.gen, &set, &f.backbone, &cfg)?;
    let pivots: Vec<LatentCode> = set.items().iter().map(|t| t.pivot.clone()).collect();
    let mut worst = 0.0f64;
    for step in 0..4 {
        let v = obj.value(&f.gen.synthesis, &pivots, step)?;
        worst = worst.max(v.reg.map_or(f64::INFINITY, f64::abs));
    }
    Ok(check(
        "locality term zero at the original weights",
        worst == 0.0,
        format!("largest regularization term {worst:.2e}"),
    ))
}

fn edit_algebra(seed: u64) -> Result<Check> {
    let mut rng = seed::rng(seed ^ 0xed17);
    let (mut inv, mut lin) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let d = rng.gen_range(2..64);
        let w: Vec<f32> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dir = EditDirection::new(&v, None, DirectionMethod::Pca, DirectionMeta::default())?;
        let code = LatentCode::w(w.clone())?;
        let (a, b): (f64, f64) = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
        let back = apply_edit(&apply_edit(&code, &dir, a, None)?, &dir, -a, None)?;
        let scale = |x: &[f32]| x.iter().fold(1.0f64, |m, v| m.max(v.abs() as f64)) + a.abs() + b.abs();
        inv = inv.max(l2(back.values(), &w) / scale(&w));
        let two = apply_edit(&apply_edit(&code, &dir, a, None)?, &dir, b, None)?;
        let one = apply_edit(&code, &dir, a + b, None)?;
        lin = lin.max(l2(two.values(), one.values()) / scale(&w));
    }
    Ok(check(
        "edit linearity and inverse",
        inv <= 1e-6 && lin <= 1e-6,
        format!("inverse error {inv:.2e}, linearity error {lin:.2e} (relative to code magnitude)"),
    ))
}

/// Central difference of the tuning objective along the normalized gradient,
/// compared with the gradient norm.
fn tuning_gradient(f: &Fixture, seed: u64) -> Result<Check> {
    let (set, cfg) = tuning_setup(f, seed)?;
    let obj = TuningObjective::new(&f.gen, &set, &f.backbone, &cfg)?;
    let pivots: Vec<LatentCode> = set.items().iter().map(|t| t.pivot.clone()).collect();
    let theta = f.gen.synthesis.clone();
    let (v0, grads) = obj.gradients(&theta, &pivots, 0)?;
    let gnorm = grads.iter().map(|(_, t)| t.sq_norm()).sum::<f64>().sqrt();
    if !(gnorm > 0.0) {
        return Err(HarnessError::Config("tuning gradient vanished".into()));
    }
    let eps = 1e-3 * v0.total.abs().max(1e-3) / gnorm;
    let shifted = |sign: f64| -> Result<f64> {
        let mut p: ParamStore = theta.clone();
        for (n, t) in p.iter_mut() {
            t.axpy((sign * eps / gnorm) as f32, grads.tensor(n));
        }
        Ok(obj.value(&p, &pivots, 0)?.total)
    };
    let fd = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * eps);
    let rel = (fd - gnorm).abs() / gnorm;
    Ok(check(
        "tuning gradient vs finite differences",
        rel <= GRADIENT_TOL,
        format!("directional derivative {fd:.6e} vs gradient norm {gnorm:.6e} (relative {rel:.2e})"),
    ))
}

fn noise_gradient(f: &Fixture, seed: u64) -> Result<Check> {
    let noise = sample_noise(seed::derive(seed, 4000), &f.gen);
    let (_, grads) = noise_regularization_grad(&noise);
    let h = 1e-3f32;
    let mut rng = seed::rng(seed ^ 0x401);
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for _ in 0..64 {
        let l = rng.gen_range(0..noise.len());
        let i = rng.gen_range(0..noise.maps()[l].numel());
        let mut p = noise.clone();
        p.maps_mut()[l].data_mut()[i] += h;
        let mut m = noise.clone();
        m.maps_mut()[l].data_mut()[i] -= h;
        let fd = (noise_regularization(&p) - noise_regularization(&m)) / (2.0 * h as f64);
        let a = grads[l].data()[i] as f64;
        num += (a - fd).powi(2);
        den += fd.powi(2);
    }
    let rel = (num / den).sqrt();
    Ok(check(
        "noise regularizer gradient vs finite differences",
        rel <= GRADIENT_TOL,
        format!("relative error {rel:.2e} over 64 coordinates"),
    ))
}

fn checkpoint_round_trip(f: &Fixture) -> Result<Check> {
    let dir = std::env::temp_dir().join(format!("pti-invariants-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let (a, b) = (dir.join("a.ckpt"), dir.join("b.ckpt"));
    f.gen.save(&a)?;
    GeneratorCheckpoint::load(&a)?.save(&b)?;
    let first = std::fs::read(&a).map_err(|e| HarnessError::io(&a, e))?;
    let second = std::fs::read(&b).map_err(|e| HarnessError::io(&b, e))?;
    let (c, d) = (dir.join("c.ckpt"), dir.join("d.ckpt"));
    f.backbone.save(&c)?;
    PerceptualBackbone::load(&c)?.save(&d)?;
    let third = std::fs::read(&c).map_err(|e| HarnessError::io(&c, e))?;
    let fourth = std::fs::read(&d).map_err(|e| HarnessError::io(&d, e))?;
    std::fs::remove_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    Ok(check(
        "checkpoint round trip",
        first == second && third == fourth,
        format!("generator {} bytes, backbone {} bytes", first.len(), third.len()),
    ))
}

/// Runs every check. Errors are reported as failed checks.
pub fn run(seed: u64) -> Vec<Check> {
    let f = match fixture(seed) {
        Ok(f) => f,
        Err(e) => return vec![check("fixture", false, e.to_string())],
    };
    let results: Vec<(&'static str, Result<Check>)> = vec![
        ("interpolation norm identity", interpolation_norm(seed)),
        ("W/W+ broadcast", broadcast(&f, seed)),
        ("distortion zero on identical pairs", distortion_zero(&f, seed)),
        ("locality term zero at the original weights", regularizer_zero(&f, seed)),
        ("edit linearity and inverse", edit_algebra(seed)),
        ("tuning gradient vs finite differences", tuning_gradient(&f, seed)),
        ("noise regularizer gradient vs finite differences", noise_gradient(&f, seed)),
        ("checkpoint round trip", checkpoint_round_trip(&f)),
    ];
    results
        .into_iter()
        .map(|(name, r)| r.unwrap_or_else(|e| check(name, false, e.to_string())))
        .collect()
}
