//! StyleGAN-lite: mapping MLP plus a modulated/demodulated synthesis network
//! with per-layer noise and skip-connected RGB outputs.
//!
//! Style-consuming layers: one 3×3 conv at 4×4, then two per up-sampling
//! block (the first operates on the bilinearly up-sampled map). The RGB head
//! of each resolution reuses the style row of that resolution's last conv, so
//! `L = 1 + 2 · blocks` (7 at 32×32, 9 at 64×64). Every conv layer owns one
//! noise map at its resolution.

use std::path::Path;

use pti_tensor::{Bound, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::latent::{LatentCode, LatentSpace};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn;
use crate::seed;

pub const MAPPING_LR_MUL: f32 = 0.01;
const DEMOD_EPS: f32 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub resolution: usize,
    pub latent_dim: usize,
    pub mapping_layers: usize,
    /// Feature channels at 4×4, 8×8, …, resolution.
    pub channels: Vec<usize>,
}

impl GeneratorArch {
    pub fn new(resolution: usize, latent_dim: usize) -> Result<Self> {
        let table = [(4, 64), (8, 64), (16, 48), (32, 32), (64, 24)];
        if !resolution.is_power_of_two() || !(8..=64).contains(&resolution) {
            return Err(Error::InvalidParameter(format!(
                "generator resolution {resolution} must be a power of two in [8, 64]"
            )));
        }
        let channels = table
            .iter()
            .filter(|(r, _)| *r <= resolution)
            .map(|&(_, c)| c)
            .collect();
        Ok(Self {
            resolution,
            latent_dim,
            mapping_layers: 3,
            channels,
        })
    }

    /// Number of up-sampling blocks after the 4×4 base.
    pub fn blocks(&self) -> usize {
        self.channels.len() - 1
    }

    /// Number of style-consuming layers (and noise maps), `L`.
    pub fn num_layers(&self) -> usize {
        1 + 2 * self.blocks()
    }

    pub fn layer_resolution(&self, layer: usize) -> usize {
        4 << layer.div_ceil(2)
    }

    fn layer_channels(&self, layer: usize) -> (usize, usize) {
        if layer == 0 {
            return (self.channels[0], self.channels[0]);
        }
        let level = layer.div_ceil(2);
        if layer % 2 == 1 {
            (self.channels[level - 1], self.channels[level])
        } else {
            (self.channels[level], self.channels[level])
        }
    }

    /// Style layer whose row drives the RGB head at `level`.
    fn rgb_layer(level: usize) -> usize {
        2 * level
    }

    pub fn init_mapping<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        for i in 0..self.mapping_layers {
            nn::init_linear(&mut p, &format!("fc{i}"), self.latent_dim, self.latent_dim, MAPPING_LR_MUL, 0.0, rng);
        }
        p
    }

    pub fn init_synthesis<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let d = self.latent_dim;
        let mut p = ParamStore::new();
        p.insert("const", Tensor::randn(&[1, self.channels[0], 4, 4], rng));
        for l in 0..self.num_layers() {
            let (cin, cout) = self.layer_channels(l);
            nn::init_linear(&mut p, &format!("l{l}.affine"), d, cin, 1.0, 1.0, rng);
            nn::init_conv(&mut p, &format!("l{l}"), cin, cout, 3, rng);
            p.insert(format!("l{l}.noise_gain"), Tensor::zeros(&[1]));
        }
        for (level, &c) in self.channels.iter().enumerate() {
            nn::init_linear(&mut p, &format!("rgb{level}.affine"), d, c, 1.0, 1.0, rng);
            nn::init_conv(&mut p, &format!("rgb{level}"), c, 3, 1, rng);
        }
        p
    }

    pub fn noise_shapes(&self) -> Vec<[usize; 4]> {
        (0..self.num_layers())
            .map(|l| {
                let r = self.layer_resolution(l);
                [1, 1, r, r]
            })
            .collect()
    }
}

/// Forward pass of the mapping network on `z[N, D]`.
pub fn mapping_forward(g: &mut Graph, arch: &GeneratorArch, p: &Bound, z: Var) -> Var {
    let mut h = g.pixel_norm(z);
    for i in 0..arch.mapping_layers {
        h = nn::linear(g, p, &format!("fc{i}"), h, MAPPING_LR_MUL);
        h = nn::lrelu(g, h);
    }
    h
}

fn modulated_conv(g: &mut Graph, p: &Bound, name: &str, x: Var, w: Var, demodulate: bool) -> Var {
    let style = nn::linear(g, p, &format!("{name}.affine"), w, 1.0);
    let weight = nn::scaled_weight(g, p, name, 1.0);
    let xm = g.mul_channels(x, style);
    let y = g.conv2d(xm, weight);
    if demodulate {
        let d = g.demod(weight, style, DEMOD_EPS);
        g.mul_channels(y, d)
    } else {
        y
    }
}

fn style_layer(g: &mut Graph, p: &Bound, l: usize, x: Var, w: Var, noise: Var) -> Var {
    let name = format!("l{l}");
    let y = modulated_conv(g, p, &name, x, w, true);
    let y = g.add_noise(y, noise, p.var(&format!("{name}.noise_gain")));
    let y = g.add_bias(y, p.var(&format!("{name}.bias")));
    nn::lrelu(g, y)
}

fn to_rgb(g: &mut Graph, p: &Bound, level: usize, x: Var, w: Var) -> Var {
    let name = format!("rgb{level}");
    let y = modulated_conv(g, p, &name, x, w, false);
    g.add_bias(y, p.var(&format!("{name}.bias")))
}

/// Synthesis forward. `ws[l]` is the `[N, D]` style input of layer `l`,
/// `noise[l]` a `[N or 1, 1, r, r]` map. Returns `[N, 3, R, R]` in `[0, 1]`.
pub fn synthesis_forward(g: &mut Graph, arch: &GeneratorArch, p: &Bound, ws: &[Var], noise: &[Var]) -> Var {
    assert_eq!(ws.len(), arch.num_layers(), "style count mismatch");
    assert_eq!(noise.len(), arch.num_layers(), "noise count mismatch");
    let n = g.shape(ws[0])[0];
    let c = p.var("const");
    let mut x = if n == 1 { c } else { g.broadcast_batch(c, n) };
    x = style_layer(g, p, 0, x, ws[0], noise[0]);
    let mut rgb = to_rgb(g, p, 0, x, ws[GeneratorArch::rgb_layer(0)]);
    for level in 1..=arch.blocks() {
        let (l0, l1) = (2 * level - 1, 2 * level);
        let up = g.upsample2x(x);
        x = style_layer(g, p, l0, up, ws[l0], noise[l0]);
        x = style_layer(g, p, l1, x, ws[l1], noise[l1]);
        let y = to_rgb(g, p, level, x, ws[GeneratorArch::rgb_layer(level)]);
        let rgb_up = g.upsample2x(rgb);
        rgb = g.add(rgb_up, y);
    }
    let t = g.tanh(rgb);
    let t = g.scale(t, 0.5);
    g.add_scalar(t, 0.5)
}

/// Per-layer noise maps, each `[1, 1, r, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseStack {
    maps: Vec<Tensor>,
}

impl NoiseStack {
    pub fn new(maps: Vec<Tensor>) -> Self {
        Self { maps }
    }

    pub fn zeros(arch: &GeneratorArch) -> Self {
        Self {
            maps: arch.noise_shapes().iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// I.i.d. standard-normal maps; map `l` is drawn from stream `(seed, l)`.
    pub fn sample(seed: u64, arch: &GeneratorArch) -> Self {
        let maps = arch
            .noise_shapes()
            .iter()
            .enumerate()
            .map(|(l, s)| Tensor::randn(s, &mut seed::item_rng(seed, "noise", l as u64)))
            .collect();
        Self { maps }
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn maps_mut(&mut self) -> &mut [Tensor] {
        &mut self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn validate(&self, arch: &GeneratorArch) -> Result<()> {
        let shapes = arch.noise_shapes();
        if self.maps.len() != shapes.len() || self.maps.iter().zip(&shapes).any(|(m, s)| m.shape() != s) {
            return Err(Error::ShapeMismatch(format!(
                "noise stack does not match a {}-layer generator",
                shapes.len()
            )));
        }
        if !self.maps.iter().all(Tensor::is_finite) {
            return Err(Error::InvalidParameter("noise stack has non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_store(&self) -> ParamStore {
        self.maps
            .iter()
            .enumerate()
            .map(|(l, m)| (format!("{l:02}"), m.clone()))
            .collect()
    }

    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            maps: store.iter().map(|(_, t)| t.clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Pretrained,
    Tuned,
    AblationVariant,
}

impl Provenance {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Pretrained => "pretrained",
            Self::Tuned => "tuned",
            Self::AblationVariant => "ablation-variant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(Self::Pretrained),
            "tuned" => Ok(Self::Tuned),
            "ablation-variant" => Ok(Self::AblationVariant),
            _ => Err(Error::Format(format!("unknown generator provenance `{s}`"))),
        }
    }
}

/// Mapping and synthesis weights plus the metadata needed to use them.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorCheckpoint {
    pub arch: GeneratorArch,
    pub mapping: ParamStore,
    pub synthesis: ParamStore,
    pub rng_seed: u64,
    pub provenance: Provenance,
    pub mean_latent: Option<Vec<f32>>,
    /// Default locality-regularization radius for this generator's W scale.
    pub alpha_auto: Option<f64>,
    /// Free-form run information (training steps, parent checkpoint, …).
    pub info: serde_json::Value,
}

const KIND: &str = "generator";

impl GeneratorCheckpoint {
    pub fn init(arch: GeneratorArch, seed: u64) -> Self {
        let mut rng = seed::item_rng(seed, "generator-init", 0);
        let mapping = arch.init_mapping(&mut rng);
        let synthesis = arch.init_synthesis(&mut rng);
        Self {
            arch,
            mapping,
            synthesis,
            rng_seed: seed,
            provenance: Provenance::Pretrained,
            mean_latent: None,
            alpha_auto: None,
            info: serde_json::json!({}),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.arch.num_layers()
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn resolution(&self) -> usize {
        self.arch.resolution
    }

    pub fn expect_provenance(&self, p: Provenance) -> Result<()> {
        if self.provenance != p {
            return Err(Error::Provenance {
                expected: p.tag().into(),
                found: self.provenance.tag().into(),
            });
        }
        Ok(())
    }

    /// Same architecture (shapes of every weight).
    pub fn same_architecture(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.synthesis.len() == other.synthesis.len()
            && self
                .synthesis
                .iter()
                .zip(other.synthesis.iter())
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "arch": self.arch,
            "latent_dim": self.arch.latent_dim,
            "resolution": self.arch.resolution,
            "layer_count": self.arch.num_layers(),
            "rng_seed": self.rng_seed,
            "alpha_auto": self.alpha_auto,
            "info": self.info,
        });
        let mut c = Container::new(KIND, self.provenance.tag(), meta, ParamStore::new());
        c.put_group("mapping", &self.mapping);
        c.put_group("synthesis", &self.synthesis);
        if let Some(m) = &self.mean_latent {
            c.arrays.insert("mean_latent", Tensor::new(&[m.len()], m.clone()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(KIND)?;
        let arch: GeneratorArch = serde_json::from_value(c.metadata["arch"].clone())?;
        let ckpt = Self {
            arch,
            mapping: c.group("mapping"),
            synthesis: c.group("synthesis"),
            rng_seed: c.metadata["rng_seed"].as_u64().unwrap_or(0),
            provenance: Provenance::parse(&c.provenance)?,
            mean_latent: c.arrays.get("mean_latent").map(|t| t.data().to_vec()),
            alpha_auto: c.metadata["alpha_auto"].as_f64(),
            info: c.metadata.get("info").cloned().unwrap_or(serde_json::json!({})),
        };
        let expected = ckpt.arch.init_synthesis(&mut seed::rng(0));
        let shapes_ok = expected.len() == ckpt.synthesis.len()
            && expected
                .iter()
                .all(|(n, t)| ckpt.synthesis.get(n).is_some_and(|u| u.shape() == t.shape()));
        if !shapes_ok {
            return Err(Error::Format("synthesis weights do not match the recorded architecture".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Standard-normal latent `z` for sample `index` of stream `seed`.
pub fn sample_z(seed: u64, index: u64, dim: usize) -> Vec<f32> {
    let mut rng = seed::item_rng(seed, "latent-z", index);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Maps a batch of `z` vectors to W.
pub fn map_latents(zs: &[Vec<f32>], ckpt: &GeneratorCheckpoint) -> Result<Vec<LatentCode>> {
    let d = ckpt.latent_dim();
    if zs.iter().any(|z| z.len() != d) {
        return Err(Error::ShapeMismatch(format!("z must have {d} entries")));
    }
    if zs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("z has non-finite values".into()));
    }
    let mut out = Vec::with_capacity(zs.len());
    for chunk in zs.chunks(256) {
        let mut g = Graph::new();
        let p = ckpt.mapping.bind(&mut g, false);
        let z = g.constant(Tensor::new(&[chunk.len(), d], chunk.concat()));
        let w = mapping_forward(&mut g, &ckpt.arch, &p, z);
        for row in g.value(w).data().chunks(d) {
            out.push(LatentCode::w(row.to_vec())?);
        }
    }
    Ok(out)
}

pub fn map_latent(z: &[f32], ckpt: &GeneratorCheckpoint) -> Result<LatentCode> {
    Ok(map_latents(&[z.to_vec()], ckpt)?.remove(0))
}

/// `w = f(z)` for `z = sample_z(seed, index)`, `index ∈ [start, start + n)`.
pub fn sample_w(seed: u64, start: u64, n: usize, ckpt: &GeneratorCheckpoint) -> Result<Vec<LatentCode>> {
    let zs: Vec<Vec<f32>> = (0..n as u64)
        .map(|i| sample_z(seed, start + i, ckpt.latent_dim()))
        .collect();
    map_latents(&zs, ckpt)
}

/// Empirical mean of `f(z)` over `num_samples` latents of stream `seed`.
pub fn mean_latent(num_samples: usize, seed: u64, ckpt: &GeneratorCheckpoint) -> Result<LatentCode> {
    if num_samples == 0 {
        return Err(Error::InvalidParameter("mean_latent needs at least one sample".into()));
    }
    let d = ckpt.latent_dim();
    let mut acc = vec![0.0f64; d];
    let mut start = 0;
    while start < num_samples {
        let n = (num_samples - start).min(4096);
        for w in sample_w(seed, start as u64, n, ckpt)? {
            for (a, &v) in acc.iter_mut().zip(w.values()) {
                *a += v as f64;
            }
        }
        start += n;
    }
    LatentCode::w(acc.iter().map(|a| (a / num_samples as f64) as f32).collect())
}

pub fn sample_noise(seed: u64, ckpt: &GeneratorCheckpoint) -> NoiseStack {
    NoiseStack::sample(seed, &ckpt.arch)
}

/// `μ + ψ (w − μ)` row-wise; returns the input unchanged when `ψ = 1`.
pub fn truncate(code: &LatentCode, psi: f32, ckpt: &GeneratorCheckpoint) -> Result<LatentCode> {
    if !(0.0..=1.0).contains(&psi) {
        return Err(Error::InvalidParameter(format!("truncation psi {psi} outside [0, 1]")));
    }
    if psi == 1.0 {
        return Ok(code.clone());
    }
    let mu = ckpt.mean_latent.as_ref().ok_or(Error::MissingMeanLatent)?;
    let d = code.dim();
    let values = code
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| mu[i % d] + psi * (v - mu[i % d]))
        .collect();
    match code.space() {
        LatentSpace::W => LatentCode::w(values),
        LatentSpace::WPlus => LatentCode::wplus(code.rows(), d, values),
    }
}

fn check_code(code: &LatentCode, ckpt: &GeneratorCheckpoint) -> Result<()> {
    if code.dim() != ckpt.latent_dim() {
        return Err(Error::ShapeMismatch(format!(
            "latent dim {} vs generator {}",
            code.dim(),
            ckpt.latent_dim()
        )));
    }
    if code.space() == LatentSpace::WPlus && code.rows() != ckpt.num_layers() {
        return Err(Error::ShapeMismatch(format!(
            "W+ code has {} rows, generator has {} layers",
            code.rows(),
            ckpt.num_layers()
        )));
    }
    Ok(())
}

/// Style inputs for a batch of codes: one shared variable when every code is
/// in W, otherwise one `[N, D]` variable per layer.
pub fn code_vars(g: &mut Graph, codes: &[&LatentCode], layers: usize, trainable: bool) -> Vec<Var> {
    let leaf = |g: &mut Graph, t: Tensor| if trainable { g.param(t) } else { g.constant(t) };
    let d = codes[0].dim();
    if codes.iter().all(|c| c.space() == LatentSpace::W) {
        let data = codes.iter().flat_map(|c| c.values().iter().copied()).collect();
        let v = leaf(g, Tensor::new(&[codes.len(), d], data));
        return vec![v; layers];
    }
    (0..layers)
        .map(|l| {
            let data = codes.iter().flat_map(|c| c.layer_row(l).iter().copied()).collect();
            leaf(g, Tensor::new(&[codes.len(), d], data))
        })
        .collect()
}

/// Noise inputs for a batch: per layer, the maps stacked along the batch axis.
pub fn noise_vars(g: &mut Graph, noises: &[&NoiseStack], trainable: bool) -> Vec<Var> {
    let layers = noises[0].len();
    (0..layers)
        .map(|l| {
            let maps: Vec<&Tensor> = noises.iter().map(|n| &n.maps()[l]).collect();
            let t = if maps.len() == 1 { maps[0].clone() } else { Tensor::stack(&maps) };
            if trainable {
                g.param(t)
            } else {
                g.constant(t)
            }
        })
        .collect()
}

/// Renders a batch; `noises` has one stack per code or a single shared stack.
pub fn synthesize_batch(
    codes: &[LatentCode],
    noises: &[NoiseStack],
    truncation_psi: f32,
    ckpt: &GeneratorCheckpoint,
) -> Result<Vec<ImageTensor>> {
    if codes.is_empty() {
        return Ok(Vec::new());
    }
    if noises.len() != codes.len() && noises.len() != 1 {
        return Err(Error::ShapeMismatch("need one noise stack per code or one shared".into()));
    }
    for n in noises {
        n.validate(&ckpt.arch)?;
    }
    let mut out = Vec::with_capacity(codes.len());
    for (ci, chunk) in codes.chunks(32).enumerate() {
        let truncated: Vec<LatentCode> = chunk
            .iter()
            .map(|c| check_code(c, ckpt).and_then(|_| truncate(c, truncation_psi, ckpt)))
            .collect::<Result<_>>()?;
        let refs: Vec<&LatentCode> = truncated.iter().collect();
        let noise_refs: Vec<&NoiseStack> = if noises.len() == 1 {
            vec![&noises[0]]
        } else {
            noises[ci * 32..ci * 32 + chunk.len()].iter().collect()
        };
        let mut g = Graph::new();
        let p = ckpt.synthesis.bind(&mut g, false);
        let ws = code_vars(&mut g, &refs, ckpt.num_layers(), false);
        let ns = noise_vars(&mut g, &noise_refs, false);
        let img = synthesis_forward(&mut g, &ckpt.arch, &p, &ws, &ns);
        for i in 0..chunk.len() {
            out.push(ImageTensor::from_tensor(g.value(img), i)?);
        }
    }
    Ok(out)
}

pub fn synthesize(
    code: &LatentCode,
    noise: &NoiseStack,
    truncation_psi: f32,
    ckpt: &GeneratorCheckpoint,
) -> Result<ImageTensor> {
    Ok(synthesize_batch(std::slice::from_ref(code), std::slice::from_ref(noise), truncation_psi, ckpt)?.remove(0))
}

/// `0.75 ×` the median pairwise distance between `n` sampled `w`.
pub fn auto_alpha(ckpt: &GeneratorCheckpoint, n: usize, seed: u64) -> Result<f64> {
    let ws = sample_w(seed, 0, n, ckpt)?;
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(ws[i].distance(&ws[j])?);
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    Ok(0.75 * median)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorCheckpoint {
        let mut arch = GeneratorArch::new(16, 8).unwrap();
        arch.channels = vec![4, 4, 3];
        let mut c = GeneratorCheckpoint::init(arch, 3);
        for (n, t) in c.synthesis.iter_mut() {
            if n.ends_with("noise_gain") {
                t.data_mut()[0] = 0.3;
            }
        }
        c
    }

    #[test]
    fn layer_layout() {
        let a = GeneratorArch::new(64, 64).unwrap();
        assert_eq!(a.num_layers(), 9);
        assert_eq!(GeneratorArch::new(32, 64).unwrap().num_layers(), 7);
        let res: Vec<usize> = (0..9).map(|l| a.layer_resolution(l)).collect();
        assert_eq!(res, vec![4, 8, 8, 16, 16, 32, 32, 64, 64]);
        assert!(GeneratorArch::new(48, 64).is_err());
    }

    #[test]
    fn w_and_broadcast_wplus_render_identically() {
        let c = tiny();
        let w = map_latent(&sample_z(1, 0, 8), &c).unwrap();
        let n = sample_noise(2, &c);
        let a = synthesize(&w, &n, 1.0, &c).unwrap();
        let b = synthesize(&w.to_wplus(c.num_layers()).unwrap(), &n, 1.0, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unit_truncation_is_identity_and_missing_mean_errors() {
        let c = tiny();
        let w = map_latent(&sample_z(1, 0, 8), &c).unwrap();
        assert_eq!(truncate(&w, 1.0, &c).unwrap(), w);
        assert!(matches!(synthesize(&w, &sample_noise(0, &c), 0.7, &c), Err(Error::MissingMeanLatent)));
    }

    #[test]
    fn noise_changes_output() {
        let c = tiny();
        let w = map_latent(&sample_z(1, 0, 8), &c).unwrap();
        let a = synthesize(&w, &NoiseStack::zeros(&c.arch), 1.0, &c).unwrap();
        let b = synthesize(&w, &sample_noise(5, &c), 1.0, &c).unwrap();
        assert!(crate::metrics::mse(&a, &b).unwrap() > 0.0);
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mean_latent_single_sample_is_f_of_z() {
        let c = tiny();
        let w = map_latent(&sample_z(9, 0, 8), &c).unwrap();
        assert_eq!(mean_latent(1, 9, &c).unwrap(), w);
        assert!(mean_latent(0, 9, &c).is_err());
    }

    #[test]
    fn mean_latent_is_mean_of_mapped_samples() {
        let c = tiny();
        let n = 300;
        let ws = sample_w(4, 0, n, &c).unwrap();
        let mut acc = vec![0.0f64; 8];
        for w in &ws {
            for (a, &v) in acc.iter_mut().zip(w.values()) {
                *a += v as f64;
            }
        }
        let mean: Vec<f32> = acc.iter().map(|a| (a / n as f64) as f32).collect();
        assert_eq!(mean_latent(n, 4, &c).unwrap().values(), &mean[..]);
    }

    #[test]
    fn mapping_is_deterministic_and_non_constant() {
        let c = tiny();
        let z0 = sample_z(1, 0, 8);
        assert_eq!(map_latent(&z0, &c).unwrap(), map_latent(&z0, &c).unwrap());
        let w1 = map_latent(&sample_z(1, 1, 8), &c).unwrap();
        assert!(map_latent(&z0, &c).unwrap().distance(&w1).unwrap() > 1e-6);
        assert!(map_latent(&[0.0; 3], &c).is_err());
    }

    #[test]
    fn sample_noise_is_deterministic() {
        let c = tiny();
        assert_eq!(sample_noise(4, &c), sample_noise(4, &c));
        assert_ne!(sample_noise(4, &c), sample_noise(5, &c));
        assert!(sample_noise(4, &c).validate(&c.arch).is_ok());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let mut c = tiny();
        c.mean_latent = Some(mean_latent(10, 0, &c).unwrap().values().to_vec());
        c.alpha_auto = Some(0.123456789);
        let bytes = c.to_container().to_bytes().unwrap();
        let back = GeneratorCheckpoint::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_container().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn batch_matches_single() {
        let c = tiny();
        let ws = sample_w(2, 0, 3, &c).unwrap();
        let ns: Vec<NoiseStack> = (0..3).map(|i| sample_noise(i, &c)).collect();
        let batch = synthesize_batch(&ws, &ns, 1.0, &c).unwrap();
        for i in 0..3 {
            let single = synthesize(&ws[i], &ns[i], 1.0, &c).unwrap();
            assert!(single.mean_abs_diff(&batch[i]) < 1e-6);
        }
    }
}
