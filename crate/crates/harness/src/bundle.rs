//! On-disk forms of inversion and tuning results.

use std::path::Path;

use pti_core::checkpoint::Container;
use pti_core::gan::{GeneratorCheckpoint, LatentCode, LatentSpace, NoiseStack};
use pti_core::inversion::{InversionResult, InversionStep};
use pti_core::pivotal::{TuningResult, TuningStep};
use pti_core::ImageTensor;
use pti_tensor::ParamStore;
use serde_json::json;

use crate::error::{HarnessError, Result};

const INVERSION_KIND: &str = "inversion";
const TUNING_KIND: &str = "tuning";

fn code_from(c: &Container, name: &str, space: &str) -> Result<LatentCode> {
    let t = c
        .arrays
        .get(name)
        .ok_or_else(|| pti_core::Error::Format(format!("bundle has no `{name}` array")))?;
    Ok(LatentCode::from_tensor(LatentSpace::parse(space)?, t)?)
}

fn image_from(c: &Container, name: &str) -> Result<ImageTensor> {
    let t = c
        .arrays
        .get(name)
        .ok_or_else(|| pti_core::Error::Format(format!("bundle has no `{name}` array")))?;
    Ok(ImageTensor::from_tensor(t, 0)?)
}

fn meta<T: serde::de::DeserializeOwned>(c: &Container, key: &str) -> Result<T> {
    Ok(serde_json::from_value(c.metadata[key].clone())?)
}

pub fn inversion_to_container(r: &InversionResult) -> Container {
    let mut arrays = ParamStore::new();
    arrays.insert("pivot", r.pivot.to_tensor());
    arrays.insert("image", r.final_image.to_tensor());
    let mut c = Container::new(
        INVERSION_KIND,
        "inversion",
        json!({
            "space": r.pivot.space().name(),
            "trace": r.loss_trace,
            "best": r.best,
            "best_step": r.best_step,
        }),
        arrays,
    );
    c.put_group("noise", &r.noise.to_store());
    c
}

pub fn inversion_from_container(c: &Container) -> Result<InversionResult> {
    c.expect_kind(INVERSION_KIND)?;
    let space: String = meta(c, "space")?;
    Ok(InversionResult {
        pivot: code_from(c, "pivot", &space)?,
        noise: NoiseStack::from_store(&c.group("noise")),
        loss_trace: meta::<Vec<InversionStep>>(c, "trace")?,
        best: meta(c, "best")?,
        best_step: meta(c, "best_step")?,
        final_image: image_from(c, "image")?,
    })
}

/// Writes `tuned.ckpt` and `result.ckpt` under `dir`.
pub fn save_tuning(dir: &Path, r: &TuningResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    r.checkpoint.save(&dir.join("tuned.ckpt"))?;
    let mut arrays = ParamStore::new();
    for (i, p) in r.pivots.iter().enumerate() {
        arrays.insert(format!("pivot{i:03}"), p.to_tensor());
    }
    for (i, im) in r.final_images.iter().enumerate() {
        arrays.insert(format!("image{i:03}"), im.to_tensor());
    }
    let spaces: Vec<&str> = r.pivots.iter().map(|p| p.space().name()).collect();
    Container::new(
        TUNING_KIND,
        "tuned",
        json!({"trace": r.loss_trace, "final_recon": r.final_recon, "spaces": spaces}),
        arrays,
    )
    .save(&dir.join("result.ckpt"))?;
    Ok(())
}

pub fn load_tuning(dir: &Path) -> Result<TuningResult> {
    let checkpoint = GeneratorCheckpoint::load(&dir.join("tuned.ckpt"))?;
    let c = Container::load(&dir.join("result.ckpt"))?;
    c.expect_kind(TUNING_KIND)?;
    let spaces: Vec<String> = meta(&c, "spaces")?;
    let pivots = spaces
        .iter()
        .enumerate()
        .map(|(i, s)| code_from(&c, &format!("pivot{i:03}"), s))
        .collect::<Result<_>>()?;
    let final_images = (0..spaces.len())
        .map(|i| image_from(&c, &format!("image{i:03}")))
        .collect::<Result<_>>()?;
    Ok(TuningResult {
        checkpoint,
        loss_trace: meta::<Vec<TuningStep>>(&c, "trace")?,
        pivots,
        final_recon: meta(&c, "final_recon")?,
        final_images,
    })
}

/// The `pti invert` output directory: `inversion.ckpt` (everything, used by
/// `pti tune`), `pivot.bin`, `noise/NN.bin`, `trace.csv`, `recon.png` and
/// `target.png`.
pub fn write_inversion_bundle(dir: &Path, r: &InversionResult, target: &ImageTensor) -> Result<()> {
    let noise_dir = dir.join("noise");
    std::fs::create_dir_all(&noise_dir).map_err(|e| HarnessError::io(&noise_dir, e))?;
    inversion_to_container(r).save(&dir.join("inversion.ckpt"))?;
    write_f32(&dir.join("pivot.bin"), r.pivot.values())?;
    for (l, m) in r.noise.maps().iter().enumerate() {
        write_f32(&noise_dir.join(format!("{l:02}.bin")), m.data())?;
    }
    let mut csv = String::from("step,perceptual,noise_reg,total\n");
    for (i, s) in r.loss_trace.iter().enumerate() {
        csv.push_str(&format!("{i},{},{},{}\n", s.perceptual, s.noise_reg, s.total));
    }
    let trace = dir.join("trace.csv");
    std::fs::write(&trace, csv).map_err(|e| HarnessError::io(&trace, e))?;
    r.final_image.save_png(&dir.join("recon.png"))?;
    target.save_png(&dir.join("target.png"))?;
    Ok(())
}

pub fn read_inversion_bundle(dir: &Path) -> Result<(InversionResult, ImageTensor)> {
    let r = inversion_from_container(&Container::load(&dir.join("inversion.ckpt"))?)?;
    let target = ImageTensor::load_png(&dir.join("target.png"))?;
    Ok((r, target))
}

pub fn write_tuning_trace(path: &Path, trace: &[TuningStep]) -> Result<()> {
    let mut csv = String::from("step,recon_mean,reg,total\n");
    for (i, s) in trace.iter().enumerate() {
        let mean = s.recon.iter().sum::<f64>() / s.recon.len() as f64;
        let reg = s.reg.map(|r| r.to_string()).unwrap_or_default();
        csv.push_str(&format!("{i},{mean},{reg},{}\n", s.total));
    }
    std::fs::write(path, csv).map_err(|e| HarnessError::io(path, e))
}

fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}
