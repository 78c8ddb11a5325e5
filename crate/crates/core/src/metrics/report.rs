use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{edit_magnitude, mean_std, ms_ssim_distortion, mse};
use crate::datagen::{Factor, FactorRegressor, IdentityEmbedder};
use crate::editing::{apply_edits, EditDirection};
use crate::error::{Error, Result};
use crate::gan::{synthesize, GeneratorCheckpoint, LatentCode, NoiseStack};
use crate::image::ImageTensor;
use crate::perceptual::PerceptualBackbone;

/// Frozen measurement networks.
#[derive(Clone, Copy)]
pub struct Oracles<'a> {
    pub regressor: &'a FactorRegressor,
    pub embedder: &'a IdentityEmbedder,
    pub backbone: &'a PerceptualBackbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRow {
    pub image_id: String,
    pub mse: f64,
    pub perceptual: f64,
    pub ms_ssim_distortion: f64,
    pub id_similarity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    SameEdit,
    SameMagnitude,
    Sequential,
}

impl EditMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::SameEdit => "same_edit",
            Self::SameMagnitude => "same_magnitude",
            Self::Sequential => "sequential",
        }
    }
}

/// One latent edit: a direction, its step and the factor it targets.
#[derive(Clone, Debug)]
pub struct EditSpec<'a> {
    pub label: String,
    pub direction: &'a EditDirection,
    pub beta: f64,
    pub factor: Factor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRow {
    pub image_id: String,
    pub edit: String,
    pub mode: EditMode,
    /// Step of a single edit; absent for sequential rows.
    pub beta: Option<f64>,
    /// Regressor delta between the edited and unedited reconstructions;
    /// absent for sequential rows.
    pub magnitude: Option<f64>,
    /// Identity similarity between the edited image and the original input.
    pub id_similarity: f64,
}

/// One image under one method: how to render it and what it should match.
pub struct EditItem<'a> {
    pub image_id: String,
    pub original: &'a ImageTensor,
    pub code: &'a LatentCode,
    pub noise: &'a NoiseStack,
    pub generator: &'a GeneratorCheckpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self {
            mean,
            std,
            n: values.len(),
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.std / (self.n as f64).sqrt()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub config_hash: String,
    pub recon_rows: Vec<ReconRow>,
    pub edit_rows: Vec<EditRow>,
    pub aggregates: BTreeMap<String, Aggregate>,
}

impl MetricsReport {
    pub fn new(method: &str, config_hash: &str) -> Self {
        Self {
            method: method.to_string(),
            config_hash: config_hash.to_string(),
            recon_rows: Vec::new(),
            edit_rows: Vec::new(),
            aggregates: BTreeMap::new(),
        }
    }

    /// Recomputes every aggregate from the rows.
    pub fn recompute(&mut self) {
        let mut a = BTreeMap::new();
        if !self.recon_rows.is_empty() {
            let col = |f: fn(&ReconRow) -> f64| Aggregate::of(&self.recon_rows.iter().map(f).collect::<Vec<_>>());
            a.insert("mse".into(), col(|r| r.mse));
            a.insert("perceptual".into(), col(|r| r.perceptual));
            a.insert("ms_ssim_distortion".into(), col(|r| r.ms_ssim_distortion));
            a.insert("id_similarity".into(), col(|r| r.id_similarity));
        }
        let mut by_edit: BTreeMap<(EditMode, &str), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let mut by_image: BTreeMap<(EditMode, &str), Vec<f64>> = BTreeMap::new();
        for r in &self.edit_rows {
            let e = by_edit.entry((r.mode, r.edit.as_str())).or_default();
            if let Some(m) = r.magnitude {
                e.0.push(m);
            }
            e.1.push(r.id_similarity);
            if r.mode != EditMode::Sequential {
                by_image.entry((r.mode, r.image_id.as_str())).or_default().push(r.id_similarity);
            }
        }
        for ((mode, edit), (mag, id)) in &by_edit {
            if !mag.is_empty() {
                a.insert(format!("{}:{edit}:magnitude", mode.name()), Aggregate::of(mag));
            }
            a.insert(format!("{}:{edit}:id_similarity", mode.name()), Aggregate::of(id));
        }
        // Single edits: mean over each image's edits first, then over images.
        let mut per_mode: BTreeMap<EditMode, Vec<f64>> = BTreeMap::new();
        for ((mode, _), v) in &by_image {
            per_mode.entry(*mode).or_default().push(v.iter().sum::<f64>() / v.len() as f64);
        }
        for (mode, v) in per_mode {
            a.insert(format!("{}:all:id_similarity", mode.name()), Aggregate::of(&v));
        }
        self.aggregates = a;
    }

    pub fn aggregate(&self, key: &str) -> Result<Aggregate> {
        self.aggregates
            .get(key)
            .copied()
            .ok_or_else(|| Error::InvalidParameter(format!("report `{}` has no aggregate `{key}`", self.method)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Writes `<stem>.json` plus `<stem>_recon.csv` and `<stem>_edits.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}_recon.csv")))?;
        for r in &self.recon_rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}_edits.csv")))?;
        w.write_record(["image_id", "edit", "mode", "beta", "magnitude", "id_similarity"])?;
        for r in &self.edit_rows {
            w.write_record([
                r.image_id.clone(),
                r.edit.clone(),
                r.mode.name().to_string(),
                r.beta.map(|b| b.to_string()).unwrap_or_default(),
                r.magnitude.map(|m| m.to_string()).unwrap_or_default(),
                r.id_similarity.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        Ok(())
    }
}

/// Distortion rows for aligned `outputs` and `targets`.
pub fn evaluate_reconstruction(
    method: &str,
    image_ids: &[String],
    outputs: &[ImageTensor],
    targets: &[ImageTensor],
    oracles: Oracles<'_>,
    config_hash: &str,
) -> Result<MetricsReport> {
    if outputs.len() != targets.len() || image_ids.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ids, {} outputs and {} targets",
            image_ids.len(),
            outputs.len(),
            targets.len()
        )));
    }
    let mut report = MetricsReport::new(method, config_hash);
    for ((id, x), y) in image_ids.iter().zip(outputs).zip(targets) {
        report.recon_rows.push(ReconRow {
            image_id: id.clone(),
            mse: mse(x, y)?,
            perceptual: oracles.backbone.distance(x, y)?,
            ms_ssim_distortion: ms_ssim_distortion(x, y)?,
            id_similarity: oracles.embedder.similarity(x, y),
        });
    }
    report.recompute();
    Ok(report)
}

/// Edit rows for every item. `SameEdit` and `SameMagnitude` apply each edit
/// on its own; `Sequential` applies all edits together, in the given order.
pub fn evaluate_editing(
    method: &str,
    items: &[EditItem<'_>],
    edits: &[EditSpec<'_>],
    oracles: Oracles<'_>,
    mode: EditMode,
    config_hash: &str,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::new(method, config_hash);
    if edits.is_empty() {
        report.recompute();
        return Ok(report);
    }
    for it in items {
        let render = |code: &LatentCode| synthesize(code, it.noise, 1.0, it.generator);
        match mode {
            EditMode::SameEdit | EditMode::SameMagnitude => {
                let base = render(it.code)?;
                for e in edits {
                    let edited = render(&apply_edits(it.code, &[(e.direction, e.beta)], None)?)?;
                    report.edit_rows.push(EditRow {
                        image_id: it.image_id.clone(),
                        edit: e.label.clone(),
                        mode,
                        beta: Some(e.beta),
                        magnitude: Some(edit_magnitude(oracles.regressor, &base, &edited, e.factor)),
                        id_similarity: oracles.embedder.similarity(&edited, it.original),
                    });
                }
            }
            EditMode::Sequential => {
                let all: Vec<(&EditDirection, f64)> = edits.iter().map(|e| (e.direction, e.beta)).collect();
                let edited = render(&apply_edits(it.code, &all, None)?)?;
                report.edit_rows.push(EditRow {
                    image_id: it.image_id.clone(),
                    edit: edits.iter().map(|e| e.label.as_str()).collect::<Vec<_>>().join("+"),
                    mode,
                    beta: None,
                    magnitude: None,
                    id_similarity: oracles.embedder.similarity(&edited, it.original),
                });
            }
        }
    }
    report.recompute();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, v: f64) -> ReconRow {
        ReconRow {
            image_id: id.into(),
            mse: v,
            perceptual: 2.0 * v,
            ms_ssim_distortion: v / 2.0,
            id_similarity: 1.0 - v,
        }
    }

    #[test]
    fn aggregates_are_row_means() {
        let mut r = MetricsReport::new("m", "h");
        r.recon_rows = vec![row("a", 0.1), row("b", 0.3), row("c", 0.2)];
        r.recompute();
        assert!((r.aggregate("mse").unwrap().mean - 0.2).abs() < 1e-12);
        assert!((r.aggregate("perceptual").unwrap().mean - 0.4).abs() < 1e-12);
        assert_eq!(r.aggregate("id_similarity").unwrap().n, 3);
        assert!(r.aggregate("nope").is_err());
    }

    #[test]
    fn single_edit_average_is_per_image_first() {
        let mut r = MetricsReport::new("m", "h");
        let e = |id: &str, edit: &str, s: f64| EditRow {
            image_id: id.into(),
            edit: edit.into(),
            mode: EditMode::SameEdit,
            beta: Some(1.0),
            magnitude: Some(s),
            id_similarity: s,
        };
        r.edit_rows = vec![e("a", "pose", 1.0), e("a", "smile", 0.0), e("b", "pose", 0.2)];
        r.recompute();
        let all = r.aggregate("same_edit:all:id_similarity").unwrap();
        assert!((all.mean - 0.35).abs() < 1e-12);
        assert_eq!(r.aggregate("same_edit:pose:magnitude").unwrap().n, 2);
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let mut r = MetricsReport::new("pti", "abc");
        r.recon_rows = vec![row("a", 0.123456789012345), row("b", 1.0 / 3.0)];
        r.edit_rows.push(EditRow {
            image_id: "a".into(),
            edit: "pose".into(),
            mode: EditMode::Sequential,
            beta: None,
            magnitude: None,
            id_similarity: 0.9,
        });
        r.recompute();
        let back = MetricsReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = MetricsReport::new("w", "h");
        r.recon_rows = vec![row("a", 0.5)];
        r.recompute();
        r.write(dir.path(), "w").unwrap();
        let text = std::fs::read_to_string(dir.path().join("w_recon.csv")).unwrap();
        assert!(text.starts_with("image_id,mse,perceptual,ms_ssim_distortion,id_similarity"));
        assert!(dir.path().join("w.json").exists());
        assert!(dir.path().join("w_edits.csv").exists());
    }
}
