//! Scripted studies. Each run directory gets the resolved config, a
//! `run.json` with hashes and versions, a `results.json` holding every
//! measured number, and a `summary.json` whose gates are a pure function of
//! `results.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pti_core::datagen::{apply_ood, Factor, OodKind, Sample};
use pti_core::editing::{calibrate_edit_magnitude, calibrate_with, Calibration, EditDirection};
use pti_core::gan::{sample_noise, sample_w, synthesize, synthesize_batch, GeneratorCheckpoint, LatentCode, LatentSpace, NoiseStack};
use pti_core::inversion::{content_key, invert, InversionResult};
use pti_core::metrics::{edit_magnitude, mean_std, mse, EditItem, EditMode, EditSpec, MetricsReport, Oracles};
use pti_core::pivotal::{
    locality_drift, make_pivot, pivotal_tune, Alpha, AblationVariant, Drift, PivotSet, PivotTarget, TuningConfig,
    TuningResult,
};
use pti_core::{seed, ImageTensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::write_tuning_trace;
use crate::cache::Cache;
use crate::config::{hex, RunConfig};
use crate::error::{HarnessError, Result};
use crate::fixtures::{eval_set, FixtureStack};
use crate::grid::emit_grid;

const GRID_ROWS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExperimentId {
    ReconTable,
    EditTable,
    RegStudy,
    AlphaSweep,
    AblationGrid,
    MultiId,
    PivotDriftProbe,
    OodSuite,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 8] = [
        Self::ReconTable,
        Self::EditTable,
        Self::RegStudy,
        Self::AlphaSweep,
        Self::AblationGrid,
        Self::MultiId,
        Self::PivotDriftProbe,
        Self::OodSuite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::ReconTable => "ReconTable",
            Self::EditTable => "EditTable",
            Self::RegStudy => "RegStudy",
            Self::AlphaSweep => "AlphaSweep",
            Self::AblationGrid => "AblationGrid",
            Self::MultiId => "MultiId",
            Self::PivotDriftProbe => "PivotDriftProbe",
            Self::OodSuite => "OodSuite",
        }
    }
}

impl FromStr for ExperimentId {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        let flat = |x: &str| x.replace(['-', '_'], "").to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|id| flat(id.name()) == flat(s))
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|i| i.name()).collect();
                HarnessError::Config(format!("unknown experiment `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// One acceptance check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub criterion: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: ExperimentId,
    pub config_hash: String,
    pub passed: bool,
    pub gates: Vec<Gate>,
}

impl Summary {
    pub fn failures(&self) -> Vec<String> {
        self.gates
            .iter()
            .filter(|g| !g.passed)
            .map(|g| format!("criterion {} ({}): {}", g.criterion, g.name, g.detail))
            .collect()
    }
}

/// A value per method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub w: f64,
    pub wplus: f64,
    pub pti: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconResults {
    pub image_ids: Vec<String>,
    pub mse: Triple,
    pub perceptual: Triple,
    pub id_similarity: Triple,
    /// Per image, MSE of the pivot render before and after tuning.
    pub pivot_mse_before: Vec<f64>,
    pub pivot_mse_after: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResults {
    pub same_edit_beta: f64,
    pub same_edit_magnitude: Triple,
    /// Calibrated (+, −) steps per method.
    pub same_magnitude_betas: BTreeMap<String, (f64, f64)>,
    pub same_magnitude_achieved: BTreeMap<String, (f64, f64)>,
    /// Per image, mean identity similarity over the + and − edits.
    pub same_magnitude_id: BTreeMap<String, Vec<f64>>,
    pub sequential_betas: Vec<f64>,
    pub sequential_id: Triple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegResults {
    pub images: usize,
    pub drift_reg: Drift,
    pub drift_noreg: Drift,
    pub recon_mse_reg: f64,
    pub recon_mse_noreg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaResults {
    pub auto_alpha: f64,
    pub alphas: Vec<f64>,
    pub drift_mse: Vec<f64>,
    pub drift_perceptual: Vec<f64>,
    pub recon_mse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResults {
    pub steps: usize,
    pub final_recon: BTreeMap<String, f64>,
    /// Half the regressor pose change between `+β` and `−β` edits.
    pub edit_magnitude: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PivotDriftResults {
    pub pivot_mse: f64,
    pub pivot_perceptual: f64,
    pub pairwise_mse: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiResults {
    pub image_ids: Vec<String>,
    pub single_mse: Vec<f64>,
    pub multi_mse: Vec<f64>,
    pub drift_reg: Drift,
    pub drift_noreg: Drift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodResults {
    pub kinds: Vec<String>,
    pub w_mse: Vec<f64>,
    pub pti_mse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", content = "values")]
pub enum Results {
    ReconTable(ReconResults),
    EditTable(EditResults),
    RegStudy(RegResults),
    AlphaSweep(AlphaResults),
    AblationGrid(AblationResults),
    MultiId(MultiResults),
    PivotDriftProbe(PivotDriftResults),
    OodSuite(OodResults),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub config_hash: String,
    pub results: Results,
}

fn gate(criterion: u32, name: &str, passed: bool, detail: String) -> Gate {
    Gate {
        criterion,
        name: name.into(),
        passed,
        detail,
    }
}

fn ordered(lo: f64, mid: f64, hi: f64) -> bool {
    lo < mid && mid < hi
}

/// Paired differences `a − b`: mean and standard error.
fn paired(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (m, s) = mean_std(&d);
    (m, s / (d.len() as f64).sqrt())
}

impl Results {
    pub fn id(&self) -> ExperimentId {
        match self {
            Self::ReconTable(_) => ExperimentId::ReconTable,
            Self::EditTable(_) => ExperimentId::EditTable,
            Self::RegStudy(_) => ExperimentId::RegStudy,
            Self::AlphaSweep(_) => ExperimentId::AlphaSweep,
            Self::AblationGrid(_) => ExperimentId::AblationGrid,
            Self::MultiId(_) => ExperimentId::MultiId,
            Self::PivotDriftProbe(_) => ExperimentId::PivotDriftProbe,
            Self::OodSuite(_) => ExperimentId::OodSuite,
        }
    }

    pub fn gates(&self) -> Vec<Gate> {
        match self {
            Self::ReconTable(r) => {
                let ok = ordered(r.mse.pti, r.mse.wplus, r.mse.w)
                    && ordered(r.perceptual.pti, r.perceptual.wplus, r.perceptual.w)
                    && ordered(r.id_similarity.w, r.id_similarity.wplus, r.id_similarity.pti);
                let halved = r
                    .pivot_mse_before
                    .iter()
                    .zip(&r.pivot_mse_after)
                    .filter(|(b, a)| **a <= 0.5 * **b)
                    .count();
                let n = r.pivot_mse_before.len();
                vec![
                    gate(
                        1,
                        "reconstruction ordering",
                        ok,
                        format!(
                            "mse pti {:.4e} w+ {:.4e} w {:.4e}; perceptual pti {:.4e} w+ {:.4e} w {:.4e}; id pti {:.4} w+ {:.4} w {:.4}",
                            r.mse.pti, r.mse.wplus, r.mse.w, r.perceptual.pti, r.perceptual.wplus, r.perceptual.w,
                            r.id_similarity.pti, r.id_similarity.wplus, r.id_similarity.w
                        ),
                    ),
                    gate(
                        2,
                        "pivot distortion drop",
                        n > 0 && halved as f64 >= 0.9 * n as f64,
                        format!("{halved}/{n} images at or below half the pre-tuning pivot mse"),
                    ),
                ]
            }
            Self::EditTable(r) => {
                let m = r.same_edit_magnitude;
                let ids = &r.same_magnitude_id;
                let (d1, se1) = paired(&ids["pti"], &ids["wplus"]);
                let (d2, se2) = paired(&ids["wplus"], &ids["w"]);
                vec![
                    gate(
                        3,
                        "same-edit editability",
                        m.pti >= 0.9 * m.w && m.w > m.wplus,
                        format!("pose change pti {:.3} w {:.3} w+ {:.3} at beta {:.4}", m.pti, m.w, m.wplus, r.same_edit_beta),
                    ),
                    gate(
                        4,
                        "same-magnitude identity",
                        d1 > se1 && d2 > se2,
                        format!("id gap pti-w+ {d1:.4} (se {se1:.4}), w+-w {d2:.4} (se {se2:.4})"),
                    ),
                ]
            }
            Self::RegStudy(r) => {
                let (a, b) = (r.drift_reg, r.drift_noreg);
                let ok = a.mse <= 0.5 * b.mse
                    && a.perceptual <= 0.5 * b.perceptual
                    && r.recon_mse_reg <= 1.2 * r.recon_mse_noreg;
                vec![gate(
                    5,
                    "locality regularization",
                    ok,
                    format!(
                        "drift mse {:.4e} vs {:.4e}, perceptual {:.4e} vs {:.4e}; target mse {:.4e} vs {:.4e}",
                        a.mse, b.mse, a.perceptual, b.perceptual, r.recon_mse_reg, r.recon_mse_noreg
                    ),
                )]
            }
            Self::AlphaSweep(r) => {
                let mid = r.alphas.len() / 2;
                let last = r.alphas.len() - 1;
                let decreasing = r.drift_mse[..=mid].windows(2).all(|w| w[1] < w[0]);
                let worse = r.recon_mse[last] > r.recon_mse[mid];
                vec![gate(
                    8,
                    "alpha sweep shape",
                    r.alphas.len() >= 6 && decreasing && worse,
                    format!(
                        "drift mse {:?} over alpha {:?}; target mse mid {:.4e} largest {:.4e}",
                        r.drift_mse.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>(),
                        r.alphas.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
                        r.recon_mse[mid],
                        r.recon_mse[last]
                    ),
                )]
            }
            Self::AblationGrid(r) => {
                let a = r.final_recon["A"];
                let b = r.final_recon["B"];
                let weak = ["C", "D", "E", "F"].iter().all(|v| r.final_recon[*v] >= 2.0 * a);
                let ok = weak && (b - a).abs() <= 0.2 * a && r.edit_magnitude["B"] < r.edit_magnitude["A"];
                vec![gate(
                    6,
                    "ablation grid",
                    ok,
                    format!(
                        "final loss {}; edit magnitude A {:.3} B {:.3}",
                        r.final_recon
                            .iter()
                            .map(|(k, v)| format!("{k} {v:.4e}"))
                            .collect::<Vec<_>>()
                            .join(", "),
                        r.edit_magnitude["A"],
                        r.edit_magnitude["B"]
                    ),
                )]
            }
            Self::PivotDriftProbe(r) => vec![gate(
                7,
                "pivot-fixing probe",
                r.pivot_mse < 0.05 * r.pairwise_mse,
                format!(
                    "pivot moved by mse {:.4e}; 5% of pairwise mse is {:.4e}",
                    r.pivot_mse,
                    0.05 * r.pairwise_mse
                ),
            )],
            Self::MultiId(r) => {
                let within = r.multi_mse.iter().zip(&r.single_mse).filter(|(m, s)| **m <= 1.5 * **s).count();
                let n = r.multi_mse.len();
                let (a, b) = (r.drift_reg, r.drift_noreg);
                let ok = within == n && a.mse <= 0.5 * b.mse && a.perceptual <= 0.5 * b.perceptual;
                vec![gate(
                    9,
                    "multi-identity tuning",
                    ok,
                    format!(
                        "{within}/{n} images within 1.5x of single-ID mse; drift mse {:.4e} vs {:.4e}, perceptual {:.4e} vs {:.4e}",
                        a.mse, b.mse, a.perceptual, b.perceptual
                    ),
                )]
            }
            Self::OodSuite(_) => Vec::new(),
        }
    }

    pub fn summarize(&self, config_hash: &str) -> Summary {
        let gates = self.gates();
        Summary {
            experiment: self.id(),
            config_hash: config_hash.into(),
            passed: gates.iter().all(|g| g.passed),
            gates,
        }
    }
}

/// A tuning result and the cache key it was stored under.
pub struct Tuned {
    pub result: TuningResult,
    pub key: String,
}

/// Shared state of an experiment run.
pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub fx: FixtureStack,
    pub cache: Cache,
    pub eval: Vec<Sample>,
    pub hash: String,
}

fn pivot_digest(items: &[PivotTarget]) -> String {
    let mut h = Sha256::new();
    for it in items {
        h.update(it.pivot.space().name().as_bytes());
        for v in it.pivot.values() {
            h.update(v.to_le_bytes());
        }
        for m in it.noise.maps() {
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.update(content_key(&it.target).to_le_bytes());
    }
    hex(&h.finalize()[..16])
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

impl<'a> Ctx<'a> {
    pub fn new(cfg: &'a RunConfig, out: &Path) -> Result<Self> {
        let fx = FixtureStack::load(cfg)?;
        let root = cfg.cache.clone().unwrap_or_else(|| out.join("cache"));
        Ok(Self {
            cfg,
            fx,
            cache: Cache::new(&root),
            eval: eval_set(cfg)?,
            hash: cfg.hash(),
        })
    }

    pub fn oracles(&self) -> Oracles<'_> {
        Oracles {
            regressor: &self.fx.regressor,
            embedder: &self.fx.embedder,
            backbone: &self.fx.backbone,
        }
    }

    pub fn generator(&self) -> &GeneratorCheckpoint {
        &self.fx.generator
    }

    pub fn image_id(i: usize) -> String {
        format!("eval{i:03}")
    }

    pub fn target(&self, i: usize) -> &ImageTensor {
        &self.eval[i].image
    }

    pub fn invert(&self, image: &ImageTensor, space: LatentSpace) -> Result<InversionResult> {
        let icfg = self.cfg.inversion(space);
        let key = Cache::key("inversion", &(&self.fx.digest, &icfg, content_key(image)));
        self.cache
            .inversion(&key, || Ok(invert(image, &self.fx.generator, &self.fx.backbone, &icfg)?))
    }

    pub fn tune(&self, items: Vec<PivotTarget>, tcfg: &TuningConfig) -> Result<Tuned> {
        let key = Cache::key("tuning", &(&self.fx.digest, tcfg, pivot_digest(&items)));
        let set = PivotSet::new(items, &self.fx.generator)?;
        let result = self
            .cache
            .tuning(&key, || Ok(pivotal_tune(&self.fx.generator, &set, &self.fx.backbone, tcfg)?))?;
        Ok(Tuned { result, key })
    }

    /// W inversion of eval image `i` and its single-pivot tuning.
    pub fn pti(&self, i: usize) -> Result<(InversionResult, Tuned)> {
        let target = self.target(i);
        let inv = self.invert(target, LatentSpace::W)?;
        let tuned = self.tune(vec![PivotTarget::from((&inv, target))], &self.cfg.tuning()?)?;
        Ok((inv, tuned))
    }

    pub fn drift(&self, tuned: &Tuned) -> Result<Drift> {
        let key = Cache::key("drift", &(&tuned.key, self.cfg.drift_probes, self.cfg.seed));
        self.cache.json("drift", &key, || {
            Ok(locality_drift(
                &self.fx.generator,
                &tuned.result.checkpoint,
                &self.fx.backbone,
                self.cfg.drift_probes,
                self.cfg.seed,
            )?)
        })
    }

    pub fn auto_alpha(&self) -> Result<f64> {
        Ok(Alpha::Auto.resolve(&self.fx.generator)?)
    }

    pub fn beta_max(&self) -> Result<f64> {
        Ok(self.cfg.beta_max_factor * self.auto_alpha()?)
    }

    /// Step along the supervised `factor` direction giving a mean change of
    /// `target` on the pretrained generator.
    pub fn calibrate_pretrained(&self, factor: Factor, target: f64) -> Result<Calibration> {
        let beta_max = self.beta_max()?;
        let key = Cache::key("calibration", &(&self.fx.digest, factor.name(), target, beta_max, self.cfg.seed));
        self.cache.json("calibration", &key, || {
            Ok(calibrate_edit_magnitude(
                &self.fx.generator,
                &self.fx.regressor,
                self.fx.direction(factor),
                target,
                factor,
                beta_max,
                self.cfg.seed,
            )?)
        })
    }
}

/// Renders `code` under `gen`, edited by `beta` along `dir`, and returns the
/// regressor change of `factor`.
fn edit_delta(
    reg: &pti_core::datagen::FactorRegressor,
    gen: &GeneratorCheckpoint,
    code: &LatentCode,
    noise: &NoiseStack,
    dir: &EditDirection,
    beta: f64,
    factor: Factor,
) -> Result<f64> {
    let base = synthesize(code, noise, 1.0, gen)?;
    let edited = synthesize(&pti_core::editing::apply_edit(code, dir, beta, None)?, noise, 1.0, gen)?;
    Ok(edit_magnitude(reg, &base, &edited, factor))
}

fn write_reports(dir: &Path, reports: &[(&str, &MetricsReport)]) -> Result<()> {
    for (stem, r) in reports {
        r.write(dir, stem)?;
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn recon_table(ctx: &Ctx, dir: &Path) -> Result<ReconResults> {
    let n = ctx.cfg.eval_images;
    let (mut w_out, mut wp_out, mut pti_out) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        log::info!("ReconTable: image {}/{n}", i + 1);
        let (inv, tuned) = ctx.pti(i)?;
        let inv_wp = ctx.invert(ctx.target(i), LatentSpace::WPlus)?;
        if i == ctx.cfg.smoke_image {
            crate::bundle::write_inversion_bundle(&dir.join("smoke_inversion"), &inv, ctx.target(i))?;
            write_tuning_trace(&dir.join("smoke_tuning_trace.csv"), &tuned.result.loss_trace)?;
        }
        w_out.push(inv.final_image);
        wp_out.push(inv_wp.final_image);
        pti_out.push(tuned.result.final_images[0].clone());
    }
    let ids: Vec<String> = (0..n).map(Ctx::image_id).collect();
    let targets: Vec<ImageTensor> = (0..n).map(|i| ctx.target(i).clone()).collect();
    let rep = |m: &str, outs: &[ImageTensor]| {
        pti_core::metrics::evaluate_reconstruction(m, &ids, outs, &targets, ctx.oracles(), &ctx.hash)
    };
    let (rw, rwp, rp) = (rep("w", &w_out)?, rep("wplus", &wp_out)?, rep("pti", &pti_out)?);
    write_reports(dir, &[("recon_w", &rw), ("recon_wplus", &rwp), ("recon_pti", &rp)])?;
    let rows: Vec<Vec<ImageTensor>> = (0..n.min(GRID_ROWS))
        .map(|i| vec![targets[i].clone(), wp_out[i].clone(), w_out[i].clone(), pti_out[i].clone()])
        .collect();
    emit_grid(&rows, &["original", "W+", "W", "PTI"], &dir.join("recon_grid.png"))?;
    let triple = |key: &str| -> Result<Triple> {
        Ok(Triple {
            w: rw.aggregate(key)?.mean,
            wplus: rwp.aggregate(key)?.mean,
            pti: rp.aggregate(key)?.mean,
        })
    };
    Ok(ReconResults {
        image_ids: ids,
        mse: triple("mse")?,
        perceptual: triple("perceptual")?,
        id_similarity: triple("id_similarity")?,
        pivot_mse_before: rw.recon_rows.iter().map(|r| r.mse).collect(),
        pivot_mse_after: rp.recon_rows.iter().map(|r| r.mse).collect(),
    })
}

/// A method's edit subjects: latent code, noise and generator per image.
struct Subjects {
    name: &'static str,
    codes: Vec<LatentCode>,
    noise: Vec<NoiseStack>,
    generators: Vec<GeneratorCheckpoint>,
}

impl Subjects {
    fn items<'s>(&'s self, ctx: &'s Ctx) -> Vec<EditItem<'s>> {
        (0..self.codes.len())
            .map(|i| EditItem {
                image_id: Ctx::image_id(i),
                original: ctx.target(i),
                code: &self.codes[i],
                noise: &self.noise[i],
                generator: &self.generators[i],
            })
            .collect()
    }

    fn mean_delta(&self, ctx: &Ctx, dir: &EditDirection, beta: f64, factor: Factor) -> Result<f64> {
        let d = (0..self.codes.len())
            .map(|i| {
                edit_delta(&ctx.fx.regressor, &self.generators[i], &self.codes[i], &self.noise[i], dir, beta, factor)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(&d))
    }
}

fn edit_subjects(ctx: &Ctx, n: usize) -> Result<[Subjects; 3]> {
    let gen = ctx.generator();
    let (mut w, mut wp, mut p) = (Subjects::new("w"), Subjects::new("wplus"), Subjects::new("pti"));
    for i in 0..n {
        log::info!("EditTable: preparing image {}/{n}", i + 1);
        let (inv, tuned) = ctx.pti(i)?;
        let inv_wp = ctx.invert(ctx.target(i), LatentSpace::WPlus)?;
        w.codes.push(inv.pivot.clone());
        w.noise.push(inv.noise.clone());
        w.generators.push(gen.clone());
        wp.codes.push(inv_wp.pivot);
        wp.noise.push(inv_wp.noise);
        wp.generators.push(gen.clone());
        p.codes.push(tuned.result.pivots[0].clone());
        p.noise.push(inv.noise);
        p.generators.push(tuned.result.checkpoint);
    }
    Ok([w, wp, p])
}

impl Subjects {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            codes: vec![],
            noise: vec![],
            generators: vec![],
        }
    }
}

fn per_image_id(report: &MetricsReport) -> Vec<f64> {
    let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &report.edit_rows {
        by.entry(r.image_id.as_str()).or_default().push(r.id_similarity);
    }
    by.values().map(|v| mean(v)).collect()
}

fn edit_table(ctx: &Ctx, dir: &Path) -> Result<EditResults> {
    let n = ctx.cfg.eval_images;
    let subjects = edit_subjects(ctx, n)?;
    let pose = ctx.fx.direction(Factor::Pose);
    let same = ctx.calibrate_pretrained(Factor::Pose, ctx.cfg.same_edit_pose)?;
    log::info!("EditTable: same-edit beta {:.4} gives {:.3} on the pretrained generator", same.beta, same.achieved);

    let seq: Vec<(Factor, f64)> = vec![
        (Factor::Pose, ctx.cfg.pose_delta),
        (Factor::Smile, ctx.cfg.smile_delta),
        (Factor::Age, ctx.cfg.age_delta),
    ];
    let seq_betas = seq
        .iter()
        .map(|&(f, t)| Ok(ctx.calibrate_pretrained(f, t)?.beta))
        .collect::<Result<Vec<f64>>>()?;

    let beta_max = ctx.beta_max()?;
    let mut same_mag = BTreeMap::new();
    let mut betas = BTreeMap::new();
    let mut achieved = BTreeMap::new();
    let mut seq_id = BTreeMap::new();
    let mut ids = BTreeMap::new();
    for s in &subjects {
        let items = s.items(ctx);
        let r_same = pti_core::metrics::evaluate_editing(
            s.name,
            &items,
            &[EditSpec {
                label: "pose".into(),
                direction: pose,
                beta: same.beta,
                factor: Factor::Pose,
            }],
            ctx.oracles(),
            EditMode::SameEdit,
            &ctx.hash,
        )?;
        same_mag.insert(s.name, r_same.aggregate("same_edit:pose:magnitude")?.mean);

        let cal = |t: f64| -> Result<Calibration> {
            Ok(calibrate_with(t, beta_max, |b| {
                s.mean_delta(ctx, pose, b, Factor::Pose)
                    .map_err(|e| pti_core::Error::InvalidParameter(e.to_string()))
            })?)
        };
        let (plus, minus) = (cal(ctx.cfg.pose_delta)?, cal(-ctx.cfg.pose_delta)?);
        betas.insert(s.name.to_string(), (plus.beta, minus.beta));
        achieved.insert(s.name.to_string(), (plus.achieved, minus.achieved));
        let r_mag = pti_core::metrics::evaluate_editing(
            s.name,
            &items,
            &[
                EditSpec {
                    label: "pose+".into(),
                    direction: pose,
                    beta: plus.beta,
                    factor: Factor::Pose,
                },
                EditSpec {
                    label: "pose-".into(),
                    direction: pose,
                    beta: minus.beta,
                    factor: Factor::Pose,
                },
            ],
            ctx.oracles(),
            EditMode::SameMagnitude,
            &ctx.hash,
        )?;
        ids.insert(s.name.to_string(), per_image_id(&r_mag));

        let seq_specs: Vec<EditSpec> = seq
            .iter()
            .zip(&seq_betas)
            .map(|(&(f, _), &b)| EditSpec {
                label: f.name().into(),
                direction: ctx.fx.direction(f),
                beta: b,
                factor: f,
            })
            .collect();
        let r_seq =
            pti_core::metrics::evaluate_editing(s.name, &items, &seq_specs, ctx.oracles(), EditMode::Sequential, &ctx.hash)?;
        seq_id.insert(s.name, mean(&r_seq.edit_rows.iter().map(|r| r.id_similarity).collect::<Vec<_>>()));
        write_reports(
            dir,
            &[
                (&format!("edit_{}_same_edit", s.name), &r_same),
                (&format!("edit_{}_same_magnitude", s.name), &r_mag),
                (&format!("edit_{}_sequential", s.name), &r_seq),
            ],
        )?;
    }

    let rows = (0..n.min(GRID_ROWS))
        .map(|i| {
            let mut row = vec![ctx.target(i).clone()];
            for s in [&subjects[1], &subjects[0], &subjects[2]] {
                let code = pti_core::editing::apply_edit(&s.codes[i], pose, same.beta, None)?;
                row.push(synthesize(&code, &s.noise[i], 1.0, &s.generators[i])?);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    emit_grid(&rows, &["original", "W+ pose", "W pose", "PTI pose"], &dir.join("edit_grid.png"))?;

    let t = |m: &BTreeMap<&str, f64>| Triple {
        w: m["w"],
        wplus: m["wplus"],
        pti: m["pti"],
    };
    Ok(EditResults {
        same_edit_beta: same.beta,
        same_edit_magnitude: t(&same_mag),
        same_magnitude_betas: betas,
        same_magnitude_achieved: achieved,
        same_magnitude_id: ids,
        sequential_betas: seq_betas,
        sequential_id: t(&seq_id),
    })
}

fn recon_mse(t: &TuningResult, targets: &[&ImageTensor]) -> Result<Vec<f64>> {
    t.final_images.iter().zip(targets).map(|(x, y)| Ok(mse(x, y)?)).collect()
}

fn without_reg(cfg: &TuningConfig) -> TuningConfig {
    TuningConfig {
        regularization_enabled: false,
        ..cfg.clone()
    }
}

/// Renders `count` fresh samples under each generator, one column per generator.
fn probe_rows(ctx: &Ctx, gens: &[&GeneratorCheckpoint], count: usize, tag: &str) -> Result<Vec<Vec<ImageTensor>>> {
    let s = seed::derive_tagged(ctx.cfg.seed, tag, 0);
    let ws = sample_w(s, 0, count, ctx.generator())?;
    ws.iter()
        .enumerate()
        .map(|(i, w)| {
            let noise = sample_noise(seed::derive(s, i as u64 + 1), ctx.generator());
            gens.iter().map(|g| Ok(synthesize(w, &noise, 1.0, g)?)).collect()
        })
        .collect()
}

fn reg_study(ctx: &Ctx, dir: &Path) -> Result<RegResults> {
    let n = ctx.cfg.eval_images;
    let tcfg = ctx.cfg.tuning()?;
    let (mut dr, mut dn) = (Vec::new(), Vec::new());
    let (mut rr, mut rn) = (Vec::new(), Vec::new());
    let mut target_rows = Vec::new();
    let mut last = None;
    for k in 0..ctx.cfg.reg_study_images {
        let i = (ctx.cfg.smoke_image + k) % n;
        log::info!("RegStudy: image {}/{}", k + 1, ctx.cfg.reg_study_images);
        let target = ctx.target(i);
        let (_, reg) = ctx.pti(i)?;
        let inv = ctx.invert(target, LatentSpace::W)?;
        let noreg = ctx.tune(vec![PivotTarget::from((&inv, target))], &without_reg(&tcfg))?;
        dr.push(ctx.drift(&reg)?);
        dn.push(ctx.drift(&noreg)?);
        rr.push(mse(&reg.result.final_images[0], target)?);
        rn.push(mse(&noreg.result.final_images[0], target)?);
        target_rows.push(vec![
            target.clone(),
            noreg.result.final_images[0].clone(),
            reg.result.final_images[0].clone(),
        ]);
        write_tuning_trace(&dir.join(format!("tuning_reg_{i:03}.csv")), &reg.result.loss_trace)?;
        write_tuning_trace(&dir.join(format!("tuning_noreg_{i:03}.csv")), &noreg.result.loss_trace)?;
        last = Some((reg, noreg));
    }
    emit_grid(&target_rows, &["target", "no reg", "reg"], &dir.join("target_grid.png"))?;
    if let Some((reg, noreg)) = &last {
        let rows = probe_rows(
            ctx,
            &[ctx.generator(), &noreg.result.checkpoint, &reg.result.checkpoint],
            GRID_ROWS,
            "reg-grid",
        )?;
        emit_grid(&rows, &["original", "no reg", "reg"], &dir.join("drift_grid.png"))?;
    }
    let avg = |d: &[Drift]| Drift {
        mse: mean(&d.iter().map(|x| x.mse).collect::<Vec<_>>()),
        perceptual: mean(&d.iter().map(|x| x.perceptual).collect::<Vec<_>>()),
    };
    Ok(RegResults {
        images: ctx.cfg.reg_study_images,
        drift_reg: avg(&dr),
        drift_noreg: avg(&dn),
        recon_mse_reg: mean(&rr),
        recon_mse_noreg: mean(&rn),
    })
}

fn alpha_sweep(ctx: &Ctx, dir: &Path) -> Result<AlphaResults> {
    let i = ctx.cfg.smoke_image;
    let target = ctx.target(i);
    let inv = ctx.invert(target, LatentSpace::W)?;
    let auto = ctx.auto_alpha()?;
    let mut multiples = ctx.cfg.alpha_sweep.clone();
    multiples.sort_by(f64::total_cmp);
    let mut out = AlphaResults {
        auto_alpha: auto,
        alphas: Vec::new(),
        drift_mse: Vec::new(),
        drift_perceptual: Vec::new(),
        recon_mse: Vec::new(),
    };
    let mut row = vec![target.clone()];
    let mut labels = vec!["target".to_string()];
    for m in multiples {
        let alpha = m * auto;
        log::info!("AlphaSweep: alpha {alpha:.4} ({m} x auto)");
        let tcfg = TuningConfig {
            alpha: Alpha::Absolute(alpha),
            ..ctx.cfg.tuning()?
        };
        let tuned = ctx.tune(vec![PivotTarget::from((&inv, target))], &tcfg)?;
        let d = ctx.drift(&tuned)?;
        out.alphas.push(alpha);
        out.drift_mse.push(d.mse);
        out.drift_perceptual.push(d.perceptual);
        out.recon_mse.push(mse(&tuned.result.final_images[0], target)?);
        row.push(tuned.result.final_images[0].clone());
        labels.push(format!("{m}x"));
    }
    let mut csv = String::from("alpha,drift_mse,drift_perceptual,recon_mse\n");
    for k in 0..out.alphas.len() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            out.alphas[k], out.drift_mse[k], out.drift_perceptual[k], out.recon_mse[k]
        ));
    }
    let p = dir.join("alpha_sweep.csv");
    std::fs::write(&p, csv).map_err(|e| HarnessError::io(&p, e))?;
    let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
    emit_grid(&[row], &labels, &dir.join("alpha_grid.png"))?;
    Ok(out)
}

fn ablation_grid(ctx: &Ctx, dir: &Path) -> Result<AblationResults> {
    let i = ctx.cfg.smoke_image;
    let target = ctx.target(i);
    let gen = ctx.generator();
    let base = ctx.cfg.tuning()?;
    let same = ctx.calibrate_pretrained(Factor::Pose, ctx.cfg.same_edit_pose)?;
    let pose = ctx.fx.direction(Factor::Pose);
    let mut out = AblationResults {
        steps: base.steps,
        final_recon: BTreeMap::new(),
        edit_magnitude: BTreeMap::new(),
    };
    let (mut initial, mut tuned_row) = (vec![target.clone()], vec![target.clone()]);
    for v in AblationVariant::ALL {
        log::info!("AblationGrid: variant {}", v.name());
        let tcfg = TuningConfig {
            pivot_source: v.pivot_source(),
            optimize_pivot: v.optimize_pivot(),
            ..base.clone()
        };
        let start = match v {
            AblationVariant::A => PivotTarget::from((&ctx.invert(target, LatentSpace::W)?, target)),
            AblationVariant::B => PivotTarget::from((&ctx.invert(target, LatentSpace::WPlus)?, target)),
            _ => make_pivot(gen, target, &ctx.fx.backbone, v.pivot_source(), &ctx.cfg.inversion(LatentSpace::W), ctx.cfg.seed)?,
        };
        initial.push(synthesize(&start.pivot, &start.noise, 1.0, gen)?);
        let tuned = ctx.tune(vec![start.clone()], &tcfg)?;
        let r = &tuned.result;
        out.final_recon.insert(v.name().into(), r.final_recon[0]);
        if matches!(v, AblationVariant::A | AblationVariant::B) {
            let reg = &ctx.fx.regressor;
            let up = edit_delta(reg, &r.checkpoint, &r.pivots[0], &start.noise, pose, same.beta, Factor::Pose)?;
            let down = edit_delta(reg, &r.checkpoint, &r.pivots[0], &start.noise, pose, -same.beta, Factor::Pose)?;
            out.edit_magnitude.insert(v.name().into(), 0.5 * (up - down));
        }
        write_tuning_trace(&dir.join(format!("tuning_{}.csv", v.name())), &r.loss_trace)?;
        tuned_row.push(r.final_images[0].clone());
    }
    emit_grid(
        &[initial, tuned_row],
        &["target", "A", "B", "C", "D", "E", "F"],
        &dir.join("ablation_grid.png"),
    )?;
    Ok(out)
}

fn pivot_drift_probe(ctx: &Ctx, dir: &Path) -> Result<PivotDriftResults> {
    let i = ctx.cfg.smoke_image;
    let target = ctx.target(i);
    let gen = ctx.generator();
    let inv = ctx.invert(target, LatentSpace::W)?;
    let tcfg = TuningConfig {
        optimize_pivot: true,
        ..ctx.cfg.tuning()?
    };
    let tuned = ctx.tune(vec![PivotTarget::from((&inv, target))], &tcfg)?;
    let before = synthesize(&inv.pivot, &inv.noise, 1.0, gen)?;
    let after = synthesize(&tuned.result.pivots[0], &inv.noise, 1.0, gen)?;

    let s = seed::derive_tagged(ctx.cfg.seed, "pairwise", 0);
    let n = ctx.cfg.drift_probes.max(2);
    let ws = sample_w(s, 0, n, gen)?;
    let noise: Vec<NoiseStack> = (0..n).map(|k| sample_noise(seed::derive(s, k as u64 + 1), gen)).collect();
    let images = synthesize_batch(&ws, &noise, 1.0, gen)?;
    let (mut total, mut pairs) = (0.0, 0usize);
    for a in 0..n {
        for b in a + 1..n {
            total += mse(&images[a], &images[b])?;
            pairs += 1;
        }
    }
    emit_grid(
        &[vec![target.clone(), before.clone(), after.clone(), tuned.result.final_images[0].clone()]],
        &["target", "pivot", "moved", "tuned"],
        &dir.join("pivot_grid.png"),
    )?;
    write_tuning_trace(&dir.join("tuning_trace.csv"), &tuned.result.loss_trace)?;
    Ok(PivotDriftResults {
        pivot_mse: mse(&before, &after)?,
        pivot_perceptual: ctx.fx.backbone.distance(&before, &after)?,
        pairwise_mse: total / pairs as f64,
        pairs,
    })
}

fn multi_id(ctx: &Ctx, dir: &Path) -> Result<MultiResults> {
    let k = ctx.cfg.multi_id;
    let single_cfg = ctx.cfg.tuning()?;
    let tcfg = TuningConfig {
        steps: ctx.cfg.multi_id_steps.unwrap_or(single_cfg.steps * k),
        ..single_cfg
    };
    let mut items = Vec::new();
    let mut single = Vec::new();
    let mut singles = Vec::new();
    for i in 0..k {
        log::info!("MultiId: single-identity run {}/{k}", i + 1);
        let (inv, tuned) = ctx.pti(i)?;
        single.push(mse(&tuned.result.final_images[0], ctx.target(i))?);
        singles.push(tuned.result.final_images[0].clone());
        items.push(PivotTarget::from((&inv, ctx.target(i))));
    }
    log::info!("MultiId: joint tuning on {k} pivots");
    let reg = ctx.tune(items.clone(), &tcfg)?;
    let noreg = ctx.tune(items, &without_reg(&tcfg))?;
    let targets: Vec<&ImageTensor> = (0..k).map(|i| ctx.target(i)).collect();
    let ids: Vec<String> = (0..k).map(Ctx::image_id).collect();
    let owned: Vec<ImageTensor> = targets.iter().map(|t| (*t).clone()).collect();
    let report = pti_core::metrics::evaluate_reconstruction(
        "multi_id",
        &ids,
        &reg.result.final_images,
        &owned,
        ctx.oracles(),
        &ctx.hash,
    )?;
    report.write(dir, "recon_multi_id")?;
    crate::bundle::save_tuning(&dir.join("multi_id_tuned"), &reg.result)?;
    write_tuning_trace(&dir.join("tuning_trace.csv"), &reg.result.loss_trace)?;
    let rows: Vec<Vec<ImageTensor>> = (0..k)
        .map(|i| vec![owned[i].clone(), singles[i].clone(), reg.result.final_images[i].clone()])
        .collect();
    emit_grid(&rows, &["target", "single", "multi"], &dir.join("multi_id_grid.png"))?;
    Ok(MultiResults {
        image_ids: ids,
        single_mse: single,
        multi_mse: recon_mse(&reg.result, &targets)?,
        drift_reg: ctx.drift(&reg)?,
        drift_noreg: ctx.drift(&noreg)?,
    })
}

fn ood_suite(ctx: &Ctx, dir: &Path) -> Result<OodResults> {
    let kinds = [OodKind::FacePaint, OodKind::Occluder];
    let mut out = OodResults {
        kinds: Vec::new(),
        w_mse: Vec::new(),
        pti_mse: Vec::new(),
    };
    let mut rows = Vec::new();
    for j in 0..ctx.cfg.ood_images {
        let i = j % ctx.cfg.eval_images;
        let kind = kinds[j % kinds.len()];
        log::info!("OodSuite: image {}/{} ({kind:?})", j + 1, ctx.cfg.ood_images);
        let image = apply_ood(ctx.target(i), kind, seed::derive_tagged(ctx.cfg.seed, "ood", j as u64));
        let inv = ctx.invert(&image, LatentSpace::W)?;
        let tuned = ctx.tune(vec![PivotTarget::from((&inv, &image))], &ctx.cfg.tuning()?)?;
        out.kinds.push(format!("{kind:?}"));
        out.w_mse.push(mse(&inv.final_image, &image)?);
        out.pti_mse.push(mse(&tuned.result.final_images[0], &image)?);
        rows.push(vec![image, inv.final_image, tuned.result.final_images[0].clone()]);
    }
    if !rows.is_empty() {
        emit_grid(&rows, &["original", "W", "PTI"], &dir.join("ood_grid.png"))?;
    }
    Ok(out)
}

pub fn run_dir(out: &Path, id: ExperimentId) -> PathBuf {
    out.join(id.name())
}

#[derive(Serialize)]
struct RunRecord<'r> {
    experiment: ExperimentId,
    config_hash: &'r str,
    fixtures_digest: &'r str,
    version: &'static str,
}

/// Runs one experiment into `<out>/<id>/` and returns its summary.
pub fn run_experiment(id: ExperimentId, cfg: &RunConfig, out: &Path) -> Result<Summary> {
    let ctx = Ctx::new(cfg, out)?;
    let dir = run_dir(out, id);
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| HarnessError::io(&cfg_path, e))?;
    write_json(
        &dir.join("run.json"),
        &RunRecord {
            experiment: id,
            config_hash: &ctx.hash,
            fixtures_digest: &ctx.fx.digest,
            version: env!("CARGO_PKG_VERSION"),
        },
    )?;
    let results = match id {
        ExperimentId::ReconTable => Results::ReconTable(recon_table(&ctx, &dir)?),
        ExperimentId::EditTable => Results::EditTable(edit_table(&ctx, &dir)?),
        ExperimentId::RegStudy => Results::RegStudy(reg_study(&ctx, &dir)?),
        ExperimentId::AlphaSweep => Results::AlphaSweep(alpha_sweep(&ctx, &dir)?),
        ExperimentId::AblationGrid => Results::AblationGrid(ablation_grid(&ctx, &dir)?),
        ExperimentId::MultiId => Results::MultiId(multi_id(&ctx, &dir)?),
        ExperimentId::PivotDriftProbe => Results::PivotDriftProbe(pivot_drift_probe(&ctx, &dir)?),
        ExperimentId::OodSuite => Results::OodSuite(ood_suite(&ctx, &dir)?),
    };
    let file = ResultsFile {
        config_hash: ctx.hash.clone(),
        results,
    };
    write_json(&dir.join("results.json"), &file)?;
    write_summary(&dir, &file)
}

fn write_summary(dir: &Path, file: &ResultsFile) -> Result<Summary> {
    let summary = file.results.summarize(&file.config_hash);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Rewrites `summary.json` from `results.json` in `dir`, or in every
/// experiment directory below it.
pub fn regenerate_summaries(dir: &Path) -> Result<Vec<Summary>> {
    let one = |d: &Path| -> Result<Summary> {
        let p = d.join("results.json");
        let text = std::fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
        write_summary(d, &serde_json::from_str(&text)?)
    };
    if dir.join("results.json").exists() {
        return Ok(vec![one(dir)?]);
    }
    let found: Vec<Summary> = ExperimentId::ALL
        .iter()
        .map(|id| run_dir(dir, *id))
        .filter(|d| d.join("results.json").exists())
        .map(|d| one(&d))
        .collect::<Result<_>>()?;
    if found.is_empty() {
        return Err(HarnessError::Config(format!("no results.json under {}", dir.display())));
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_names_parse_loosely() {
        for id in ExperimentId::ALL {
            assert_eq!(id.name().parse::<ExperimentId>().unwrap(), id);
        }
        assert_eq!("recon_table".parse::<ExperimentId>().unwrap(), ExperimentId::ReconTable);
        assert!("Nope".parse::<ExperimentId>().is_err());
    }

    fn recon(after: Vec<f64>) -> Results {
        Results::ReconTable(ReconResults {
            image_ids: vec!["a".into(); after.len()],
            mse: Triple { w: 3.0, wplus: 2.0, pti: 1.0 },
            perceptual: Triple { w: 3.0, wplus: 2.0, pti: 1.0 },
            id_similarity: Triple { w: 0.1, wplus: 0.2, pti: 0.3 },
            pivot_mse_before: vec![1.0; after.len()],
            pivot_mse_after: after,
        })
    }

    #[test]
    fn recon_gates_follow_the_numbers() {
        let s = recon(vec![0.5; 10]).summarize("h");
        assert!(s.passed, "{:?}", s.failures());
        let mut after = vec![0.5; 10];
        after[0] = 0.6;
        after[1] = 0.6;
        let s = recon(after).summarize("h");
        assert!(!s.gates[1].passed);
        assert_eq!(s.failures().len(), 1);
    }

    #[test]
    fn results_round_trip_through_json() {
        let f = ResultsFile {
            config_hash: "abc".into(),
            results: recon(vec![0.1, 1.0 / 3.0]),
        };
        let back: ResultsFile = serde_json::from_str(&serde_json::to_string_pretty(&f).unwrap()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn summaries_regenerate_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let d = run_dir(dir.path(), ExperimentId::ReconTable);
        std::fs::create_dir_all(&d).unwrap();
        let f = ResultsFile {
            config_hash: "abc".into(),
            results: recon(vec![0.2, 0.7]),
        };
        write_json(&d.join("results.json"), &f).unwrap();
        write_summary(&d, &f).unwrap();
        let first = std::fs::read(d.join("summary.json")).unwrap();
        std::fs::remove_file(d.join("summary.json")).unwrap();
        regenerate_summaries(dir.path()).unwrap();
        assert_eq!(std::fs::read(d.join("summary.json")).unwrap(), first);
    }

    #[test]
    fn alpha_gate_checks_the_shape() {
        let r = |drift: Vec<f64>, recon: Vec<f64>| Results::AlphaSweep(AlphaResults {
            auto_alpha: 1.0,
            alphas: vec![0.1, 0.25, 0.5, 0.75, 1.0, 2.0],
            drift_perceptual: drift.clone(),
            drift_mse: drift,
            recon_mse: recon,
        });
        let good = r(vec![6.0, 5.0, 4.0, 3.0, 3.5, 3.6], vec![1.0, 1.0, 1.0, 1.0, 1.1, 2.0]);
        assert!(good.summarize("h").passed);
        let bumpy = r(vec![6.0, 6.5, 4.0, 3.0, 3.5, 3.6], vec![1.0, 1.0, 1.0, 1.0, 1.1, 2.0]);
        assert!(!bumpy.summarize("h").passed);
    }
}
