//! Linear edit directions in W: supervised (logistic separator on regressor
//! labels) and unsupervised (principal components of sampled codes).

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datagen::{Factor, FactorRegressor};
use crate::error::{Error, Result};
use crate::gan::{sample_noise, sample_w, synthesize_batch, GeneratorCheckpoint, LatentCode, LatentSpace, NoiseStack};
use crate::image::ImageTensor;
use crate::seed;

pub const MIN_SUPERVISED_SAMPLES: usize = 1000;
pub const MIN_PCA_SAMPLES: usize = 10_000;
pub const ORIENTATION_PROBES: usize = 64;
pub const ORIENTATION_THRESHOLD: f64 = 0.8;
pub const CALIBRATION_PROBES: usize = 32;
/// Relative tolerance on the calibrated delta.
pub const CALIBRATION_TOL: f64 = 0.1;
/// The calibration bracket starts at `beta_max / 2^BRACKET_DOUBLINGS`.
const BRACKET_DOUBLINGS: i32 = 8;
const NORM_TOL: f64 = 1e-6;
const LOGISTIC_L2: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionMethod {
    Supervised,
    Pca,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionMeta {
    pub num_samples: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explained_variance: Option<f64>,
    #[serde(default)]
    pub rank_deficient: bool,
    /// Share of orientation probes whose factor increased.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation_fraction: Option<f64>,
    /// Step used for the orientation probe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_beta: Option<f64>,
}

/// Unit vector in W.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditDirection {
    vector: Vec<f32>,
    pub factor: Option<String>,
    pub method: DirectionMethod,
    pub metadata: DirectionMeta,
    norm: f64,
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

impl EditDirection {
    /// Normalizes `vector` to unit length.
    pub fn new(vector: &[f64], factor: Option<Factor>, method: DirectionMethod, metadata: DirectionMeta) -> Result<Self> {
        let n = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateDirection(n));
        }
        let vector: Vec<f32> = vector.iter().map(|x| (x / n) as f32).collect();
        Ok(Self {
            norm: l2(&vector),
            vector,
            factor: factor.map(|f| f.name().to_string()),
            method,
            metadata,
        })
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn factor(&self) -> Result<Option<Factor>> {
        self.factor.as_deref().map(Factor::parse).transpose()
    }

    pub fn negated(&self) -> Self {
        let mut d = self.clone();
        d.vector.iter_mut().for_each(|v| *v = -*v);
        d
    }

    fn validate(&self) -> Result<()> {
        let n = l2(&self.vector);
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Format(format!("direction norm {n} is not 1")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(s)?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// `code + β·direction`. A mask selects the W+ rows that receive the edit;
/// without one every row is edited.
pub fn apply_edit(code: &LatentCode, direction: &EditDirection, beta: f64, mask: Option<&[bool]>) -> Result<LatentCode> {
    apply_edits(code, &[(direction, beta)], mask)
}

/// Applies several edits at once. Offsets are summed per coordinate in a
/// canonical order, so the result does not depend on the order of `edits`.
pub fn apply_edits(code: &LatentCode, edits: &[(&EditDirection, f64)], mask: Option<&[bool]>) -> Result<LatentCode> {
    for (d, _) in edits {
        if d.dim() != code.dim() {
            return Err(Error::ShapeMismatch(format!(
                "direction has dim {}, code has dim {}",
                d.dim(),
                code.dim()
            )));
        }
    }
    if let Some(m) = mask {
        if code.space() == LatentSpace::W {
            return Err(Error::InvalidParameter("a layer mask needs a W+ code".into()));
        }
        if m.len() != code.rows() {
            return Err(Error::ShapeMismatch(format!("mask has {} rows, code has {}", m.len(), code.rows())));
        }
    }
    let active: Vec<_> = edits.iter().filter(|(_, b)| *b != 0.0).collect();
    if active.is_empty() {
        return Ok(code.clone());
    }
    let dim = code.dim();
    let mut terms = Vec::with_capacity(active.len());
    let offset: Vec<f64> = (0..dim)
        .map(|i| {
            terms.clear();
            terms.extend(active.iter().map(|(d, b)| b * d.vector[i] as f64));
            terms.sort_by(f64::total_cmp);
            terms.iter().sum()
        })
        .collect();
    let mut values = code.values().to_vec();
    for (r, row) in values.chunks_mut(dim).enumerate() {
        if mask.is_some_and(|m| !m[r]) {
            continue;
        }
        for (v, o) in row.iter_mut().zip(&offset) {
            *v = (*v as f64 + o) as f32;
        }
    }
    match code.space() {
        LatentSpace::W => LatentCode::w(values),
        LatentSpace::WPlus => LatentCode::wplus(code.rows(), dim, values),
    }
}

/// Codes, noise and images sampled from the generator for fitting/probing.
struct Samples {
    codes: Vec<LatentCode>,
    noise: Vec<NoiseStack>,
    images: Vec<ImageTensor>,
}

fn draw(ckpt: &GeneratorCheckpoint, n: usize, seed: u64, render: bool) -> Result<Samples> {
    let codes = sample_w(seed, 0, n, ckpt)?;
    let noise: Vec<NoiseStack> = (0..n)
        .map(|i| sample_noise(seed::derive_tagged(seed, "edit-noise", i as u64), ckpt))
        .collect();
    let images = if render { synthesize_batch(&codes, &noise, 1.0, ckpt)? } else { Vec::new() };
    Ok(Samples { codes, noise, images })
}

fn predict_factor(reg: &FactorRegressor, images: &[ImageTensor], factor: Factor) -> Vec<f64> {
    images
        .chunks(64)
        .flat_map(|c| {
            let refs: Vec<&ImageTensor> = c.iter().collect();
            reg.predict_batch(&refs)
        })
        .map(|f| f.get(factor))
        .collect()
}

/// Mean factor change when every code in `codes` is moved by `beta` along
/// `direction`, rendered with the matching noise.
pub fn mean_factor_delta(
    ckpt: &GeneratorCheckpoint,
    reg: &FactorRegressor,
    codes: &[LatentCode],
    noise: &[NoiseStack],
    direction: &EditDirection,
    beta: f64,
    factor: Factor,
) -> Result<Vec<f64>> {
    let edited: Vec<LatentCode> = codes
        .iter()
        .map(|c| apply_edit(c, direction, beta, None))
        .collect::<Result<_>>()?;
    let before = predict_factor(reg, &synthesize_batch(codes, noise, 1.0, ckpt)?, factor);
    let after = predict_factor(reg, &synthesize_batch(&edited, noise, 1.0, ckpt)?, factor);
    Ok(after.iter().zip(&before).map(|(a, b)| a - b).collect())
}

/// L2-regularized logistic regression by Newton's method. Returns `[w; b]`.
fn logistic_fit(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let (n, d) = x.shape();
    let xa = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[(i, j)] } else { 1.0 });
    let mut theta = DVector::zeros(d + 1);
    for _ in 0..50 {
        let z = &xa * &theta;
        let p: Vec<f64> = z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let mut grad = DVector::zeros(d + 1);
        let mut hess = DMatrix::zeros(d + 1, d + 1);
        for i in 0..n {
            let row = xa.row(i).transpose();
            grad += &row * (p[i] - y[i]);
            hess += &row * row.transpose() * (p[i] * (1.0 - p[i]) + 1e-9);
        }
        for j in 0..d {
            grad[j] += LOGISTIC_L2 * theta[j];
            hess[(j, j)] += LOGISTIC_L2;
        }
        let Some(step) = hess.lu().solve(&grad) else { break };
        theta -= &step;
        if step.norm() < 1e-10 {
            break;
        }
    }
    theta
}

/// Separator between the top and bottom quartiles of regressor-labelled
/// samples, oriented and checked with a probe on fresh codes.
pub fn fit_supervised_direction(
    ckpt: &GeneratorCheckpoint,
    reg: &FactorRegressor,
    factor: Factor,
    num_samples: usize,
    seed: u64,
) -> Result<EditDirection> {
    if num_samples < MIN_SUPERVISED_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "supervised fit needs >= {MIN_SUPERVISED_SAMPLES} samples, got {num_samples}"
        )));
    }
    let s = draw(ckpt, num_samples, seed::derive_tagged(seed, "supervised-fit", 0), true)?;
    let labels = predict_factor(reg, &s.images, factor);
    let mut order: Vec<usize> = (0..num_samples).collect();
    order.sort_by(|&a, &b| labels[a].total_cmp(&labels[b]));
    let q = num_samples / 4;
    let picked: Vec<(usize, f64)> = order[..q]
        .iter()
        .map(|&i| (i, 0.0))
        .chain(order[num_samples - q..].iter().map(|&i| (i, 1.0)))
        .collect();
    let d = ckpt.latent_dim();
    // Standardize so the ridge penalty is scale free.
    let mean: Vec<f64> = (0..d)
        .map(|j| picked.iter().map(|&(i, _)| s.codes[i].values()[j] as f64).sum::<f64>() / picked.len() as f64)
        .collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = picked
                .iter()
                .map(|&(i, _)| (s.codes[i].values()[j] as f64 - mean[j]).powi(2))
                .sum::<f64>()
                / picked.len() as f64;
            v.sqrt().max(1e-12)
        })
        .collect();
    let x = DMatrix::from_fn(picked.len(), d, |r, j| (s.codes[picked[r].0].values()[j] as f64 - mean[j]) / std[j]);
    let y: Vec<f64> = picked.iter().map(|p| p.1).collect();
    let theta = logistic_fit(&x, &y);
    let normal: Vec<f64> = (0..d).map(|j| theta[j] / std[j]).collect();
    let mut meta = DirectionMeta {
        num_samples,
        seed,
        ..DirectionMeta::default()
    };
    let dir = EditDirection::new(&normal, Some(factor), DirectionMethod::Supervised, meta.clone())?;

    // Probe step: two standard deviations of the sampled codes along the direction.
    let proj: Vec<f64> = s
        .codes
        .iter()
        .map(|c| c.values().iter().zip(dir.vector()).map(|(&a, &b)| a as f64 * b as f64).sum())
        .collect();
    let pm = proj.iter().sum::<f64>() / proj.len() as f64;
    let beta = 2.0 * (proj.iter().map(|p| (p - pm).powi(2)).sum::<f64>() / proj.len() as f64).sqrt();
    let probe = draw(ckpt, ORIENTATION_PROBES, seed::derive_tagged(seed, "supervised-probe", 0), false)?;
    let deltas = mean_factor_delta(ckpt, reg, &probe.codes, &probe.noise, &dir, beta, factor)?;
    let frac = deltas.iter().filter(|&&v| v > 0.0).count() as f64 / deltas.len() as f64;
    if frac < ORIENTATION_THRESHOLD {
        return Err(Error::OrientationAmbiguous(frac));
    }
    meta.orientation_fraction = Some(frac);
    meta.probe_beta = Some(beta);
    Ok(EditDirection { metadata: meta, ..dir })
}

/// Top-`k` principal directions of sampled W codes, in decreasing variance.
/// Components with numerically zero variance are dropped and the remaining
/// ones are flagged `rank_deficient`.
pub fn fit_pca_directions(ckpt: &GeneratorCheckpoint, num_samples: usize, k: usize, seed: u64) -> Result<Vec<EditDirection>> {
    let d = ckpt.latent_dim();
    if num_samples < MIN_PCA_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "PCA needs >= {MIN_PCA_SAMPLES} samples, got {num_samples}"
        )));
    }
    if k == 0 || k > d {
        return Err(Error::InvalidParameter(format!("k must be in 1..={d}, got {k}")));
    }
    let codes = sample_w(seed::derive_tagged(seed, "pca", 0), 0, num_samples, ckpt)?;
    let mut mean = vec![0.0f64; d];
    for c in &codes {
        for (m, &v) in mean.iter_mut().zip(c.values()) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= num_samples as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for c in &codes {
        let x = DVector::from_iterator(d, c.values().iter().zip(&mean).map(|(&v, m)| v as f64 - m));
        cov.syger(1.0, &x, &x, 1.0);
    }
    cov /= (num_samples - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let kept: Vec<usize> = order
        .iter()
        .copied()
        .take(k)
        .filter(|&i| eig.eigenvalues[i] > 1e-10 * top.max(f64::MIN_POSITIVE))
        .collect();
    let deficient = kept.len() < k;
    kept.iter()
        .enumerate()
        .map(|(rank, &i)| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            // Sign convention: largest-magnitude coordinate positive.
            let big = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if big < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            EditDirection::new(
                &v,
                None,
                DirectionMethod::Pca,
                DirectionMeta {
                    num_samples,
                    seed,
                    component: Some(rank),
                    explained_variance: Some(eig.eigenvalues[i] / total),
                    rank_deficient: deficient,
                    ..DirectionMeta::default()
                },
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub beta: f64,
    pub achieved: f64,
    pub evaluations: usize,
}

/// Finds β with `measure(β)` within `CALIBRATION_TOL` of `target` over
/// `(0, beta_max]` (or `[-beta_max, 0)` for negative targets).
///
/// The bracket grows geometrically from `beta_max / 2^BRACKET_DOUBLINGS` up to
/// `beta_max` and stops at the first β that reaches the target, then bisects
/// inside it. Only the response below that first crossing needs to be
/// increasing, so edits that saturate or fold back far out of distribution
/// still calibrate to the nearest solution.
pub fn calibrate_with(target: f64, beta_max: f64, mut measure: impl FnMut(f64) -> Result<f64>) -> Result<Calibration> {
    if target == 0.0 {
        return Ok(Calibration {
            beta: 0.0,
            achieved: 0.0,
            evaluations: 0,
        });
    }
    if !(beta_max > 0.0) {
        return Err(Error::InvalidParameter(format!("beta_max must be > 0, got {beta_max}")));
    }
    let sign = target.signum();
    let goal = target.abs();
    let mut eval = |b: f64| measure(sign * b).map(|m| sign * m);
    let mut evaluations = 0;
    let mut lo = 0.0;
    let mut probe = beta_max / f64::powi(2.0, BRACKET_DOUBLINGS);
    let mut strongest = (probe, f64::NEG_INFINITY);
    let (hi, top) = loop {
        let m = eval(probe)?;
        evaluations += 1;
        if m > strongest.1 {
            strongest = (probe, m);
        }
        if m >= goal * (1.0 - CALIBRATION_TOL) {
            break (probe, m);
        }
        if probe >= beta_max {
            return Err(Error::Unreachable {
                target,
                beta_max,
                achieved: sign * strongest.1,
            });
        }
        lo = probe;
        probe = (2.0 * probe).min(beta_max);
    };
    let mut hi = hi;
    let mut best = (hi, top);
    for _ in 0..40 {
        if (best.1 - goal).abs() <= CALIBRATION_TOL * goal {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let m = eval(mid)?;
        evaluations += 1;
        if (m - goal).abs() < (best.1 - goal).abs() {
            best = (mid, m);
        }
        if m < goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Calibration {
        beta: sign * best.0,
        achieved: sign * best.1,
        evaluations,
    })
}

/// Calibrates β on the generator so the mean regressor delta over
/// `CALIBRATION_PROBES` sampled codes equals `target_delta`.
pub fn calibrate_edit_magnitude(
    ckpt: &GeneratorCheckpoint,
    reg: &FactorRegressor,
    direction: &EditDirection,
    target_delta: f64,
    factor: Factor,
    beta_max: f64,
    seed: u64,
) -> Result<Calibration> {
    let probe = draw(ckpt, CALIBRATION_PROBES, seed::derive_tagged(seed, "calibration", 0), false)?;
    calibrate_with(target_delta, beta_max, |b| {
        let d = mean_factor_delta(ckpt, reg, &probe.codes, &probe.noise, direction, b, factor)?;
        Ok(d.iter().sum::<f64>() / d.len() as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dir(v: &[f64]) -> EditDirection {
        EditDirection::new(v, None, DirectionMethod::Pca, DirectionMeta::default()).unwrap()
    }

    #[test]
    fn directions_are_unit_norm_and_round_trip() {
        let d = dir(&[3.0, 4.0, 0.0]);
        assert!((l2(d.vector()) - 1.0).abs() < 1e-6);
        let back = EditDirection::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(back, d);
        assert!(EditDirection::new(&[0.0, 0.0], None, DirectionMethod::Pca, DirectionMeta::default()).is_err());
    }

    #[test]
    fn non_unit_json_is_rejected() {
        let mut d = dir(&[1.0, 0.0]);
        d.vector[0] = 2.0;
        assert!(EditDirection::from_json(&serde_json::to_string(&d).unwrap()).is_err());
    }

    #[test]
    fn zero_beta_is_identity() {
        let w = LatentCode::w(vec![-0.0, 1.5, -2.25]).unwrap();
        let out = apply_edit(&w, &dir(&[1.0, 1.0, 1.0]), 0.0, None).unwrap();
        assert_eq!(
            out.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            w.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mask_limits_rows_and_needs_wplus() {
        let d = dir(&[1.0, 0.0]);
        let w = LatentCode::w(vec![0.0, 0.0]).unwrap();
        assert!(apply_edit(&w, &d, 1.0, Some(&[true])).is_err());
        let p = w.to_wplus(3).unwrap();
        let out = apply_edit(&p, &d, 2.0, Some(&[true, false, true])).unwrap();
        assert_eq!(out.row(0), &[2.0, 0.0]);
        assert_eq!(out.row(1), &[0.0, 0.0]);
        assert_eq!(out.row(2), &[2.0, 0.0]);
        assert!(apply_edit(&p, &d, 2.0, Some(&[true])).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let w = LatentCode::w(vec![0.0; 3]).unwrap();
        assert!(apply_edit(&w, &dir(&[1.0, 0.0]), 1.0, None).is_err());
    }

    #[test]
    fn calibration_on_a_linear_response() {
        let c = calibrate_with(5.0, 10.0, |b| Ok(2.0 * b)).unwrap();
        assert!((c.achieved - 5.0).abs() <= 0.5);
        assert!((c.beta - 2.5).abs() <= 0.25);
        let c = calibrate_with(-5.0, 10.0, |b| Ok(2.0 * b)).unwrap();
        assert!(c.beta < 0.0 && (c.achieved + 5.0).abs() <= 0.5);
        assert_eq!(calibrate_with(0.0, 10.0, |_| unreachable!()).unwrap().beta, 0.0);
    }

    #[test]
    fn calibration_reports_unreachable_targets() {
        let e = calibrate_with(50.0, 1.0, |b| Ok(b)).unwrap_err();
        assert!(matches!(e, Error::Unreachable { achieved, .. } if achieved == 1.0));
    }

    #[test]
    fn calibration_finds_the_first_crossing_of_a_folding_response() {
        // Rises to 30 at β = 8, then falls back to 0 at β = 16.
        let f = |b: f64| Ok(if b.abs() <= 8.0 { 3.75 * b } else { 3.75 * (16.0 - b.abs()) * b.signum() });
        let c = calibrate_with(10.0, 25.0, f).unwrap();
        assert!((c.achieved - 10.0).abs() <= 1.0);
        assert!(c.beta > 0.0 && c.beta < 8.0);
        let c = calibrate_with(-10.0, 25.0, f).unwrap();
        assert!(c.beta < 0.0 && c.beta > -8.0);
        let e = calibrate_with(40.0, 25.0, f).unwrap_err();
        // The strongest probed point is β = 25·2^-2.
        assert!(matches!(e, Error::Unreachable { achieved, .. } if (achieved - 3.75 * 6.25).abs() < 1e-9));
    }

    #[test]
    fn logistic_fit_separates_a_line() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 10.0 - 2.0).collect();
        let x = DMatrix::from_fn(40, 2, |i, j| if j == 0 { xs[i] } else if i % 2 == 0 { 0.3 } else { -0.3 });
        let y: Vec<f64> = xs.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let t = logistic_fit(&x, &y);
        assert!(t[0] > 0.0 && t[0].abs() > 5.0 * t[1].abs());
    }

    proptest! {
        #[test]
        fn edits_are_invertible_and_commute(
            w in proptest::collection::vec(-3.0f32..3.0, 8),
            a in proptest::collection::vec(-1.0f64..1.0, 8),
            b in proptest::collection::vec(-1.0f64..1.0, 8),
            c in proptest::collection::vec(-1.0f64..1.0, 8),
            b1 in -5.0f64..5.0, b2 in -5.0f64..5.0, b3 in -5.0f64..5.0,
        ) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3) && c.iter().any(|v| v.abs() > 1e-3));
            let (d1, d2, d3) = (dir(&a), dir(&b), dir(&c));
            let code = LatentCode::w(w).unwrap();
            let there = apply_edit(&code, &d1, b1, None).unwrap();
            let back = apply_edit(&there, &d1, -b1, None).unwrap();
            for (x, y) in back.values().iter().zip(code.values()) {
                // f32 codes: the bound is relative to the magnitudes involved.
                let scale = (y.abs() as f64 + b1.abs()).max(1.0);
                prop_assert!(((x - y) as f64).abs() <= 1e-6 * scale, "{} vs {}", x, y);
            }
            let x = apply_edits(&code, &[(&d1, b1), (&d2, b2), (&d3, b3)], None).unwrap();
            let y = apply_edits(&code, &[(&d3, b3), (&d1, b1), (&d2, b2)], None).unwrap();
            prop_assert_eq!(x.values(), y.values());
        }

        #[test]
        fn edit_is_linear_in_beta(w in proptest::collection::vec(-3.0f32..3.0, 6), beta in -4.0f64..4.0) {
            let d = dir(&[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]);
            let code = LatentCode::w(w).unwrap();
            let one = apply_edit(&code, &d, beta, None).unwrap();
            let two = apply_edit(&code, &d, 2.0 * beta, None).unwrap();
            for i in 0..6 {
                let o = code.values()[i] as f64;
                let s1 = one.values()[i] as f64 - o;
                let s2 = two.values()[i] as f64 - o;
                prop_assert!((s2 - 2.0 * s1).abs() < 1e-5, "{} vs {}", s2, s1);
            }
        }
    }
}
