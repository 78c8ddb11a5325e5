//! Out-of-domain corruptions: painted faces and hand-like occluders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OodKind {
    /// Seeded striped texture over a disc around the face center.
    FacePaint,
    /// Opaque rectangle covering 5–15% of the image.
    Occluder,
    None,
}

pub fn apply_ood(image: &ImageTensor, kind: OodKind, seed: u64) -> ImageTensor {
    match kind {
        OodKind::None => image.clone(),
        OodKind::FacePaint => face_paint(image, seed),
        OodKind::Occluder => occluder(image, seed),
    }
}

fn face_paint(image: &ImageTensor, seed: u64) -> ImageTensor {
    let mut rng = seed::item_rng(seed, "ood-paint", 0);
    let r = image.resolution();
    let rf = r as f64;
    let cx = 0.5 + rng.gen_range(-0.05..0.05);
    let cy = 0.56 + rng.gen_range(-0.04..0.04);
    let radius = rng.gen_range(0.14..0.17);
    let a = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let b = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let freq = rng.gen_range(3.0..7.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut out = image.clone();
    for y in 0..r {
        for x in 0..r {
            let (u, v) = ((x as f64 + 0.5) / rf, (y as f64 + 0.5) / rf);
            let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
            let alpha = 0.85 * ((radius - d) * rf + 0.5).clamp(0.0, 1.0);
            if alpha <= 0.0 {
                continue;
            }
            let t = 0.5
                + 0.5 * (std::f64::consts::TAU * freq * (u * theta.cos() + v * theta.sin()) + phase).sin();
            for c in 0..3 {
                let paint = a[c] + (b[c] - a[c]) * t;
                let old = image.get(y, x, c) as f64;
                out.set(y, x, c, (old + (paint - old) * alpha) as f32);
            }
        }
    }
    out
}

/// Integer rectangle size covering a fraction of the image within `[0.05, 0.15]`.
fn occluder_size(r: usize, frac: f64, aspect: f64) -> (usize, usize) {
    let total = (r * r) as f64;
    let area = frac * total;
    let w = ((area * aspect).sqrt().round() as usize).clamp(2, r);
    let mut h = ((area / w as f64).round() as usize).clamp(1, r);
    while ((w * h) as f64) < 0.05 * total && h < r {
        h += 1;
    }
    while ((w * h) as f64) > 0.15 * total && h > 1 {
        h -= 1;
    }
    (w, h)
}

fn occluder(image: &ImageTensor, seed: u64) -> ImageTensor {
    let mut rng = seed::item_rng(seed, "ood-occluder", 0);
    let r = image.resolution();
    let frac = rng.gen_range(0.06..0.14);
    let aspect = rng.gen_range(0.6..1.6);
    let (w, h) = occluder_size(r, frac, aspect);
    let x0 = rng.gen_range(0..=r - w);
    let y0 = rng.gen_range(r / 3..=r - h);
    let color = [
        rng.gen_range(0.55..0.95f32),
        rng.gen_range(0.35..0.75f32),
        rng.gen_range(0.25..0.65f32),
    ];
    let mut out = image.clone();
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            for (c, &v) in color.iter().enumerate() {
                out.set(y, x, c, v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::render::{face_mask, render, FactorVector};
    use crate::metrics::mse;

    fn sample() -> (FactorVector, ImageTensor) {
        let f = FactorVector::new(3, 10.0, 0.2, 0.5);
        (f, render(&f, 64).unwrap())
    }

    #[test]
    fn none_is_identity() {
        let (_, x) = sample();
        assert_eq!(apply_ood(&x, OodKind::None, 123), x);
    }

    #[test]
    fn corruptions_are_deterministic() {
        let (_, x) = sample();
        for kind in [OodKind::Occluder, OodKind::FacePaint] {
            assert_eq!(apply_ood(&x, kind, 5), apply_ood(&x, kind, 5));
        }
    }

    #[test]
    fn face_paint_covers_face_and_changes_image() {
        let (f, x) = sample();
        for s in 0..10 {
            let out = apply_ood(&x, OodKind::FacePaint, s);
            assert!(mse(&x, &out).unwrap() > 0.001);
            let mask = face_mask(&f, 64);
            let face_px = mask.iter().filter(|&&m| m).count();
            let changed = mask
                .iter()
                .enumerate()
                .filter(|(i, &m)| m && (0..3).any(|c| x.pixels()[i * 3 + c] != out.pixels()[i * 3 + c]))
                .count();
            assert!(changed as f64 >= 0.10 * face_px as f64, "seed {s}: {changed}/{face_px}");
        }
    }

    #[test]
    fn occluder_area_within_bounds() {
        let (_, x) = sample();
        for s in 0..50 {
            let out = apply_ood(&x, OodKind::Occluder, s);
            let changed = (0..64 * 64)
                .filter(|i| (0..3).any(|c| x.pixels()[i * 3 + c] != out.pixels()[i * 3 + c]))
                .count() as f64
                / 4096.0;
            // rectangle pixels matching the background by chance are not counted
            assert!(changed <= 0.15 && changed > 0.04, "seed {s}: {changed}");
            assert!(mse(&x, &out).unwrap() > 0.0);
        }
        for r in [32, 64] {
            for frac in [0.05, 0.1, 0.15] {
                for aspect in [0.6, 1.0, 1.6] {
                    let (w, h) = occluder_size(r, frac, aspect);
                    let f = (w * h) as f64 / (r * r) as f64;
                    assert!((0.05..=0.15).contains(&f), "{r} {frac} {aspect}: {f}");
                }
            }
        }
    }
}
