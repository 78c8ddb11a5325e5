//! Vector-drawn face world.
//!
//! Faces are composed of ellipses, arcs and line segments in normalized
//! `[0, 1]²` image coordinates and rasterized with 4×4 supersampling. The
//! whole head is sheared horizontally by `tan(pose)`; every other element is
//! mirror-symmetric about the vertical center line, so `render(pose = p)` is
//! the mirror of `render(pose = -p)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::seed;

pub const POSE_RANGE: (f64, f64) = (-30.0, 30.0);
pub const SMILE_RANGE: (f64, f64) = (-1.0, 1.0);
pub const AGE_RANGE: (f64, f64) = (0.0, 1.0);
pub const SUPPORTED_RESOLUTIONS: [usize; 2] = [32, 64];

const SUPERSAMPLE: usize = 4;
const IDENTITY_SALT: u64 = 0x5EED_FACE_0000_0001;

/// Ground-truth generative factors of one rendered face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorVector {
    pub identity_id: u32,
    /// Degrees; realized as horizontal shear of the head.
    pub pose: f64,
    /// Mouth-arc curvature.
    pub smile: f64,
    /// Wrinkle density, desaturation and hair graying.
    pub age: f64,
}

/// Continuous factors only, as predicted by the factor regressor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousFactors {
    pub pose: f64,
    pub smile: f64,
    pub age: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Pose,
    Smile,
    Age,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Pose, Factor::Smile, Factor::Age];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Pose => "pose",
            Factor::Smile => "smile",
            Factor::Age => "age",
        }
    }

    pub fn range(self) -> (f64, f64) {
        match self {
            Factor::Pose => POSE_RANGE,
            Factor::Smile => SMILE_RANGE,
            Factor::Age => AGE_RANGE,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pose" => Ok(Factor::Pose),
            "smile" => Ok(Factor::Smile),
            "age" => Ok(Factor::Age),
            other => Err(Error::InvalidParameter(format!("unknown factor `{other}`"))),
        }
    }
}

impl ContinuousFactors {
    pub fn get(&self, f: Factor) -> f64 {
        match f {
            Factor::Pose => self.pose,
            Factor::Smile => self.smile,
            Factor::Age => self.age,
        }
    }
}

impl FactorVector {
    pub fn new(identity_id: u32, pose: f64, smile: f64, age: f64) -> Self {
        Self {
            identity_id,
            pose,
            smile,
            age,
        }
    }

    pub fn continuous(&self) -> ContinuousFactors {
        ContinuousFactors {
            pose: self.pose,
            smile: self.smile,
            age: self.age,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for f in Factor::ALL {
            let v = self.continuous().get(f);
            let (lo, hi) = f.range();
            if !(lo..=hi).contains(&v) {
                return Err(Error::FactorOutOfRange {
                    name: f.name(),
                    value: v,
                    min: lo,
                    max: hi,
                });
            }
        }
        Ok(())
    }
}

/// Appearance attributes fixed by the identity id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityAttributes {
    /// Face height / width relative to the base shape, in `[0.85, 1.15]`.
    pub aspect: f64,
    /// Eye offset from the center line as a fraction of face half-width, `[0.30, 0.50]`.
    pub eye_spacing: f64,
    /// Skin hue in `[0, 1)`.
    pub base_hue: f64,
    /// Hair hue in `[0, 1)`.
    pub hair_hue: f64,
    /// Hair value (darkness) in `[0.15, 0.55]`.
    pub hair_value: f64,
}

impl IdentityAttributes {
    /// Seeded hash of the identity id: SplitMix64 over `id ^ IDENTITY_SALT`, one draw per attribute.
    pub fn from_id(identity_id: u32) -> Self {
        let h0 = seed::mix64(identity_id as u64 ^ IDENTITY_SALT);
        let h1 = seed::mix64(h0);
        let h2 = seed::mix64(h1);
        let h3 = seed::mix64(h2);
        let h4 = seed::mix64(h3);
        Self {
            aspect: 0.85 + 0.30 * seed::unit(h0),
            eye_spacing: 0.30 + 0.20 * seed::unit(h1),
            base_hue: seed::unit(h2),
            hair_hue: seed::unit(h3),
            hair_value: 0.15 + 0.40 * seed::unit(h4),
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn gray_of(c: [f64; 3]) -> [f64; 3] {
    let l = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    [l, l, l]
}

/// Distance from `p` to segment `a–b`.
fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Precomputed per-face geometry and palette.
struct Face {
    shear: f64,
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    eye_x: f64,
    eye_y: f64,
    smile: f64,
    age: f64,
    skin: [f64; 3],
    nose: [f64; 3],
    hair: [f64; 3],
    wrinkle: [f64; 3],
}

const BG_TOP: [f64; 3] = [0.80, 0.82, 0.86];
const BG_BOTTOM: [f64; 3] = [0.60, 0.64, 0.70];
const SCLERA: [f64; 3] = [0.95, 0.95, 0.93];
const PUPIL: [f64; 3] = [0.08, 0.08, 0.12];
const LIPS: [f64; 3] = [0.60, 0.12, 0.18];

impl Face {
    fn new(f: &FactorVector) -> Self {
        let id = IdentityAttributes::from_id(f.identity_id);
        let half_w = 0.27;
        let half_h = 0.27 * 1.2 * id.aspect;
        let age = f.age;
        let skin0 = hsv(id.base_hue, 0.45, 0.88);
        let skin = mix(skin0, gray_of(skin0), 0.6 * age);
        let hair0 = hsv(id.hair_hue, 0.65, id.hair_value);
        let hair = mix(hair0, [0.72, 0.72, 0.72], 0.6 * age);
        Self {
            shear: (f.pose.to_radians()).tan() * 0.9,
            cx: 0.5,
            cy: 0.53,
            half_w,
            half_h,
            eye_x: id.eye_spacing * half_w,
            eye_y: -0.22 * half_h,
            smile: f.smile,
            age,
            skin,
            nose: [skin[0] * 0.72, skin[1] * 0.72, skin[2] * 0.72],
            hair,
            wrinkle: [skin[0] * 0.55, skin[1] * 0.55, skin[2] * 0.55],
        }
    }

    fn shade(&self, u: f64, v: f64) -> [f64; 3] {
        let y = v - self.cy;
        let x = u - self.cx + self.shear * y;
        let mut color = mix(BG_TOP, BG_BOTTOM, v);

        // hair cap behind the face
        let (hx, hy) = (x / (self.half_w * 1.15), (y + 0.05) / (self.half_h * 1.02));
        if hx * hx + hy * hy <= 1.0 && y < 0.02 {
            color = self.hair;
        }

        let (fx, fy) = (x / self.half_w, y / self.half_h);
        if fx * fx + fy * fy > 1.0 {
            return color;
        }
        color = self.skin;

        // forehead wrinkles fade in one after another as age grows
        for i in 0..3 {
            let alpha = (3.0 * self.age - i as f64).clamp(0.0, 1.0) * 0.7;
            if alpha <= 0.0 {
                continue;
            }
            let wy = -self.half_h * (0.50 + 0.11 * i as f64);
            let d = seg_dist((x, y), (-0.45 * self.half_w, wy), (0.45 * self.half_w, wy));
            if d < 0.012 {
                color = mix(color, self.wrinkle, alpha);
            }
        }
        // nasolabial folds
        if self.age > 0.0 {
            for side in [-1.0, 1.0] {
                let d = seg_dist(
                    (x, y),
                    (side * 0.10, 0.02 * self.half_h),
                    (side * 0.15, 0.30 * self.half_h),
                );
                if d < 0.010 {
                    color = mix(color, self.wrinkle, 0.6 * self.age);
                }
            }
        }

        // eyes
        for side in [-1.0, 1.0] {
            let (ex, ey) = (x - side * self.eye_x, y - self.eye_y);
            let r2 = ex * ex + ey * ey;
            if r2 <= 0.055 * 0.055 {
                color = if r2 <= 0.030 * 0.030 { PUPIL } else { SCLERA };
            }
        }

        // nose
        if seg_dist((x, y), (0.0, -0.10 * self.half_h), (0.0, 0.12 * self.half_h)) < 0.014 {
            color = self.nose;
        }

        // mouth arc: corners rise when smiling
        let mouth_y = 0.45 * self.half_h;
        let mouth_w = 0.13;
        if x.abs() <= mouth_w {
            let t = x / mouth_w;
            let curve = mouth_y + self.smile * 0.07 * (0.5 - t * t);
            if (y - curve).abs() <= 0.02 {
                color = LIPS;
            }
        }
        color
    }
}

/// Renders `factors` at `resolution × resolution` with 4×4 supersampling.
pub fn render(factors: &FactorVector, resolution: usize) -> Result<ImageTensor> {
    factors.validate()?;
    if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
        return Err(Error::InvalidParameter(format!(
            "resolution {resolution} not in {SUPPORTED_RESOLUTIONS:?}"
        )));
    }
    Ok(render_unchecked(factors, resolution))
}

/// Rendering without the resolution whitelist; used for small test instances.
pub fn render_unchecked(factors: &FactorVector, resolution: usize) -> ImageTensor {
    let face = Face::new(factors);
    let r = resolution as f64;
    let ss = SUPERSAMPLE as f64;
    let mut pixels = Vec::with_capacity(resolution * resolution * 3);
    for py in 0..resolution {
        for px in 0..resolution {
            let mut acc = [0.0f64; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = (px as f64 + (sx as f64 + 0.5) / ss) / r;
                    let v = (py as f64 + (sy as f64 + 0.5) / ss) / r;
                    let c = face.shade(u, v);
                    acc[0] += c[0];
                    acc[1] += c[1];
                    acc[2] += c[2];
                }
            }
            let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            pixels.extend(acc.iter().map(|c| (c / n).clamp(0.0, 1.0) as f32));
        }
    }
    ImageTensor::new(resolution, pixels).expect("renderer produces a full finite image")
}

/// Mask of pixels whose center lies on the face ellipse (used to size face-paint patches).
pub fn face_mask(factors: &FactorVector, resolution: usize) -> Vec<bool> {
    let face = Face::new(factors);
    let r = resolution as f64;
    (0..resolution * resolution)
        .map(|i| {
            let (py, px) = (i / resolution, i % resolution);
            let (u, v) = ((px as f64 + 0.5) / r, (py as f64 + 0.5) / r);
            let y = v - face.cy;
            let x = u - face.cx + face.shear * y;
            (x / face.half_w).powi(2) + (y / face.half_h).powi(2) <= 1.0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn face(pose: f64, smile: f64, age: f64) -> FactorVector {
        FactorVector::new(7, pose, smile, age)
    }

    #[test]
    fn frontal_neutral_face_is_symmetric() {
        let im = render(&face(0.0, 0.0, 0.4), 64).unwrap();
        assert!(im.mean_abs_diff(&im.mirrored()) < 1e-3);
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render(&face(12.0, -0.3, 0.7), 32).unwrap();
        let b = render(&face(12.0, -0.3, 0.7), 32).unwrap();
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn opposite_poses_mirror_each_other() {
        for res in [32, 64] {
            let a = render(&face(20.0, 0.4, 0.2), res).unwrap();
            let b = render(&face(-20.0, 0.4, 0.2), res).unwrap();
            let d = a.mean_abs_diff(&b.mirrored());
            assert!(d < 1e-2, "res {res}: {d}");
            // and the two poses are genuinely different images
            assert!(a.mean_abs_diff(&b) > 1e-2);
        }
    }

    #[test]
    fn out_of_range_factor_names_the_factor() {
        let err = render(&face(45.0, 0.0, 0.0), 32).unwrap_err();
        assert!(err.to_string().contains("pose"), "{err}");
        let err = render(&face(0.0, 1.5, 0.0), 32).unwrap_err();
        assert!(err.to_string().contains("smile"), "{err}");
        let err = render(&face(0.0, 0.0, -0.1), 32).unwrap_err();
        assert!(err.to_string().contains("age"), "{err}");
    }

    #[test]
    fn unsupported_resolution_rejected() {
        assert!(render(&face(0.0, 0.0, 0.0), 48).is_err());
    }

    #[test]
    fn identity_attributes_are_stable_and_in_range() {
        for id in 0..200 {
            let a = IdentityAttributes::from_id(id);
            assert_eq!(a, IdentityAttributes::from_id(id));
            assert!((0.85..=1.15).contains(&a.aspect));
            assert!((0.30..=0.50).contains(&a.eye_spacing));
            assert!((0.0..1.0).contains(&a.base_hue));
        }
        assert_ne!(IdentityAttributes::from_id(1), IdentityAttributes::from_id(2));
    }

    #[test]
    fn factors_move_pixels_monotonically() {
        // Larger factor changes produce larger image changes along each axis.
        let base = render(&face(0.0, 0.0, 0.0), 64).unwrap();
        for (small, large) in [
            (face(5.0, 0.0, 0.0), face(15.0, 0.0, 0.0)),
            (face(0.0, 0.2, 0.0), face(0.0, 0.8, 0.0)),
            (face(0.0, 0.0, 0.2), face(0.0, 0.0, 0.8)),
        ] {
            let ds = base.mean_abs_diff(&render(&small, 64).unwrap());
            let dl = base.mean_abs_diff(&render(&large, 64).unwrap());
            assert!(dl > ds && ds > 0.0, "{ds} vs {dl}");
        }
    }
}
