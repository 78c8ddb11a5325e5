//! Multi-scale SSIM with an 11×11 Gaussian window (σ = 1.5), valid-mode
//! filtering and 2×2 average-pool down-sampling between scales.
//!
//! The number of scales is the count of dyadic sizes that still fit the
//! window, capped at five: three at 64×64, two at 32×32. Scale weights are the
//! leading entries of the standard five-scale set, renormalized to sum to 1.

use super::check_pair;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const MS_SSIM_BASE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub fn num_scales(resolution: usize) -> usize {
    let mut n = 0;
    let mut r = resolution;
    while r >= WINDOW && n < MS_SSIM_BASE_WEIGHTS.len() {
        n += 1;
        r /= 2;
    }
    n
}

pub fn ms_ssim_weights(scales: usize) -> Vec<f64> {
    let w = &MS_SSIM_BASE_WEIGHTS[..scales];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn gaussian() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode Gaussian filter of a square plane.
fn filter(plane: &[f64], r: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let o = r + 1 - WINDOW;
    let mut tmp = vec![0.0; r * o];
    for y in 0..r {
        for x in 0..o {
            tmp[y * o + x] = (0..WINDOW).map(|k| g[k] * plane[y * r + x + k]).sum();
        }
    }
    let mut out = vec![0.0; o * o];
    for y in 0..o {
        for x in 0..o {
            out[y * o + x] = (0..WINDOW).map(|k| g[k] * tmp[(y + k) * o + x]).sum();
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_cs(a: &[f64], b: &[f64], r: usize, g: &[f64; WINDOW]) -> (f64, f64) {
    let mu_a = filter(a, r, g);
    let mu_b = filter(b, r, g);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (e_aa, e_bb, e_ab) = (filter(&aa, r, g), filter(&bb, r, g), filter(&ab, r, g));
    let n = mu_a.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let c = (2.0 * cov + C2) / (va + vb + C2);
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        cs += c;
        ssim += l * c;
    }
    (ssim / n, cs / n)
}

fn pool(plane: &[f64], r: usize) -> Vec<f64> {
    let h = r / 2;
    let mut out = vec![0.0; h * h];
    for y in 0..h {
        for x in 0..h {
            out[y * h + x] = 0.25
                * (plane[2 * y * r + 2 * x]
                    + plane[2 * y * r + 2 * x + 1]
                    + plane[(2 * y + 1) * r + 2 * x]
                    + plane[(2 * y + 1) * r + 2 * x + 1]);
        }
    }
    out
}

/// MS-SSIM averaged over the three colour channels.
pub fn ms_ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_pair(x, y)?;
    let r0 = x.resolution();
    let scales = num_scales(r0);
    if scales == 0 {
        return Err(Error::InvalidParameter(format!(
            "resolution {r0} is smaller than the {WINDOW}px SSIM window"
        )));
    }
    let weights = ms_ssim_weights(scales);
    let g = gaussian();
    let mut total = 0.0;
    for c in 0..3 {
        let mut a: Vec<f64> = x.pixels().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let mut b: Vec<f64> = y.pixels().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let mut r = r0;
        let mut prod = 1.0;
        for (s, &w) in weights.iter().enumerate() {
            let (ssim, cs) = ssim_cs(&a, &b, r, &g);
            let term = if s + 1 == scales { ssim } else { cs };
            prod *= term.max(0.0).powf(w);
            if s + 1 < scales {
                a = pool(&a, r);
                b = pool(&b, r);
                r /= 2;
            }
        }
        total += prod;
    }
    Ok(total / 3.0)
}

/// `1 − MS-SSIM`, clamped to `[0, 1]`.
pub fn ms_ssim_distortion(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    Ok((1.0 - ms_ssim(x, y)?).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{render, FactorVector};

    #[test]
    fn scale_counts_and_weights() {
        assert_eq!(num_scales(64), 3);
        assert_eq!(num_scales(32), 2);
        assert_eq!(num_scales(8), 0);
        for s in 1..=5 {
            assert!((ms_ssim_weights(s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let w3 = ms_ssim_weights(3);
        assert!((w3[0] - 0.0448 / 0.6305).abs() < 1e-12);
    }

    #[test]
    fn identical_images_have_zero_distortion() {
        for res in [32, 64] {
            let x = render(&FactorVector::new(1, 5.0, 0.3, 0.4), res).unwrap();
            assert_eq!(ms_ssim(&x, &x).unwrap(), 1.0);
            assert_eq!(ms_ssim_distortion(&x, &x).unwrap(), 0.0);
        }
    }

    #[test]
    fn symmetric_and_bounded() {
        let x = render(&FactorVector::new(1, 5.0, 0.3, 0.4), 64).unwrap();
        let y = render(&FactorVector::new(2, -5.0, -0.3, 0.7), 64).unwrap();
        let a = ms_ssim_distortion(&x, &y).unwrap();
        let b = ms_ssim_distortion(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-6);
        assert!(a > 0.0 && a <= 1.0);
    }

    #[test]
    fn distortion_grows_with_difference() {
        let base = FactorVector::new(3, 0.0, 0.0, 0.5);
        let x = render(&base, 64).unwrap();
        let near = render(&FactorVector { pose: 2.0, ..base }, 64).unwrap();
        let far = render(&FactorVector { pose: 20.0, ..base }, 64).unwrap();
        assert!(ms_ssim_distortion(&x, &near).unwrap() < ms_ssim_distortion(&x, &far).unwrap());
    }

    #[test]
    fn too_small_rejected() {
        let x = ImageTensor::filled(8, [0.5; 3]);
        assert!(ms_ssim(&x, &x).is_err());
    }
}
