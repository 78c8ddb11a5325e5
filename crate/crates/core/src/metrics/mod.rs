//! Distortion and editability measurements.

mod report;
mod ssim;

pub use report::{
    evaluate_editing, evaluate_reconstruction, Aggregate, EditItem, EditMode, EditRow, EditSpec, MetricsReport,
    Oracles, ReconRow,
};
pub use ssim::{ms_ssim, ms_ssim_distortion, ms_ssim_weights, MS_SSIM_BASE_WEIGHTS};

use crate::datagen::{Factor, FactorRegressor};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub(crate) fn check_pair(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    if x.resolution() != y.resolution() {
        return Err(Error::ShapeMismatch(format!(
            "images are {}x{} and {}x{}",
            x.resolution(),
            x.resolution(),
            y.resolution(),
            y.resolution()
        )));
    }
    Ok(())
}

/// Mean squared pixel difference over all channels. Accumulates in planar
/// order so the value matches the training-graph loss bit for bit.
pub fn mse(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_pair(x, y)?;
    let (a, b) = (x.to_tensor(), y.to_tensor());
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| {
            let d = (p - q) as f64;
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}

/// Signed change of `factor` predicted by the regressor, `after − before`.
pub fn edit_magnitude(reg: &FactorRegressor, before: &ImageTensor, after: &ImageTensor, factor: Factor) -> f64 {
    reg.predict(after).get(factor) - reg.predict(before).get(factor)
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_identities() {
        let a = ImageTensor::filled(32, [0.0; 3]);
        let b = ImageTensor::filled(32, [1.0; 3]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert!(mse(&a, &ImageTensor::filled(64, [0.0; 3])).is_err());
    }

    #[test]
    fn mean_std_small_cases() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }
}
