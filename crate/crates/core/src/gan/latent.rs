use pti_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for treating W+ rows as equal when collapsing to W.
pub const COLLAPSE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LatentSpace {
    W,
    WPlus,
}

impl LatentSpace {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "w" => Ok(Self::W),
            "wplus" | "w+" => Ok(Self::WPlus),
            _ => Err(Error::InvalidParameter(format!("unknown latent space `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::W => "w",
            Self::WPlus => "wplus",
        }
    }
}

/// A point in W (`[D]`) or W+ (`[L, D]`), stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    space: LatentSpace,
    dim: usize,
    values: Vec<f32>,
}

impl LatentCode {
    pub fn w(values: Vec<f32>) -> Result<Self> {
        Self::check_finite(&values)?;
        if values.is_empty() {
            return Err(Error::ShapeMismatch("empty latent code".into()));
        }
        Ok(Self {
            space: LatentSpace::W,
            dim: values.len(),
            values,
        })
    }

    pub fn wplus(rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        Self::check_finite(&values)?;
        if rows == 0 || dim == 0 || values.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "W+ code of {} values is not {rows}x{dim}",
                values.len()
            )));
        }
        Ok(Self {
            space: LatentSpace::WPlus,
            dim,
            values,
        })
    }

    fn check_finite(values: &[f32]) -> Result<()> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParameter("latent code has non-finite values".into()))
        }
    }

    pub fn space(&self) -> LatentSpace {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// 1 for W, L for W+.
    pub fn rows(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Style row consumed by synthesis layer `layer`.
    pub fn layer_row(&self, layer: usize) -> &[f32] {
        match self.space {
            LatentSpace::W => &self.values,
            LatentSpace::WPlus => self.row(layer),
        }
    }

    pub fn to_wplus(&self, layers: usize) -> Result<Self> {
        match self.space {
            LatentSpace::W => Self::wplus(layers, self.dim, self.values.repeat(layers)),
            LatentSpace::WPlus if self.rows() == layers => Ok(self.clone()),
            LatentSpace::WPlus => Err(Error::ShapeMismatch(format!(
                "W+ code has {} rows, expected {layers}",
                self.rows()
            ))),
        }
    }

    /// Succeeds iff every row equals the first within [`COLLAPSE_TOL`].
    pub fn collapse_to_w(&self) -> Result<Self> {
        if self.space == LatentSpace::W {
            return Ok(self.clone());
        }
        let first = self.row(0);
        for r in 1..self.rows() {
            let same = self
                .row(r)
                .iter()
                .zip(first)
                .all(|(&a, &b)| ((a as f64) - (b as f64)).abs() <= COLLAPSE_TOL);
            if !same {
                return Err(Error::NotCollapsible);
            }
        }
        Self::w(first.to_vec())
    }

    /// Euclidean distance over all values; shapes must agree.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        if self.space != other.space || self.values.len() != other.values.len() {
            return Err(Error::ShapeMismatch("latent codes have different shapes".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt())
    }

    /// `[rows, D]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.rows(), self.dim], self.values.clone())
    }

    /// Builds a code of `space` from a `[rows, D]` tensor.
    pub fn from_tensor(space: LatentSpace, t: &Tensor) -> Result<Self> {
        let dim = *t.shape().last().unwrap_or(&0);
        match space {
            LatentSpace::W if t.numel() == dim => Self::w(t.data().to_vec()),
            LatentSpace::W => Err(Error::ShapeMismatch(format!("{:?} is not a W code", t.shape()))),
            LatentSpace::WPlus => Self::wplus(t.numel() / dim.max(1), dim, t.data().to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn to_wplus_replicates_rows_and_collapses_back() {
        let w = LatentCode::w(vec![0.5, -1.0, 2.0]).unwrap();
        let p = w.to_wplus(7).unwrap();
        assert_eq!(p.rows(), 7);
        assert!((0..7).all(|r| p.row(r) == w.values()));
        assert_eq!(p.collapse_to_w().unwrap(), w);
    }

    #[test]
    fn perturbed_row_is_not_collapsible() {
        let mut v = vec![1.0f32; 4 * 3];
        v[7] += 1e-4;
        let p = LatentCode::wplus(4, 3, v).unwrap();
        assert!(matches!(p.collapse_to_w(), Err(Error::NotCollapsible)));
    }

    #[test]
    fn shape_and_finiteness_validated() {
        assert!(LatentCode::wplus(2, 3, vec![0.0; 5]).is_err());
        assert!(LatentCode::w(vec![f32::NAN]).is_err());
        assert!(LatentCode::w(vec![]).is_err());
        let p = LatentCode::wplus(3, 2, vec![0.0; 6]).unwrap();
        assert!(p.to_wplus(4).is_err());
    }

    proptest! {
        #[test]
        fn broadcast_round_trip(v in proptest::collection::vec(-10f32..10.0, 1..70), l in 1usize..12) {
            let w = LatentCode::w(v).unwrap();
            prop_assert_eq!(w.to_wplus(l).unwrap().collapse_to_w().unwrap(), w);
        }
    }
}
