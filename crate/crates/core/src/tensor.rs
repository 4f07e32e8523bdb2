//! Rank-3 activation maps flowing between network blocks.

use ndarray::Array3;

use crate::error::{Error, Result};

/// A height x width x channels activation tensor.
///
/// Heights, widths and channel counts are always >= 1; forward operations on
/// finite input must produce finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f64>,
}

impl FeatureMap {
    /// Wraps a dense array, rejecting empty dimensions.
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (h, w, c) = values.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Config(format!(
                "feature map dimensions must all be >= 1, got {h}x{w}x{c}"
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(Array3::zeros((height, width, channels)))
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Errors unless every entry is finite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{context}: non-finite values in feature map")))
        }
    }
}

impl TryFrom<Array3<f64>> for FeatureMap {
    type Error = Error;

    fn try_from(values: Array3<f64>) -> Result<Self> {
        Self::new(values)
    }
}
