//! The `H x W x C` float image carrier used across the simulator, the data
//! pipeline and the network boundary.

use ndarray::Array3;

use crate::error::{Error, Result};

/// Dense image of 32-bit floats, stored `[height, width, channels]`.
///
/// The value range is a convention of the surrounding pipeline: the simulator
/// and on-disk datasets use `[0, 1]`, the network operates in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Self {
        Self { data }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, channels)),
        }
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            data: Array3::from_elem((height, width, channels), value),
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        Self {
            data: Array3::from_shape_fn((height, width, channels), |(y, x, c)| f(y, x, c)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y, x, c)]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        self.data[(y, x, c)] = value;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.data.dim() == other.data.dim()
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        Self {
            data: self.data.mapv(&mut f),
        }
    }

    pub fn clip(&self, lo: f32, hi: f32) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn mean(&self) -> f64 {
        let n = self.data.len();
        if n == 0 {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / n as f64
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Errors when any entry is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Errors when any entry leaves `[lo - tol, hi + tol]`.
    pub fn check_range(&self, lo: f32, hi: f32, tol: f32, context: &str) -> Result<()> {
        for &v in self.data.iter() {
            if !(v >= lo - tol && v <= hi + tol) {
                return Err(Error::OutOfRange {
                    context: context.to_string(),
                    value: v,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }

    /// Flat `HWC`-order copy of the pixel data.
    pub fn to_flat(&self) -> Vec<f32> {
        self.data.iter().copied().collect()
    }

    pub fn from_flat(height: usize, width: usize, channels: usize, flat: Vec<f32>) -> Result<Self> {
        let data = Array3::from_shape_vec((height, width, channels), flat)
            .map_err(|e| Error::shape("from_flat", format!("{height}x{width}x{channels}"), e))?;
        Ok(Self { data })
    }
}
