//! Defocus point-spread-function kernels.
//!
//! The defocus of an occluder a few centimetres in front of the lens is
//! modelled as a circle of confusion: an anti-aliased disc whose radius grows
//! with the occluder distance. A Gaussian variant is available as an
//! alternative kernel family.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Subpixel grid used when rasterising the disc edge.
const COVERAGE_SUBSAMPLES: usize = 16;

/// Normalized 2-D blur kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct PsfKernel {
    weights: Array2<f32>,
    radius_px: f32,
    defocus_distance: f32,
}

impl PsfKernel {
    /// Validates and wraps raw weights: square, odd-sized, non-negative,
    /// summing to one within 1e-6.
    pub fn new(weights: Array2<f32>, radius_px: f32, defocus_distance: f32) -> Result<Self> {
        let (kh, kw) = weights.dim();
        if kh != kw {
            return Err(Error::shape(
                "psf weights",
                "square kernel",
                format!("{kh}x{kw}"),
            ));
        }
        if kh % 2 == 0 {
            return Err(Error::KernelSizeEven(kh));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::NonFinite("psf weights".into()));
        }
        let sum: f64 = weights.iter().map(|&w| w as f64).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "psf weights must sum to 1 within 1e-6, got {sum}"
            )));
        }
        Ok(Self {
            weights,
            radius_px,
            defocus_distance,
        })
    }

    pub fn weights(&self) -> &Array2<f32> {
        &self.weights
    }

    pub fn size(&self) -> usize {
        self.weights.dim().0
    }

    pub fn radius_px(&self) -> f32 {
        self.radius_px
    }

    pub fn defocus_distance(&self) -> f32 {
        self.defocus_distance
    }

    pub fn is_delta(&self) -> bool {
        let k = self.size();
        let c = k / 2;
        self.weights[(c, c)] == 1.0 && self.weights.iter().map(|&w| w as f64).sum::<f64>() == 1.0
    }

    /// Identity kernel of the given odd size.
    pub fn delta(kernel_size: usize) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::KernelSizeEven(kernel_size));
        }
        let mut w = Array2::zeros((kernel_size, kernel_size));
        let c = kernel_size / 2;
        w[(c, c)] = 1.0;
        Self::new(w, 0.0, 0.0)
    }
}

/// Smallest legal odd kernel size for a disc of the given radius.
pub fn min_kernel_size(radius_px: f32) -> usize {
    2 * (radius_px.ceil() as usize) + 1
}

fn check_kernel_args(radius_px: f32, kernel_size: usize) -> Result<()> {
    if !radius_px.is_finite() || radius_px < 0.0 {
        return Err(Error::Config(format!(
            "psf radius must be finite and >= 0, got {radius_px}"
        )));
    }
    if kernel_size % 2 == 0 {
        return Err(Error::KernelSizeEven(kernel_size));
    }
    let required = min_kernel_size(radius_px);
    if kernel_size < required {
        return Err(Error::KernelTooSmall {
            size: kernel_size,
            radius: radius_px,
            required,
        });
    }
    Ok(())
}

/// Anti-aliased pillbox (circle of confusion) kernel, area-normalized.
///
/// Each cell's weight is the fraction of its area covered by the disc,
/// estimated on a 16x16 subpixel grid. Radii too small to cover any subpixel
/// collapse to the identity kernel.
pub fn make_disc_psf(radius_px: f32, kernel_size: usize) -> Result<PsfKernel> {
    check_kernel_args(radius_px, kernel_size)?;
    let c = (kernel_size / 2) as f32;
    let step = 1.0 / COVERAGE_SUBSAMPLES as f32;
    let r2 = radius_px * radius_px;
    let mut weights = Array2::zeros((kernel_size, kernel_size));
    let mut total = 0.0f64;
    for ky in 0..kernel_size {
        for kx in 0..kernel_size {
            let mut hits = 0usize;
            for sy in 0..COVERAGE_SUBSAMPLES {
                let dy = ky as f32 - c - 0.5 + (sy as f32 + 0.5) * step;
                for sx in 0..COVERAGE_SUBSAMPLES {
                    let dx = kx as f32 - c - 0.5 + (sx as f32 + 0.5) * step;
                    if dy * dy + dx * dx <= r2 {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f32 / (COVERAGE_SUBSAMPLES * COVERAGE_SUBSAMPLES) as f32;
            weights[(ky, kx)] = cov;
            total += cov as f64;
        }
    }
    if total == 0.0 {
        return PsfKernel::delta(kernel_size).map(|k| PsfKernel {
            radius_px,
            defocus_distance: radius_px,
            ..k
        });
    }
    weights.mapv_inplace(|w| (w as f64 / total) as f32);
    renormalize(&mut weights);
    PsfKernel::new(weights, radius_px, radius_px)
}

/// Truncated Gaussian kernel, the optional alternative blur family.
pub fn make_gaussian_psf(sigma: f32, kernel_size: usize) -> Result<PsfKernel> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Config(format!(
            "psf sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if kernel_size % 2 == 0 {
        return Err(Error::KernelSizeEven(kernel_size));
    }
    if sigma == 0.0 {
        return PsfKernel::delta(kernel_size);
    }
    let c = (kernel_size / 2) as f32;
    let inv = -0.5 / (sigma * sigma);
    let mut weights = Array2::from_shape_fn((kernel_size, kernel_size), |(ky, kx)| {
        let dy = ky as f32 - c;
        let dx = kx as f32 - c;
        ((dy * dy + dx * dx) * inv).exp()
    });
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    weights.mapv_inplace(|w| (w as f64 / total) as f32);
    renormalize(&mut weights);
    PsfKernel::new(weights, sigma, sigma)
}

/// Forces an exact unit sum by absorbing the f32 rounding residue into the
/// largest weight.
fn renormalize(weights: &mut Array2<f32>) {
    let sum: f64 = weights.iter().map(|&w| w as f64).sum();
    let residue = (1.0 - sum) as f32;
    if residue != 0.0 {
        let mut best = (0, 0);
        let mut best_w = f32::MIN;
        for ((y, x), &w) in weights.indexed_iter() {
            if w > best_w {
                best_w = w;
                best = (y, x);
            }
        }
        weights[best] += residue;
    }
}
