//! Composition of degraded images from a clean scene, an occlusion field and
//! a defocus kernel, plus the region bookkeeping that labels each pixel as
//! non-occluded, partially occluded or completely occluded.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::imaging::field::{OcclusionField, DEFAULT_TAU_COMPLETE, DEFAULT_TAU_PARTIAL};
use crate::imaging::psf::PsfKernel;

/// Where the per-pixel attenuation acts relative to the blur.
///
/// The default applies attenuation to the already-blurred terms; the
/// alternative attenuates the scene first and blurs the product.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionOrder {
    #[default]
    BlurThenAttenuate,
    AttenuateThenBlur,
}

/// Binary partition of the pixel grid by occlusion severity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    pub partial: Array2<bool>,
    pub complete: Array2<bool>,
    pub non_occluded: Array2<bool>,
}

impl RegionMasks {
    pub fn dims(&self) -> (usize, usize) {
        self.partial.dim()
    }

    /// True when every pixel belongs to exactly one region.
    pub fn is_partition(&self) -> bool {
        self.partial
            .iter()
            .zip(self.complete.iter())
            .zip(self.non_occluded.iter())
            .all(|((&p, &c), &n)| (p as u8 + c as u8 + n as u8) == 1)
    }
}

/// Splits a field by attenuation thresholds: complete at `alpha <= tau_c`,
/// non-occluded at `alpha >= tau_p`, partial in between.
pub fn decompose_regions(field: &OcclusionField, thresholds: (f32, f32)) -> Result<RegionMasks> {
    let (tau_c, tau_p) = thresholds;
    if !(0.0 <= tau_c && tau_c < tau_p && tau_p <= 1.0) {
        return Err(Error::Config(format!(
            "region thresholds must satisfy 0 <= tau_c < tau_p <= 1, got ({tau_c}, {tau_p})"
        )));
    }
    let complete = field.alpha.mapv(|a| a <= tau_c);
    let non_occluded = field.alpha.mapv(|a| a >= tau_p);
    let partial = field.alpha.mapv(|a| a > tau_c && a < tau_p);
    Ok(RegionMasks {
        partial,
        complete,
        non_occluded,
    })
}

/// Mirror-fold an index into `[0, n)` (true reflection, no edge repeat).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Per-channel 2-D convolution with reflect padding; output shape equals
/// input shape. Accumulates in f64.
pub fn convolve(image: &ImageTensor, psf: &PsfKernel) -> Result<ImageTensor> {
    image.check_finite("convolve input")?;
    let (h, w, c) = image.dims();
    let k = psf.size();
    let r = (k / 2) as isize;
    let weights = psf.weights();
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for ky in 0..k {
                    let sy = reflect_index(y as isize + ky as isize - r, h);
                    for kx in 0..k {
                        let sx = reflect_index(x as isize + kx as isize - r, w);
                        acc += weights[(ky, kx)] as f64 * image.get(sy, sx, ch) as f64;
                    }
                }
                out.set(y, x, ch, acc as f32);
            }
        }
    }
    Ok(out)
}

fn check_degrade_shapes(
    clean: &ImageTensor,
    field: &OcclusionField,
) -> Result<(usize, usize, usize)> {
    let (h, w, c) = clean.dims();
    if field.height() != h || field.width() != w || field.channels() != c {
        return Err(Error::shape(
            "degrade",
            format!("{h}x{w}x{c}"),
            format!(
                "field {}x{}x{}",
                field.height(),
                field.width(),
                field.channels()
            ),
        ));
    }
    Ok((h, w, c))
}

fn scale_by_alpha(img: &ImageTensor, alpha: &Array2<f32>, f: impl Fn(f32) -> f32) -> ImageTensor {
    let (h, w, c) = img.dims();
    ImageTensor::from_fn(h, w, c, |y, x, ch| f(alpha[(y, x)]) * img.get(y, x, ch))
}

fn add(a: &ImageTensor, b: &ImageTensor) -> ImageTensor {
    let (h, w, c) = a.dims();
    ImageTensor::from_fn(h, w, c, |y, x, ch| a.get(y, x, ch) + b.get(y, x, ch))
}

/// Degraded image before the final clip to `[0, 1]`; the linearity of the
/// composition in the scene only holds pre-clip.
pub fn degrade_unclipped(
    clean: &ImageTensor,
    field: &OcclusionField,
    psf: &PsfKernel,
    order: CompositionOrder,
) -> Result<ImageTensor> {
    let (h, w, c) = check_degrade_shapes(clean, field)?;
    clean.check_finite("degrade clean input")?;

    if field.beta == 0 {
        // Thin occluder: attenuated scene plus occluder-emitted light.
        let (scene_term, glow_term) = match order {
            CompositionOrder::BlurThenAttenuate => {
                let blurred_scene = convolve(clean, psf)?;
                let blurred_glow = convolve(&field.intensification, psf)?;
                (
                    scale_by_alpha(&blurred_scene, &field.alpha, |a| a),
                    scale_by_alpha(&blurred_glow, &field.alpha, |a| 1.0 - a),
                )
            }
            CompositionOrder::AttenuateThenBlur => {
                let s = scale_by_alpha(clean, &field.alpha, |a| a);
                let g = scale_by_alpha(&field.intensification, &field.alpha, |a| 1.0 - a);
                (convolve(&s, psf)?, convolve(&g, psf)?)
            }
        };
        return Ok(add(&scene_term, &glow_term));
    }

    // Thick occluder: full blurred scene, minus the scene over the occluded
    // support scaled by (1 - alpha), plus the blurred constant core.
    let masks = decompose_regions(field, (DEFAULT_TAU_COMPLETE, DEFAULT_TAU_PARTIAL))?;
    let occluded = ImageTensor::from_fn(h, w, c, |y, x, ch| {
        if masks.non_occluded[(y, x)] {
            0.0
        } else {
            clean.get(y, x, ch)
        }
    });
    let core = ImageTensor::from_fn(h, w, c, |y, x, ch| {
        if masks.complete[(y, x)] {
            field.complete_value[ch]
        } else {
            0.0
        }
    });
    let core_term = convolve(&core, psf)?;
    let (scene_term, partial_term) = match order {
        CompositionOrder::BlurThenAttenuate => {
            let blurred_scene = convolve(clean, psf)?;
            let blurred_occluded = convolve(&occluded, psf)?;
            (
                blurred_scene,
                scale_by_alpha(&blurred_occluded, &field.alpha, |a| a - 1.0),
            )
        }
        CompositionOrder::AttenuateThenBlur => {
            let pre = scale_by_alpha(&occluded, &field.alpha, |a| a - 1.0);
            (convolve(clean, psf)?, convolve(&pre, psf)?)
        }
    };
    Ok(add(&add(&scene_term, &partial_term), &core_term))
}

/// Composes a degraded observation from a clean scene, clipped to `[0, 1]`.
pub fn degrade_with(
    clean: &ImageTensor,
    field: &OcclusionField,
    psf: &PsfKernel,
    order: CompositionOrder,
) -> Result<ImageTensor> {
    Ok(degrade_unclipped(clean, field, psf, order)?.clip(0.0, 1.0))
}

/// [`degrade_with`] under the default composition order.
pub fn degrade(
    clean: &ImageTensor,
    field: &OcclusionField,
    psf: &PsfKernel,
) -> Result<ImageTensor> {
    degrade_with(clean, field, psf, CompositionOrder::default())
}
