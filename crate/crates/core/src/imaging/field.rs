//! Procedural occlusion fields: per-pixel attenuation, occluder-emitted
//! light, and the metadata describing one degradation event.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Upper bound on the attenuation change between adjacent pixels that a
/// synthesized field guarantees across its margin band.
pub const ALPHA_RAMP_BOUND: f32 = 0.25;

/// Attenuation at or below this cut counts as complete occlusion by default.
pub const DEFAULT_TAU_COMPLETE: f32 = 0.05;
/// Attenuation at or above this cut counts as non-occluded by default.
pub const DEFAULT_TAU_PARTIAL: f32 = 0.95;

/// Relative boundary jitter applied to blob radii.
const JITTER_AMPLITUDE: f32 = 0.3;
/// Value-noise cell size in pixels for the boundary jitter.
const JITTER_CELL: usize = 12;
/// Snap tolerance for pinning deep-core attenuation to the floor exactly.
const FLOOR_SNAP: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccluderKind {
    Dirt,
    Raindrop,
    MuddyWater,
    Particle,
}

impl OccluderKind {
    pub const ALL: [OccluderKind; 4] = [
        OccluderKind::Dirt,
        OccluderKind::Raindrop,
        OccluderKind::MuddyWater,
        OccluderKind::Particle,
    ];

    /// Thickness flag: 0 for thin occluders, 1 for thick ones.
    pub fn beta(self) -> u8 {
        match self {
            OccluderKind::Dirt => 0,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OccluderKind::Dirt => "dirt",
            OccluderKind::Raindrop => "raindrop",
            OccluderKind::MuddyWater => "muddy_water",
            OccluderKind::Particle => "particle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dirt" => Ok(OccluderKind::Dirt),
            "raindrop" => Ok(OccluderKind::Raindrop),
            "muddy_water" | "muddy" => Ok(OccluderKind::MuddyWater),
            "particle" | "particles" => Ok(OccluderKind::Particle),
            other => Err(Error::Config(format!("unknown occluder kind '{other}'"))),
        }
    }

    /// Minimum attenuation the kind leaves in a blob core. Opacity grows
    /// raindrop < muddy water < particle; dirt stays thin.
    pub fn default_alpha_floor(self) -> f32 {
        match self {
            OccluderKind::Dirt => 0.55,
            OccluderKind::Raindrop => 0.35,
            OccluderKind::MuddyWater => 0.15,
            OccluderKind::Particle => 0.02,
        }
    }

    /// Light the occluder itself contributes, per channel in `[0, 1]`.
    fn base_intensification(self) -> [f32; 3] {
        match self {
            OccluderKind::Dirt => [0.45, 0.40, 0.33],
            OccluderKind::Raindrop => [0.55, 0.58, 0.62],
            OccluderKind::MuddyWater => [0.35, 0.25, 0.15],
            OccluderKind::Particle => [0.20, 0.20, 0.20],
        }
    }

    /// Near-constant underexposed value of a fully blocked region.
    fn complete_value(self) -> [f32; 3] {
        match self {
            OccluderKind::Dirt => [0.06, 0.06, 0.06],
            OccluderKind::Raindrop => [0.08, 0.09, 0.11],
            OccluderKind::MuddyWater => [0.10, 0.07, 0.04],
            OccluderKind::Particle => [0.03, 0.03, 0.03],
        }
    }
}

impl std::fmt::Display for OccluderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters of one synthetic degradation draw.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub occluder_kind: OccluderKind,
    pub blob_count_range: (usize, usize),
    pub blob_radius_range: (f32, f32),
    pub alpha_floor: f32,
    pub psf_radius_range: (f32, f32),
    pub seed: u64,
}

impl DegradationSpec {
    /// Defaults tuned for 64x64 synthesis; radii scale with resolution via
    /// [`DegradationSpec::scaled_for`].
    pub fn default_for(kind: OccluderKind, seed: u64) -> Self {
        let (blob_count_range, blob_radius_range, psf_radius_range) = match kind {
            OccluderKind::Dirt => ((2, 5), (6.0, 12.0), (1.5, 3.0)),
            OccluderKind::Raindrop => ((2, 5), (6.0, 12.0), (2.0, 3.5)),
            OccluderKind::MuddyWater => ((1, 3), (9.0, 16.0), (2.0, 3.5)),
            OccluderKind::Particle => ((2, 5), (6.0, 12.0), (2.0, 3.5)),
        };
        Self {
            occluder_kind: kind,
            blob_count_range,
            blob_radius_range,
            alpha_floor: kind.default_alpha_floor(),
            psf_radius_range,
            seed,
        }
    }

    /// Rescales blob radii for a different target resolution (reference 64px).
    pub fn scaled_for(mut self, min_dim: usize) -> Self {
        let s = min_dim as f32 / 64.0;
        self.blob_radius_range = (self.blob_radius_range.0 * s, self.blob_radius_range.1 * s);
        self
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 {
            return Err(Error::Config("field dimensions must be positive".into()));
        }
        if self.blob_count_range.0 > self.blob_count_range.1 {
            return Err(Error::Config("empty blob_count_range".into()));
        }
        let (r_lo, r_hi) = self.blob_radius_range;
        if !(r_lo.is_finite() && r_hi.is_finite()) || r_lo <= 0.0 || r_lo > r_hi {
            return Err(Error::Config("invalid blob_radius_range".into()));
        }
        let min_dim = height.min(width) as f32;
        if 2.0 * r_hi > min_dim {
            return Err(Error::Config(format!(
                "blob radius {r_hi} exceeds the {height}x{width} image"
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha_floor) {
            return Err(Error::Config("alpha_floor must lie in [0, 1]".into()));
        }
        if self.occluder_kind.beta() == 0 && self.alpha_floor <= DEFAULT_TAU_COMPLETE * 2.0 {
            return Err(Error::Config(format!(
                "thin occluder floor {} would reach the complete-occlusion cut",
                self.alpha_floor
            )));
        }
        let (p_lo, p_hi) = self.psf_radius_range;
        if !(p_lo.is_finite() && p_hi.is_finite()) || p_lo < 0.0 || p_lo > p_hi {
            return Err(Error::Config("invalid psf_radius_range".into()));
        }
        Ok(())
    }
}

/// Ground truth of one degradation event.
#[derive(Clone, Debug)]
pub struct OcclusionField {
    /// Per-pixel attenuation ratio in `[0, 1]` (0 blocked, 1 clear).
    pub alpha: Array2<f32>,
    /// Light contributed by the occluder itself, `[H, W, C]` in `[0, 1]`.
    pub intensification: ImageTensor,
    /// Constant value of fully blocked regions, one entry per channel.
    pub complete_value: Vec<f32>,
    /// 0 for thin occlusions, 1 for thick ones.
    pub beta: u8,
    pub occluder_kind: OccluderKind,
    /// Abstract defocus distance; doubles as the blur radius in pixels.
    pub defocus_distance: f32,
}

impl OcclusionField {
    pub fn height(&self) -> usize {
        self.alpha.dim().0
    }

    pub fn width(&self) -> usize {
        self.alpha.dim().1
    }

    pub fn channels(&self) -> usize {
        self.intensification.channels()
    }
}

/// Bilinearly interpolated value noise in `[0, 1]` on a coarse grid.
struct ValueNoise {
    grid: Array2<f32>,
    cell: f32,
}

impl ValueNoise {
    fn new(height: usize, width: usize, cell: usize, rng: &mut ChaCha8Rng) -> Self {
        let gh = height / cell + 2;
        let gw = width / cell + 2;
        let grid = Array2::from_shape_fn((gh, gw), |_| rng.gen::<f32>());
        Self {
            grid,
            cell: cell as f32,
        }
    }

    fn at(&self, y: usize, x: usize) -> f32 {
        let fy = y as f32 / self.cell;
        let fx = x as f32 / self.cell;
        let y0 = fy as usize;
        let x0 = fx as usize;
        let ty = fy - y0 as f32;
        let tx = fx - x0 as f32;
        let g = &self.grid;
        let (gh, gw) = g.dim();
        let y1 = (y0 + 1).min(gh - 1);
        let x1 = (x0 + 1).min(gw - 1);
        let top = g[(y0, x0)] * (1.0 - tx) + g[(y0, x1)] * tx;
        let bot = g[(y1, x0)] * (1.0 - tx) + g[(y1, x1)] * tx;
        top * (1.0 - ty) + bot * ty
    }
}

fn smoothstep(t: f32) -> f32 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Draws a deterministic occlusion field.
///
/// Blobs are discs with noise-jittered boundaries. Attenuation ramps from the
/// kind's floor inside a blob core up to 1 across a margin band whose width
/// follows the sampled defocus radius, keeping adjacent-pixel steps within
/// [`ALPHA_RAMP_BOUND`]. Blob cores are clamped wide enough that thick kinds
/// always reach their floor exactly.
pub fn synthesize_field(
    spec: &DegradationSpec,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<OcclusionField> {
    spec.validate(height, width)?;
    if channels == 0 {
        return Err(Error::Config("channel count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let psf_radius = sample_range(&mut rng, spec.psf_radius_range);
    let blob_count = rng.gen_range(spec.blob_count_range.0..=spec.blob_count_range.1);

    // Margin half-width: wide enough for the ramp bound given the boundary
    // jitter slope, and at least two defocus radii.
    let max_r = spec.blob_radius_range.1;
    let grad_bound = 1.0 + max_r * JITTER_AMPLITUDE / JITTER_CELL as f32;
    let m_min = 0.75 * (1.0 - spec.alpha_floor) * grad_bound / ALPHA_RAMP_BOUND;
    let margin = m_min.max(2.0 * psf_radius);

    let jitter = ValueNoise::new(height, width, JITTER_CELL, &mut rng);

    let mut blobs = Vec::with_capacity(blob_count);
    for _ in 0..blob_count {
        let cy = rng.gen_range(0.0..height as f32);
        let cx = rng.gen_range(0.0..width as f32);
        let r = sample_range(&mut rng, spec.blob_radius_range).max(1.3 * margin);
        blobs.push((cy, cx, r));
    }

    let floor = spec.alpha_floor;
    let alpha = Array2::from_shape_fn((height, width), |(y, x)| {
        if blobs.is_empty() {
            return 1.0;
        }
        let j = 1.0 + JITTER_AMPLITUDE * (jitter.at(y, x) - 0.5);
        let mut signed = f32::INFINITY;
        for &(cy, cx, r) in &blobs {
            let dy = y as f32 + 0.5 - cy;
            let dx = x as f32 + 0.5 - cx;
            let d = (dy * dy + dx * dx).sqrt() - r * j;
            signed = signed.min(d);
        }
        let ramp = smoothstep((signed + margin) / (2.0 * margin));
        let a = floor + (1.0 - floor) * ramp;
        if a <= floor + FLOOR_SNAP {
            floor
        } else {
            a
        }
    });

    let tint = ValueNoise::new(height, width, JITTER_CELL * 2, &mut rng);
    let base = spec.occluder_kind.base_intensification();
    let intensification = ImageTensor::from_fn(height, width, channels, |y, x, c| {
        let b = base[c.min(2)];
        (b + 0.1 * (tint.at(y, x) - 0.5)).clamp(0.0, 1.0)
    });

    let complete = spec.occluder_kind.complete_value();
    let complete_value = (0..channels).map(|c| complete[c.min(2)]).collect();

    Ok(OcclusionField {
        alpha,
        intensification,
        complete_value,
        beta: spec.occluder_kind.beta(),
        occluder_kind: spec.occluder_kind,
        defocus_distance: psf_radius,
    })
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}
