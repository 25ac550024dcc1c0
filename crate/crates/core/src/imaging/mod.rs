//! Deterministic forward simulator of occlusion physics: defocus kernels,
//! occlusion-field synthesis, and composition of degraded observations.
//!
//! Everything here is a pure function of its inputs; samples can be composed
//! in parallel with no shared state.

mod compose;
mod field;
mod psf;

pub use compose::{
    convolve, decompose_regions, degrade, degrade_unclipped, degrade_with, CompositionOrder,
    RegionMasks,
};
pub use field::{
    synthesize_field, DegradationSpec, OccluderKind, OcclusionField, ALPHA_RAMP_BOUND,
    DEFAULT_TAU_COMPLETE, DEFAULT_TAU_PARTIAL,
};
pub use psf::{make_disc_psf, make_gaussian_psf, min_kernel_size, PsfKernel};
