//! Paired degraded/clean datasets: generation, on-disk layout, loading, and
//! the value-range conversion between storage (`[0, 1]`) and the network
//! domain (`[-1, 1]`).
//!
//! Layout under a dataset root:
//!
//! ```text
//! degraded/<id>.png   8-bit RGB observation
//! clean/<id>.png      8-bit RGB ground truth
//! alpha/<id>.png      16-bit gray attenuation map
//! masks/<id>_partial.png, masks/<id>_complete.png   16-bit gray binaries
//! manifest.json       versioned index with per-sample seeds and the split
//! ```

pub mod bases;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageReader, Luma, Rgb};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::imaging::{
    decompose_regions, degrade_with, make_disc_psf, min_kernel_size, synthesize_field,
    CompositionOrder, DegradationSpec, OccluderKind,
};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-sample entry in the manifest; enough to re-run the degradation draw.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub kind: OccluderKind,
    pub beta: u8,
    pub psf_radius: f32,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub resolution: (usize, usize),
    pub value_range: (f32, f32),
    pub samples: Vec<SampleMeta>,
    pub split: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn split_of(&self, sample_id: &str) -> Option<Split> {
        self.split.get(sample_id).copied()
    }

    pub fn ids_in(&self, split: Split) -> Vec<&SampleMeta> {
        self.samples
            .iter()
            .filter(|m| self.split_of(&m.sample_id) == Some(split))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        for meta in &manifest.samples {
            if !manifest.split.contains_key(&meta.sample_id) {
                return Err(Error::Manifest(format!(
                    "sample {} has no split label",
                    meta.sample_id
                )));
            }
        }
        Ok(manifest)
    }
}

/// Generation-time knobs that are not part of a degradation spec.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    /// Output resolution `(height, width)`; bases are center-cropped and
    /// resized to this.
    pub resolution: (usize, usize),
    /// Fraction of samples labelled train, assigned by hash rank.
    pub train_fraction: f64,
    /// `(tau_complete, tau_partial)` cuts for the stored region masks.
    pub thresholds: (f32, f32),
    pub composition: CompositionOrder,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            resolution: (64, 64),
            train_fraction: 0.89,
            thresholds: (0.05, 0.95),
            composition: CompositionOrder::default(),
        }
    }
}

/// One degraded/clean pair with its region masks, decoded to `[0, 1]` floats.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub degraded: ImageTensor,
    pub clean: ImageTensor,
    pub partial_mask: Array2<bool>,
    pub complete_mask: Array2<bool>,
    pub kind: OccluderKind,
    pub sample_id: String,
}

pub(crate) fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loads every readable image in `dir` (sorted by filename), center-cropped
/// to a square and resized to the target resolution. Unreadable files are
/// skipped with a warning.
fn load_base_images(dir: &Path, resolution: (usize, usize)) -> Result<Vec<ImageTensor>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut bases = Vec::new();
    for path in names {
        match load_and_normalize(&path, resolution) {
            Ok(img) => bases.push(img),
            Err(err) => log::warn!("skipping unreadable base image {}: {err}", path.display()),
        }
    }
    if bases.is_empty() {
        return Err(Error::Config(format!(
            "no usable base images in {}",
            dir.display()
        )));
    }
    Ok(bases)
}

fn load_and_normalize(path: &Path, (h, w): (usize, usize)) -> Result<ImageTensor> {
    let decoded = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?;
    let rgb = decoded.to_rgb8();
    let (iw, ih) = rgb.dimensions();
    let side = iw.min(ih);
    let x0 = (iw - side) / 2;
    let y0 = (ih - side) / 2;
    let cropped = image::imageops::crop_imm(&rgb, x0, y0, side, side).to_image();
    let resized =
        image::imageops::resize(&cropped, w as u32, h as u32, image::imageops::CatmullRom);
    Ok(rgb8_to_tensor(&resized))
}

/// Center-crop to a square and bilinearly resize a float image to the target
/// resolution; identity when the shape already matches.
pub fn normalize_base(img: &ImageTensor, (th, tw): (usize, usize)) -> ImageTensor {
    let (h, w, c) = img.dims();
    if (h, w) == (th, tw) {
        return img.clone();
    }
    let side = h.min(w);
    let y0 = (h - side) / 2;
    let x0 = (w - side) / 2;
    let sy = side as f32 / th as f32;
    let sx = side as f32 / tw as f32;
    ImageTensor::from_fn(th, tw, c, |y, x, ch| {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (side - 1) as f32);
        let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (side - 1) as f32);
        let (iy, ix) = (fy as usize, fx as usize);
        let (ty, tx) = (fy - iy as f32, fx - ix as f32);
        let iy1 = (iy + 1).min(side - 1);
        let ix1 = (ix + 1).min(side - 1);
        let v = |yy: usize, xx: usize| img.get(y0 + yy, x0 + xx, ch);
        let top = v(iy, ix) * (1.0 - tx) + v(iy, ix1) * tx;
        let bot = v(iy1, ix) * (1.0 - tx) + v(iy1, ix1) * tx;
        top * (1.0 - ty) + bot * ty
    })
}

fn rgb8_to_tensor(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> ImageTensor {
    let (w, h) = img.dimensions();
    ImageTensor::from_fn(h as usize, w as usize, 3, |y, x, c| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

fn tensor_to_rgb8(img: &ImageTensor) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (h, w, _) = img.dims();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px =
            |c: usize| (img.get(y as usize, x as usize, c).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Writes an image tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_rgb8(path: &Path, img: &ImageTensor) -> Result<()> {
    tensor_to_rgb8(img).save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

fn write_gray16(path: &Path, data: &Array2<f32>) -> Result<()> {
    let (h, w) = data.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(data[(y as usize, x as usize)].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

fn read_rgb8(path: &Path) -> Result<ImageTensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.into()));
    }
    let decoded = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?;
    Ok(rgb8_to_tensor(&decoded.to_rgb8()))
}

fn read_mask(path: &Path) -> Result<Array2<bool>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.into()));
    }
    let decoded = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .to_luma16();
    let (w, h) = decoded.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        decoded.get_pixel(x as u32, y as u32)[0] >= 0x8000
    }))
}

/// Synthesizes `count_per_kind` degraded/clean pairs per spec into `out`.
///
/// Deterministic for a fixed `(bases, specs, seed)`: per-sample seeds derive
/// from the dataset seed and the sample id, and samples are generated
/// independently (parallel across samples).
pub fn generate_dataset(
    base_images: &Path,
    specs: &[DegradationSpec],
    count_per_kind: usize,
    out: &Path,
    seed: u64,
    cfg: &DataConfig,
) -> Result<DatasetManifest> {
    let bases = load_base_images(base_images, cfg.resolution)?;
    generate_dataset_from(&bases, specs, count_per_kind, out, seed, cfg)
}

/// [`generate_dataset`] over already-loaded base scenes.
pub fn generate_dataset_from(
    bases: &[ImageTensor],
    specs: &[DegradationSpec],
    count_per_kind: usize,
    out: &Path,
    seed: u64,
    cfg: &DataConfig,
) -> Result<DatasetManifest> {
    if bases.is_empty() {
        return Err(Error::Config("no base images supplied".into()));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
    }
    for sub in ["degraded", "clean", "alpha", "masks"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let (h, w) = cfg.resolution;
    let bases: Vec<ImageTensor> = bases
        .iter()
        .map(|b| normalize_base(b, cfg.resolution))
        .collect();
    let bases = &bases;

    let jobs: Vec<(DegradationSpec, String)> = specs
        .iter()
        .flat_map(|spec| {
            (0..count_per_kind).map(move |i| {
                let id = format!("{}_{i:04}", spec.occluder_kind);
                (spec.clone(), id)
            })
        })
        .collect();

    let metas: Vec<SampleMeta> = jobs
        .par_iter()
        .map(|(spec, id)| -> Result<SampleMeta> {
            let sample_seed = splitmix64(seed ^ fnv1a64(id));
            let base = &bases[(splitmix64(sample_seed ^ 0xba5e) % bases.len() as u64) as usize];
            let mut spec = spec.clone();
            spec.seed = sample_seed;
            let field = synthesize_field(&spec, h, w, 3)?;
            let psf = make_disc_psf(
                field.defocus_distance,
                min_kernel_size(field.defocus_distance),
            )?;
            let degraded = degrade_with(base, &field, &psf, cfg.composition)?;
            let masks = decompose_regions(&field, cfg.thresholds)?;

            save_rgb8(&out.join("degraded").join(format!("{id}.png")), &degraded)?;
            save_rgb8(&out.join("clean").join(format!("{id}.png")), base)?;
            write_gray16(&out.join("alpha").join(format!("{id}.png")), &field.alpha)?;
            let to_f32 = |m: &Array2<bool>| m.mapv(|v| if v { 1.0f32 } else { 0.0 });
            write_gray16(
                &out.join("masks").join(format!("{id}_partial.png")),
                &to_f32(&masks.partial),
            )?;
            write_gray16(
                &out.join("masks").join(format!("{id}_complete.png")),
                &to_f32(&masks.complete),
            )?;

            Ok(SampleMeta {
                sample_id: id.clone(),
                kind: spec.occluder_kind,
                beta: spec.occluder_kind.beta(),
                psf_radius: field.defocus_distance,
                seed: sample_seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let split = assign_split(&metas, cfg.train_fraction);
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        resolution: cfg.resolution,
        value_range: (0.0, 1.0),
        samples: metas,
        split,
    };
    manifest.save(out)?;
    Ok(manifest)
}

/// Hash-rank split: ids ordered by a mixed hash take the train label until
/// the fraction is filled. Exact counts, stable under reordering of the
/// manifest. The splitmix finalizer matters: raw FNV of near-identical ids
/// clusters by prefix, which would segregate occluder kinds across splits.
fn assign_split(metas: &[SampleMeta], train_fraction: f64) -> BTreeMap<String, Split> {
    let mut ranked: Vec<&SampleMeta> = metas.iter().collect();
    ranked.sort_by_key(|m| (splitmix64(fnv1a64(&m.sample_id)), m.sample_id.clone()));
    let n_train = (metas.len() as f64 * train_fraction).round() as usize;
    ranked
        .iter()
        .enumerate()
        .map(|(rank, m)| {
            let split = if rank < n_train {
                Split::Train
            } else {
                Split::Test
            };
            (m.sample_id.clone(), split)
        })
        .collect()
}

/// Loads the samples of one split, in manifest order.
pub fn load_pairs(dir: &Path, split: Split) -> Result<Vec<PairedSample>> {
    load_pairs_where(dir, |_, s| s == split)
}

/// Loads the samples selected by `keep(meta, split)`, in manifest order.
pub fn load_pairs_where(
    dir: &Path,
    keep: impl Fn(&SampleMeta, Split) -> bool,
) -> Result<Vec<PairedSample>> {
    let manifest = DatasetManifest::load(dir)?;
    manifest
        .samples
        .iter()
        .filter(|m| {
            keep(
                m,
                manifest.split_of(&m.sample_id).expect("validated on load"),
            )
        })
        .map(|m| {
            let id = &m.sample_id;
            Ok(PairedSample {
                degraded: read_rgb8(&dir.join("degraded").join(format!("{id}.png")))?,
                clean: read_rgb8(&dir.join("clean").join(format!("{id}.png")))?,
                partial_mask: read_mask(&dir.join("masks").join(format!("{id}_partial.png")))?,
                complete_mask: read_mask(&dir.join("masks").join(format!("{id}_complete.png")))?,
                kind: m.kind,
                sample_id: id.clone(),
            })
        })
        .collect()
}

/// Checks manifest/file-system consistency in both directions.
pub fn validate_dataset(dir: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(dir)?;
    for m in &manifest.samples {
        for rel in [
            format!("degraded/{}.png", m.sample_id),
            format!("clean/{}.png", m.sample_id),
            format!("alpha/{}.png", m.sample_id),
            format!("masks/{}_partial.png", m.sample_id),
            format!("masks/{}_complete.png", m.sample_id),
        ] {
            let p = dir.join(&rel);
            if !p.exists() {
                return Err(Error::MissingFile(p));
            }
        }
    }
    let listed: std::collections::BTreeSet<&str> = manifest
        .samples
        .iter()
        .map(|m| m.sample_id.as_str())
        .collect();
    let entries = fs::read_dir(dir.join("degraded")).map_err(|e| Error::io(dir, e))?;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let stem = name.trim_end_matches(".png");
        if !listed.contains(stem) {
            return Err(Error::Manifest(format!(
                "file {name} on disk is not listed in the manifest"
            )));
        }
    }
    Ok(())
}

/// Affine map `[0, 1] -> [-1, 1]`; input checked within 1e-6.
pub fn to_model_range(img: &ImageTensor) -> Result<ImageTensor> {
    img.check_range(0.0, 1.0, 1e-6, "to_model_range input")?;
    Ok(img.map(|v| 2.0 * v - 1.0))
}

/// Affine map `[-1, 1] -> [0, 1]`; input checked within 1e-6.
pub fn from_model_range(img: &ImageTensor) -> Result<ImageTensor> {
    img.check_range(-1.0, 1.0, 1e-6, "from_model_range input")?;
    Ok(img.map(|v| (v + 1.0) * 0.5))
}
