//! Image-quality metrics and experiment reporting: PSNR, SSIM, per-kind
//! summaries, and report serialization as CSV, JSON and Markdown.
//!
//! Metrics are computed in f64 on the `[0, 1]` representation with a data
//! range of 1. SSIM is the mean over per-channel scores with the standard
//! 11x11 Gaussian window (sigma 1.5) and constants `(0.01)^2`, `(0.03)^2`.

mod grid;

pub use grid::emit_grid;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::imaging::OccluderKind;
use crate::ImageTensor;

/// PSNR value with the identical-image cap flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    pub capped: bool,
}

/// Cap applied when the mean squared error vanishes (or nearly does).
pub const PSNR_CAP_DB: f64 = 100.0;

/// `10 log10(range^2 / MSE)`, capped at 100 dB.
pub fn psnr(x: &ImageTensor, y: &ImageTensor, data_range: f64) -> Result<Psnr> {
    if !x.same_shape(y) {
        return Err(Error::shape(
            "psnr",
            format!("{:?}", x.dims()),
            format!("{:?}", y.dims()),
        ));
    }
    if !(data_range > 0.0) {
        return Err(Error::Config("psnr data_range must be positive".into()));
    }
    let n = x.data().len() as f64;
    let mse: f64 = x
        .data()
        .iter()
        .zip(y.data().iter())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(Psnr {
            db: PSNR_CAP_DB,
            capped: true,
        });
    }
    let db = 10.0 * (data_range * data_range / mse).log10();
    if db > PSNR_CAP_DB {
        Ok(Psnr {
            db: PSNR_CAP_DB,
            capped: true,
        })
    } else {
        Ok(Psnr { db, capped: false })
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut one_d = [0.0; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, v) in one_d.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    let mut out = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            out[y * SSIM_WINDOW + x] = one_d[y] * one_d[x] / (sum * sum);
        }
    }
    out
}

/// Single-scale SSIM on `[0, 1]` images: Gaussian-weighted moments at every
/// valid window position, averaged over positions and channels.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    if !x.same_shape(y) {
        return Err(Error::shape(
            "ssim",
            format!("{:?}", x.dims()),
            format!("{:?}", y.dims()),
        ));
    }
    let (h, w, c) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, image is {h}x{w}"
        )));
    }
    let win = ssim_window();
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let wgt = win[ky * SSIM_WINDOW + kx];
                        let xv = x.get(oy + ky, ox + kx, ch) as f64;
                        let yv = y.get(oy + ky, ox + kx, ch) as f64;
                        mx += wgt * xv;
                        my += wgt * yv;
                        mxx += wgt * xv * xv;
                        myy += wgt * yv * yv;
                        mxy += wgt * xv * yv;
                    }
                }
                let sx = mxx - mx * mx;
                let sy = myy - my * my;
                let sxy = mxy - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (sx + sy + SSIM_C2));
            }
        }
    }
    Ok(total / (c * ho * wo) as f64)
}

/// One evaluated sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRecord {
    pub sample_id: String,
    pub kind: OccluderKind,
    pub psnr_db: f64,
    pub psnr_capped: bool,
    pub ssim: f64,
    pub variant: String,
    /// Pipeline failure sentinel; failed records carry zeroed metrics and
    /// are excluded from summaries.
    pub failed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub count: usize,
}

/// Runs `pipeline` over the split and scores each restored image against its
/// clean reference. Per-image failures are recorded, not fatal.
pub fn evaluate<F>(
    split: &[PairedSample],
    pipeline: F,
    variant: &str,
) -> Result<(Vec<MetricRecord>, Vec<SummaryRow>)>
where
    F: Fn(&PairedSample) -> Result<ImageTensor> + Sync,
{
    if split.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let records: Vec<MetricRecord> = split
        .par_iter()
        .map(|pair| {
            let run = || -> Result<(Psnr, f64)> {
                let restored = pipeline(pair)?;
                let p = psnr(&restored, &pair.clean, 1.0)?;
                let s = ssim(&restored, &pair.clean)?;
                Ok((p, s))
            };
            match run() {
                Ok((p, s)) => MetricRecord {
                    sample_id: pair.sample_id.clone(),
                    kind: pair.kind,
                    psnr_db: p.db,
                    psnr_capped: p.capped,
                    ssim: s,
                    variant: variant.to_string(),
                    failed: false,
                },
                Err(err) => {
                    log::warn!("evaluation failed for {}: {err}", pair.sample_id);
                    MetricRecord {
                        sample_id: pair.sample_id.clone(),
                        kind: pair.kind,
                        psnr_db: 0.0,
                        psnr_capped: false,
                        ssim: 0.0,
                        variant: variant.to_string(),
                        failed: true,
                    }
                }
            }
        })
        .collect();
    let summary = summarize(&records);
    Ok((records, summary))
}

/// Per-kind means plus an overall row, skipping failed records.
pub fn summarize(records: &[MetricRecord]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    let mut push = |label: String, subset: Vec<&MetricRecord>| {
        if subset.is_empty() {
            return;
        }
        let n = subset.len() as f64;
        rows.push(SummaryRow {
            label,
            mean_psnr_db: subset.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            mean_ssim: subset.iter().map(|r| r.ssim).sum::<f64>() / n,
            count: subset.len(),
        });
    };
    for kind in OccluderKind::ALL {
        push(
            kind.to_string(),
            records
                .iter()
                .filter(|r| r.kind == kind && !r.failed)
                .collect(),
        );
    }
    push(
        "overall".to_string(),
        records.iter().filter(|r| !r.failed).collect(),
    );
    rows
}

pub fn records_to_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("sample_id,kind,variant,psnr_db,psnr_capped,ssim,failed\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{:.6},{},{:.6},{}\n",
            r.sample_id, r.kind, r.variant, r.psnr_db, r.psnr_capped, r.ssim, r.failed
        ));
    }
    out
}

pub fn records_to_json(records: &[MetricRecord]) -> Result<String> {
    serde_json::to_string_pretty(records).map_err(|e| Error::Serde(e.to_string()))
}

/// Markdown table of summary rows, one block per variant.
pub fn summary_markdown(title: &str, rows: &[SummaryRow]) -> String {
    let mut out =
        format!("### {title}\n\n| subset | PSNR (dB) | SSIM | images |\n|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {:.2} | {:.4} | {} |\n",
            r.label, r.mean_psnr_db, r.mean_ssim, r.count
        ));
    }
    out
}
