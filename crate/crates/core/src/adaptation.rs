//! Per-image test-time adaptation: clone the base parameters, descend the
//! auxiliary self-reconstruction loss on the single test image for a few
//! steps, infer once with the adapted copy, and discard it.
//!
//! Adaptations of distinct images never share state: each owns a private
//! parameter copy and a fresh optimizer, so results are independent of any
//! other image processed before or after.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{from_model_range, to_model_range, PairedSample};
use crate::error::{Error, Result};
use crate::eval::psnr;
use crate::losses::{branch_loss_node, LossConfig};
use crate::network::{build_forward, Group, NetworkConfig, ParamSet};
use crate::training::Adam;
use crate::ImageTensor;

/// Which parameter groups the adapted copy may move.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptScope {
    /// Everything the auxiliary gradient reaches: shared trunk and both
    /// heads (the auxiliary branch consumes the primary output, so the
    /// primary head is reachable).
    #[default]
    AllParams,
    /// Restricted ablation: shared trunk and auxiliary head only; the
    /// primary head stays frozen.
    SharedAndAuxiliary,
}

impl AdaptScope {
    fn includes(self, group: Group) -> bool {
        match self {
            AdaptScope::AllParams => true,
            AdaptScope::SharedAndAuxiliary => group != Group::Primary,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Gradient updates per test image.
    pub n_updates: usize,
    pub learning_rate: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_epsilon: f32,
    pub scope: AdaptScope,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            n_updates: 4,
            learning_rate: 6e-6,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            scope: AdaptScope::AllParams,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Step-by-step record of one adaptation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptTrace {
    /// Auxiliary loss before each update and after the last one
    /// (`n_updates + 1` entries on a clean run).
    pub aux_loss: Vec<f32>,
    /// Primary-output PSNR vs ground truth per step, when a reference was
    /// supplied.
    pub psnr_db: Option<Vec<f64>>,
    /// Wall-clock seconds per recorded step.
    pub step_seconds: Vec<f64>,
    /// True when a non-finite loss aborted adaptation and the base model's
    /// output was returned instead.
    pub fell_back: bool,
}

impl AdaptTrace {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

struct StepOutcome {
    aux_loss: f32,
    primary: ImageTensor,
    grads: Option<std::collections::BTreeMap<(Group, String), Vec<f32>>>,
}

/// One auxiliary forward (and optional backward) on a single image.
fn auxiliary_step(
    input: &Tensor,
    params: &ParamSet,
    net: &NetworkConfig,
    loss_cfg: &LossConfig,
    with_grads: bool,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let graph = build_forward(&mut tape, input, params, net, true, with_grads)?;
    let aux = graph.auxiliary.expect("auxiliary branch requested");
    let loss = branch_loss_node(&mut tape, aux, graph.input, loss_cfg)?;
    let grads = if with_grads {
        tape.backward(loss)?;
        let mut grads = std::collections::BTreeMap::new();
        for (key, &node) in &graph.params {
            let g = tape
                .grad(node)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(node).len()]);
            grads.insert(key.clone(), g);
        }
        Some(grads)
    } else {
        None
    };
    Ok(StepOutcome {
        aux_loss: tape.scalar_value(loss),
        primary: tape.value(graph.primary_pre).to_image().clip(-1.0, 1.0),
        grads,
    })
}

/// Adapts a private copy of `base` to one degraded image (in `[0, 1]`) and
/// returns the restored image (in `[0, 1]`) with the per-step trace.
///
/// `reference`, when given, adds a per-step PSNR series to the trace. The
/// base parameters are never written; a non-finite auxiliary loss falls back
/// to plain base-model inference with the trace flagged.
pub fn adapt_and_infer(
    degraded: &ImageTensor,
    reference: Option<&ImageTensor>,
    base: &ParamSet,
    net: &NetworkConfig,
    loss_cfg: &LossConfig,
    cfg: &AdaptConfig,
) -> Result<(ImageTensor, AdaptTrace)> {
    cfg.validate()?;
    let input = Tensor::from_image(&to_model_range(degraded)?);
    let mut theta = base.clone();
    let mut adam = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    let mut trace = AdaptTrace {
        aux_loss: Vec::with_capacity(cfg.n_updates + 1),
        psnr_db: reference.map(|_| Vec::with_capacity(cfg.n_updates + 1)),
        step_seconds: Vec::with_capacity(cfg.n_updates + 1),
        fell_back: false,
    };

    let mut restored = None;
    for step in 0..=cfg.n_updates {
        let t0 = Instant::now();
        let with_grads = step < cfg.n_updates;
        let outcome = auxiliary_step(&input, &theta, net, loss_cfg, with_grads)?;
        if !outcome.aux_loss.is_finite() {
            trace.fell_back = true;
            break;
        }
        trace.aux_loss.push(outcome.aux_loss);
        if let (Some(series), Some(gt)) = (trace.psnr_db.as_mut(), reference) {
            let out01 = from_model_range(&outcome.primary)?;
            series.push(psnr(&out01, gt, 1.0)?.db);
        }
        restored = Some(outcome.primary);
        if let Some(grads) = outcome.grads {
            adam.step(&mut theta, &grads, cfg.learning_rate, |g| {
                cfg.scope.includes(g)
            });
        }
        trace.step_seconds.push(t0.elapsed().as_secs_f64());
    }

    let final_primary = if trace.fell_back || restored.is_none() {
        trace.fell_back = true;
        // Base-model inference, untouched by the aborted adaptation.
        let mut tape = Tape::new();
        let graph = build_forward(&mut tape, &input, base, net, false, false)?;
        tape.value(graph.primary_pre).to_image().clip(-1.0, 1.0)
    } else {
        restored.expect("set on every clean step")
    };
    Ok((from_model_range(&final_primary)?, trace))
}

/// Mean metrics over a split for one adaptation depth.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_updates: usize,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub images: usize,
    pub failed: usize,
}

/// Per-image, per-depth metric grid from an adaptation sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// `(sample_id, n_updates, psnr_db, ssim)` per image and depth.
    pub per_image: Vec<(String, usize, f64, f64)>,
    /// Auxiliary-loss traces per image, in split order.
    pub traces: Vec<(String, AdaptTrace)>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_updates,mean_psnr_db,mean_ssim,images,failed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{}\n",
                r.n_updates, r.mean_psnr_db, r.mean_ssim, r.images, r.failed
            ));
        }
        out
    }
}

/// Evaluates the split once per requested adaptation depth.
///
/// Internally each image adapts once to `max(sweep)` steps; because every
/// step's gradient uses the full image (no sampling), the parameters after
/// `k` steps are identical to a fresh `k`-step run, so intermediate
/// predictions give the shallower depths for free. Per-image failures are
/// recorded and skipped, not fatal.
pub fn evaluate_with_adaptation(
    split: &[PairedSample],
    base: &ParamSet,
    net: &NetworkConfig,
    loss_cfg: &LossConfig,
    cfg: &AdaptConfig,
    sweep: &[usize],
) -> Result<SweepTable> {
    if split.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    if sweep.is_empty() {
        return Err(Error::Config("sweep must list at least one depth".into()));
    }
    let n_max = *sweep.iter().max().expect("non-empty");

    struct PerImage {
        sample_id: String,
        // Metrics per recorded depth, or None when this image failed.
        metrics: Option<Vec<(usize, f64, f64)>>,
        trace: Option<AdaptTrace>,
    }

    let results: Vec<PerImage> = split
        .par_iter()
        .map(|pair| {
            let run = || -> Result<(Vec<(usize, f64, f64)>, AdaptTrace)> {
                let input = Tensor::from_image(&to_model_range(&pair.degraded)?);
                let mut theta = base.clone();
                let mut adam = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
                let mut trace = AdaptTrace {
                    aux_loss: Vec::new(),
                    psnr_db: Some(Vec::new()),
                    step_seconds: Vec::new(),
                    fell_back: false,
                };
                let mut metrics = Vec::new();
                for step in 0..=n_max {
                    let t0 = Instant::now();
                    let outcome = auxiliary_step(&input, &theta, net, loss_cfg, step < n_max)?;
                    if !outcome.aux_loss.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "auxiliary loss for {}",
                            pair.sample_id
                        )));
                    }
                    trace.aux_loss.push(outcome.aux_loss);
                    let out01 = from_model_range(&outcome.primary)?;
                    let p = psnr(&out01, &pair.clean, 1.0)?.db;
                    if let Some(series) = trace.psnr_db.as_mut() {
                        series.push(p);
                    }
                    if sweep.contains(&step) {
                        let s = crate::eval::ssim(&out01, &pair.clean)?;
                        metrics.push((step, p, s));
                    }
                    if let Some(grads) = outcome.grads {
                        adam.step(&mut theta, &grads, cfg.learning_rate, |g| {
                            cfg.scope.includes(g)
                        });
                    }
                    trace.step_seconds.push(t0.elapsed().as_secs_f64());
                }
                Ok((metrics, trace))
            };
            match run() {
                Ok((metrics, trace)) => PerImage {
                    sample_id: pair.sample_id.clone(),
                    metrics: Some(metrics),
                    trace: Some(trace),
                },
                Err(err) => {
                    log::warn!("adaptation failed for {}: {err}", pair.sample_id);
                    PerImage {
                        sample_id: pair.sample_id.clone(),
                        metrics: None,
                        trace: None,
                    }
                }
            }
        })
        .collect();

    let mut per_image = Vec::new();
    let mut traces = Vec::new();
    let failed = results.iter().filter(|r| r.metrics.is_none()).count();
    for r in &results {
        if let Some(metrics) = &r.metrics {
            for &(n, p, s) in metrics {
                per_image.push((r.sample_id.clone(), n, p, s));
            }
        }
        if let Some(trace) = &r.trace {
            traces.push((r.sample_id.clone(), trace.clone()));
        }
    }
    let mut rows = Vec::new();
    for &n in sweep {
        let entries: Vec<_> = per_image.iter().filter(|(_, d, _, _)| *d == n).collect();
        let count = entries.len();
        if count == 0 {
            return Err(Error::Config(format!("no successful images at depth {n}")));
        }
        rows.push(SweepRow {
            n_updates: n,
            mean_psnr_db: entries.iter().map(|(_, _, p, _)| p).sum::<f64>() / count as f64,
            mean_ssim: entries.iter().map(|(_, _, _, s)| s).sum::<f64>() / count as f64,
            images: count,
            failed,
        });
    }
    Ok(SweepTable {
        rows,
        per_image,
        traces,
    })
}
