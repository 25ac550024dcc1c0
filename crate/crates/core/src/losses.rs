//! Training objectives: multi-scale SSIM, Gaussian-weighted L1, the
//! per-branch composite loss and the joint two-branch objective.
//!
//! Conventions: predictions and targets arrive in the network's `[-1, 1]`
//! domain. MS-SSIM remaps them to `[0, 1]` internally so the luminance term
//! is well-defined; its loss form is `1 - MS-SSIM`, making 0 the optimum.
//! The L1 term is computed on the raw arrays and its per-pixel error map is
//! smoothed with the Gaussian window of the finest SSIM scale before the
//! mean reduction (a sigma of 0 degenerates to the plain mean absolute
//! error).

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Pad, Tape, Tensor};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Canonical per-level MS-SSIM exponents; truncated and renormalized when
/// fewer levels are used.
const LEVEL_WEIGHTS: [f32; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Mix between the MS-SSIM term and the weighted-L1 term.
    pub alpha0: f32,
    /// Mix between the primary and auxiliary branch losses.
    pub alpha_joint: f32,
    pub msssim_levels: usize,
    /// Odd Gaussian window width shared by SSIM and the L1 weighting.
    pub msssim_window: usize,
    pub msssim_sigma: f32,
    /// Sigma of the L1 error-map smoothing; 0 selects the plain-L1 fallback.
    pub gaussian_weight_sigma: f32,
    /// SSIM stability constants on the `[0, 1]` range.
    pub c1: f32,
    pub c2: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha0: 0.9,
            alpha_joint: 0.8,
            msssim_levels: 3,
            msssim_window: 11,
            msssim_sigma: 1.5,
            gaussian_weight_sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl LossConfig {
    /// Defaults for full-resolution (256px) runs.
    pub fn full_scale() -> Self {
        Self {
            msssim_levels: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha0) || !(0.0..=1.0).contains(&self.alpha_joint) {
            return Err(Error::Config(
                "loss mixing weights must lie in [0, 1]".into(),
            ));
        }
        if self.msssim_levels == 0 {
            return Err(Error::Config("msssim_levels must be >= 1".into()));
        }
        if self.msssim_window % 2 == 0 || self.msssim_window == 0 {
            return Err(Error::Config("msssim_window must be odd".into()));
        }
        if !(self.msssim_sigma > 0.0) {
            return Err(Error::Config("msssim_sigma must be positive".into()));
        }
        if self.gaussian_weight_sigma < 0.0 {
            return Err(Error::Config("gaussian_weight_sigma must be >= 0".into()));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config("stability constants must be positive".into()));
        }
        Ok(())
    }

    /// Checks the level/window constraint against an image size and names the
    /// largest legal level count on failure.
    pub fn validate_for(&self, min_dim: usize) -> Result<()> {
        self.validate()?;
        if min_dim / (1 << (self.msssim_levels - 1)) < self.msssim_window {
            let mut max_levels = 0;
            while min_dim / (1 << max_levels) >= self.msssim_window {
                max_levels += 1;
            }
            return Err(Error::Config(format!(
                "{} MS-SSIM levels need min dimension >= {}, image has {min_dim}; at most {} level(s) are legal",
                self.msssim_levels,
                self.msssim_window << (self.msssim_levels - 1),
                max_levels
            )));
        }
        Ok(())
    }
}

fn level_weights(levels: usize) -> Vec<f32> {
    let take = levels.min(LEVEL_WEIGHTS.len());
    let mut w: Vec<f32> = LEVEL_WEIGHTS[..take].to_vec();
    while w.len() < levels {
        // More levels than the canonical five: pad with the last weight.
        w.push(*w.last().expect("non-empty"));
    }
    let sum: f32 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Normalized 2-D Gaussian window flattened row-major.
fn gaussian_window(size: usize, sigma: f32) -> Vec<f32> {
    let c = (size / 2) as f64;
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let one_d: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / s2).exp())
        .collect();
    let norm: f64 = one_d.iter().sum();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            out.push((one_d[y] * one_d[x] / (norm * norm)) as f32);
        }
    }
    // Absorb the f32 rounding residue into the center weight; an exactly
    // unit-sum window keeps constant-image variances at true zero scale.
    let sum: f64 = out.iter().map(|&v| v as f64).sum();
    let center = size / 2 * size + size / 2;
    out[center] += (1.0 - sum) as f32;
    out
}

/// Depthwise Gaussian filter as a fixed (non-learnable) kernel leaf.
fn gaussian_leaf(tape: &mut Tape, channels: usize, size: usize, sigma: f32) -> NodeId {
    let plane = gaussian_window(size, sigma);
    let mut data = Vec::with_capacity(channels * plane.len());
    for _ in 0..channels {
        data.extend_from_slice(&plane);
    }
    tape.leaf(
        Tensor {
            c: channels,
            h: size,
            w: size,
            data,
        },
        false,
    )
}

struct LevelStats {
    ssim_mean: NodeId,
    cs_mean: NodeId,
}

fn ssim_level(tape: &mut Tape, x: NodeId, y: NodeId, cfg: &LossConfig) -> Result<LevelStats> {
    let (c, h, w) = tape.value(x).shape();
    if h < cfg.msssim_window || w < cfg.msssim_window {
        return Err(Error::Config(format!(
            "SSIM window {} exceeds {h}x{w} level",
            cfg.msssim_window
        )));
    }
    let k = cfg.msssim_window;
    let g = gaussian_leaf(tape, c, k, cfg.msssim_sigma);
    let filt = |t: &mut Tape, v: NodeId| t.conv2d(v, g, None, (k, k), 1, Pad::Valid, c);

    let mu_x = filt(tape, x)?;
    let mu_y = filt(tape, y)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let mu_xx = filt(tape, xx)?;
    let mu_yy = filt(tape, yy)?;
    let mu_xy = filt(tape, xy)?;

    let mu_x2 = tape.mul(mu_x, mu_x)?;
    let mu_y2 = tape.mul(mu_y, mu_y)?;
    let mu_x_mu_y = tape.mul(mu_x, mu_y)?;
    let sigma_x2 = tape.sub(mu_xx, mu_x2)?;
    let sigma_y2 = tape.sub(mu_yy, mu_y2)?;
    let sigma_xy = tape.sub(mu_xy, mu_x_mu_y)?;

    let cs_num = tape.affine(sigma_xy, 2.0, cfg.c2);
    let var_sum = tape.add(sigma_x2, sigma_y2)?;
    let cs_den = tape.affine(var_sum, 1.0, cfg.c2);
    let cs_map = tape.div(cs_num, cs_den)?;

    let l_num = tape.affine(mu_x_mu_y, 2.0, cfg.c1);
    let mu_sum = tape.add(mu_x2, mu_y2)?;
    let l_den = tape.affine(mu_sum, 1.0, cfg.c1);
    let l_map = tape.div(l_num, l_den)?;

    let ssim_map = tape.mul(l_map, cs_map)?;
    Ok(LevelStats {
        ssim_mean: tape.mean_all(ssim_map),
        cs_mean: tape.mean_all(cs_map),
    })
}

/// Multi-scale SSIM as a graph node. Inputs in `[-1, 1]` are remapped to
/// `[0, 1]`; contrast-structure factors are floored at zero before the
/// per-level exponentiation so anticorrelated inputs stay defined.
pub fn ms_ssim_node(tape: &mut Tape, x: NodeId, y: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let (_, h, w) = tape.value(x).shape();
    cfg.validate_for(h.min(w))?;
    if tape.value(x).shape() != tape.value(y).shape() {
        return Err(Error::shape(
            "ms_ssim",
            format!("{:?}", tape.value(x).shape()),
            format!("{:?}", tape.value(y).shape()),
        ));
    }
    let weights = level_weights(cfg.msssim_levels);
    let mut cur_x = tape.affine(x, 0.5, 0.5);
    let mut cur_y = tape.affine(y, 0.5, 0.5);
    let mut acc: Option<NodeId> = None;
    for (level, &wgt) in weights.iter().enumerate() {
        let stats = ssim_level(tape, cur_x, cur_y, cfg)?;
        let factor = if level + 1 == weights.len() {
            stats.ssim_mean
        } else {
            stats.cs_mean
        };
        let clamped = tape.relu(factor);
        let powed = tape.pow_const(clamped, wgt);
        acc = Some(match acc {
            None => powed,
            Some(prev) => tape.mul(prev, powed)?,
        });
        if level + 1 != weights.len() {
            cur_x = tape.avg_pool2(cur_x);
            cur_y = tape.avg_pool2(cur_y);
        }
    }
    Ok(acc.expect("at least one level"))
}

/// Mean of the Gaussian-smoothed absolute error map (plain MAE when the
/// smoothing sigma is 0).
pub fn weighted_l1_node(tape: &mut Tape, x: NodeId, y: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    if tape.value(x).shape() != tape.value(y).shape() {
        return Err(Error::shape(
            "weighted_l1",
            format!("{:?}", tape.value(x).shape()),
            format!("{:?}", tape.value(y).shape()),
        ));
    }
    let d = tape.sub(x, y)?;
    let e = tape.abs(d);
    if cfg.gaussian_weight_sigma <= 0.0 {
        return Ok(tape.mean_all(e));
    }
    let (c, _, _) = tape.value(e).shape();
    let k = cfg.msssim_window;
    let g = gaussian_leaf(tape, c, k, cfg.gaussian_weight_sigma);
    let smeared = tape.conv2d(e, g, None, (k, k), 1, Pad::Reflect(k / 2), c)?;
    Ok(tape.mean_all(smeared))
}

/// `alpha0 * (1 - MS-SSIM) + (1 - alpha0) * weighted L1`; used identically
/// for the primary loss (prediction vs clean) and the auxiliary loss
/// (reconstruction vs input).
pub fn branch_loss_node(
    tape: &mut Tape,
    pred: NodeId,
    target: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let ms = ms_ssim_node(tape, pred, target, cfg)?;
    let ms_loss = tape.affine(ms, -1.0, 1.0);
    let l1 = weighted_l1_node(tape, pred, target, cfg)?;
    let a = tape.affine(ms_loss, cfg.alpha0, 0.0);
    let b = tape.affine(l1, 1.0 - cfg.alpha0, 0.0);
    tape.add(a, b)
}

/// `alpha * L_P + (1 - alpha) * L_A`.
pub fn joint_loss_node(
    tape: &mut Tape,
    l_p: NodeId,
    l_a: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let a = tape.affine(l_p, cfg.alpha_joint, 0.0);
    let b = tape.affine(l_a, 1.0 - cfg.alpha_joint, 0.0);
    tape.add(a, b)
}

fn scalar_of(
    x: &ImageTensor,
    y: &ImageTensor,
    cfg: &LossConfig,
    build: impl Fn(&mut Tape, NodeId, NodeId, &LossConfig) -> Result<NodeId>,
) -> Result<f32> {
    let mut tape = Tape::new();
    let xa = tape.leaf(Tensor::from_image(x), false);
    let ya = tape.leaf(Tensor::from_image(y), false);
    let out = build(&mut tape, xa, ya, cfg)?;
    Ok(tape.scalar_value(out))
}

/// Scalar MS-SSIM of two `[-1, 1]` images.
pub fn ms_ssim(x: &ImageTensor, y: &ImageTensor, cfg: &LossConfig) -> Result<f32> {
    scalar_of(x, y, cfg, ms_ssim_node)
}

/// Scalar Gaussian-weighted L1 of two images.
pub fn weighted_l1(x: &ImageTensor, y: &ImageTensor, cfg: &LossConfig) -> Result<f32> {
    scalar_of(x, y, cfg, weighted_l1_node)
}

/// Scalar branch loss of a prediction against its target.
pub fn branch_loss(pred: &ImageTensor, target: &ImageTensor, cfg: &LossConfig) -> Result<f32> {
    scalar_of(pred, target, cfg, branch_loss_node)
}

/// Scalar joint objective from the two branch losses.
pub fn joint_loss(l_p: f32, l_a: f32, cfg: &LossConfig) -> Result<f32> {
    if !(l_p.is_finite() && l_a.is_finite()) {
        return Err(Error::NonFinite("joint loss inputs".into()));
    }
    Ok(cfg.alpha_joint * l_p + (1.0 - cfg.alpha_joint) * l_a)
}

/// Branch loss plus its analytic gradient with respect to the prediction.
pub fn branch_loss_grad(
    pred: &ImageTensor,
    target: &ImageTensor,
    cfg: &LossConfig,
) -> Result<(f32, ImageTensor)> {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::from_image(pred), true);
    let t = tape.leaf(Tensor::from_image(target), false);
    let loss = branch_loss_node(&mut tape, p, t, cfg)?;
    tape.backward(loss)?;
    let grad = tape.grad(p).expect("pred requires grad").to_vec();
    let (c, h, w) = Tensor::from_image(pred).shape();
    let grad_img = Tensor {
        c,
        h,
        w,
        data: grad,
    }
    .to_image();
    Ok((tape.scalar_value(loss), grad_img))
}
