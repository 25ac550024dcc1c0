//! Two-branch restoration model: a shared multi-scale encoder-decoder trunk,
//! a primary occlusion-removal head, an auxiliary self-reconstruction head,
//! and per-scale occlusion attention masks gating the decoder features.
//!
//! Default layer table, per scale `s` with `ch(s) = base_channels * 2^s`:
//!
//! | name            | shape                         | notes                     |
//! |-----------------|-------------------------------|---------------------------|
//! | enc0.conv1      | [ch0, 3, 3, 3]                | image stem                |
//! | enc{s}.conv1    | [ch(s), ch(s)+ch(s-1), 3, 3]  | extra input: recurrence   |
//! | enc{s}.conv2    | [ch(s), ch(s), 3, 3]          |                           |
//! | down{s}         | [ch(s), ch(s-1), 3, 3]        | stride 2                  |
//! | dec{s}.conv1    | [ch(s), ch(s+1)+ch(s), 3, 3]  | upsampled + skip concat   |
//! | dec{s}.conv2    | [ch(s), ch(s), 3, 3]          |                           |
//! | mask{s}         | [1, ch(s), 1, 1]              | attention projection      |
//! | primary.conv1/2 | [ch0, ch0, 3, 3], [3, ch0, 3, 3] | residual head          |
//! | aux.conv1/2     | [ch0, ch0+3, 3, 3], [3, ch0, 3, 3] | sees primary output  |
//!
//! Cross-scale feature recurrence unrolls the trunk twice inside one forward
//! pass: decoder features at scale `s` from the first iteration are pooled
//! down one scale and injected into the encoder stage `s+1` of the second.
//! With recurrence disabled only one iteration runs and the recurrence
//! channels stay zero, so parameter shapes do not depend on the flag.
//!
//! Every activation is LeakyReLU except the sigmoid that squashes attention
//! masks; no normalization layers (batch statistics are unreliable at the
//! batch sizes this model trains with). The primary head is residual: its
//! output is added to the input image and clipped to `[-1, 1]` at inference
//! only, so training gradients stay alive outside the range.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use params::{init_params, layer_shapes, Group, PArray, ParamSet};

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Pad, Tape, Tensor};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Architecture knobs; part of every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Number of encoder/decoder scales; channels double per scale.
    pub scales: usize,
    pub base_channels: usize,
    /// LeakyReLU negative slope.
    pub activation_slope: f32,
    /// Gate decoder features with attention masks.
    pub mask_enabled: bool,
    /// Per-decoder-scale mask toggles; empty means all scales when masks are
    /// enabled. Length `scales - 1` otherwise.
    #[serde(default)]
    pub mask_scales: Vec<bool>,
    /// Primary head predicts a residual added to the input.
    pub residual_enabled: bool,
    /// Unroll the trunk twice with cross-scale feature recurrence.
    pub feature_recurrence_enabled: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            base_channels: 16,
            activation_slope: 0.1,
            mask_enabled: false,
            mask_scales: Vec::new(),
            residual_enabled: true,
            feature_recurrence_enabled: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales < 1 {
            return Err(Error::Config("scales must be >= 1".into()));
        }
        if self.base_channels < 4 {
            return Err(Error::Config("base_channels must be >= 4".into()));
        }
        if !self.activation_slope.is_finite() || self.activation_slope < 0.0 {
            return Err(Error::Config("activation_slope must be >= 0".into()));
        }
        if !self.mask_scales.is_empty() && self.mask_scales.len() != self.scales.saturating_sub(1) {
            return Err(Error::Config(format!(
                "mask_scales needs {} entries (one per decoder scale) or none",
                self.scales - 1
            )));
        }
        Ok(())
    }

    pub fn channels_at(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    /// Spatial divisor required of input dimensions.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.scales - 1)
    }

    fn mask_active(&self, scale: usize) -> bool {
        self.mask_enabled && self.mask_scales.get(scale).copied().unwrap_or(true)
    }

    fn check_input_dims(&self, h: usize, w: usize) -> Result<()> {
        let f = self.spatial_divisor();
        if h % f != 0 || w % f != 0 {
            let ph = h.div_ceil(f) * f;
            let pw = w.div_ceil(f) * f;
            return Err(Error::Config(format!(
                "input {h}x{w} not divisible by {f}; pad to {ph}x{pw}"
            )));
        }
        Ok(())
    }
}

/// Inference products of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// Clean prediction, clipped to `[-1, 1]`.
    pub primary: ImageTensor,
    /// Reconstruction of the degraded input, when the auxiliary head ran.
    pub auxiliary: Option<ImageTensor>,
    /// Per-decoder-scale attention maps in `[0, 1]`, finest first.
    pub masks: Option<Vec<Array2<f32>>>,
}

/// Node handles of a recorded forward pass, for loss construction.
pub struct ForwardGraph {
    pub input: NodeId,
    /// Unclipped primary prediction.
    pub primary_pre: NodeId,
    /// Unclipped auxiliary reconstruction, when requested.
    pub auxiliary: Option<NodeId>,
    /// Attention maps, finest scale first.
    pub masks: Vec<NodeId>,
    /// Parameter leaves keyed by `(group, name)`.
    pub params: BTreeMap<(Group, String), NodeId>,
}

struct Bound {
    ids: BTreeMap<(Group, String), NodeId>,
}

impl Bound {
    fn bind(tape: &mut Tape, params: &ParamSet, needs_grad: bool) -> Self {
        let mut ids = BTreeMap::new();
        for (group, name, arr) in params.iter() {
            let t = Tensor {
                c: arr.shape[0],
                h: arr.data.len() / (arr.shape[0] * arr.shape[arr.shape.len() - 1]),
                w: arr.shape[arr.shape.len() - 1],
                data: arr.data.clone(),
            };
            ids.insert((group, name.to_string()), tape.leaf(t, needs_grad));
        }
        Self { ids }
    }

    fn get(&self, group: Group, name: &str) -> NodeId {
        *self
            .ids
            .get(&(group, name.to_string()))
            .unwrap_or_else(|| panic!("missing parameter {group:?}/{name}"))
    }
}

/// Conv + bias with the kernel geometry taken from the parameter set.
fn conv(
    tape: &mut Tape,
    params: &ParamSet,
    bound: &Bound,
    group: Group,
    name: &str,
    input: NodeId,
    stride: usize,
) -> Result<NodeId> {
    let arr = params.get(group, &format!("{name}.w"))?;
    let (kh, kw) = (arr.shape[2], arr.shape[3]);
    let pad = if kh == 1 {
        Pad::Valid
    } else {
        Pad::Zero(kh / 2)
    };
    tape.conv2d(
        input,
        bound.get(group, &format!("{name}.w")),
        Some(bound.get(group, &format!("{name}.b"))),
        (kh, kw),
        stride,
        pad,
        1,
    )
}

struct TrunkIteration {
    /// Gated decoder features per scale, index = scale (finest 0). The entry
    /// at `scales - 1` is the bottleneck output.
    dec: Vec<NodeId>,
    masks: Vec<NodeId>,
}

fn run_trunk(
    tape: &mut Tape,
    params: &ParamSet,
    bound: &Bound,
    cfg: &NetworkConfig,
    input: NodeId,
    recurrence: Option<&TrunkIteration>,
) -> Result<TrunkIteration> {
    let slope = cfg.activation_slope;
    let s_max = cfg.scales;
    let (_, h, w) = tape.value(input).shape();

    // Encoder, fine to coarse.
    let mut enc = Vec::with_capacity(s_max);
    let c1 = conv(tape, params, bound, Group::Shared, "enc0.conv1", input, 1)?;
    let a1 = tape.leaky_relu(c1, slope);
    let c2 = conv(tape, params, bound, Group::Shared, "enc0.conv2", a1, 1)?;
    enc.push(tape.leaky_relu(c2, slope));
    for s in 1..s_max {
        let down = conv(
            tape,
            params,
            bound,
            Group::Shared,
            &format!("down{s}"),
            enc[s - 1],
            2,
        )?;
        let down = tape.leaky_relu(down, slope);
        let rec = match recurrence {
            Some(prev) => tape.avg_pool2(prev.dec[s - 1]),
            None => {
                let ch = cfg.channels_at(s - 1);
                let z = Tensor::zeros(ch, h >> s, w >> s);
                tape.leaf(z, false)
            }
        };
        let cat = tape.concat(&[down, rec])?;
        let c1 = conv(
            tape,
            params,
            bound,
            Group::Shared,
            &format!("enc{s}.conv1"),
            cat,
            1,
        )?;
        let a1 = tape.leaky_relu(c1, slope);
        let c2 = conv(
            tape,
            params,
            bound,
            Group::Shared,
            &format!("enc{s}.conv2"),
            a1,
            1,
        )?;
        enc.push(tape.leaky_relu(c2, slope));
    }

    // Decoder, coarse to fine, with attention gating.
    let mut dec: Vec<Option<NodeId>> = vec![None; s_max];
    let mut masks: Vec<Option<NodeId>> = vec![None; s_max.saturating_sub(1)];
    dec[s_max - 1] = Some(enc[s_max - 1]);
    let mut prev = enc[s_max - 1];
    for s in (0..s_max - 1).rev() {
        let up = tape.upsample_nearest2(prev);
        let cat = tape.concat(&[up, enc[s]])?;
        let c1 = conv(
            tape,
            params,
            bound,
            Group::Shared,
            &format!("dec{s}.conv1"),
            cat,
            1,
        )?;
        let a1 = tape.leaky_relu(c1, slope);
        let c2 = conv(
            tape,
            params,
            bound,
            Group::Shared,
            &format!("dec{s}.conv2"),
            a1,
            1,
        )?;
        let feat = tape.leaky_relu(c2, slope);
        let logits = conv(
            tape,
            params,
            bound,
            Group::Shared,
            &format!("mask{s}"),
            feat,
            1,
        )?;
        let mask = tape.sigmoid(logits);
        masks[s] = Some(mask);
        let gated = if cfg.mask_active(s) {
            tape.mul_broadcast(feat, mask)?
        } else {
            feat
        };
        dec[s] = Some(gated);
        prev = gated;
    }
    Ok(TrunkIteration {
        dec: dec
            .into_iter()
            .map(|d| d.expect("all scales filled"))
            .collect(),
        masks: masks
            .into_iter()
            .map(|m| m.expect("all scales filled"))
            .collect(),
    })
}

/// Records the full forward graph on `tape`.
///
/// The shared trunk runs once (internally unrolled when recurrence is on);
/// the primary head maps trunk features to the clean residual; the auxiliary
/// head, when requested, consumes the trunk features together with the
/// primary prediction, which is what lets auxiliary-loss gradients reach the
/// primary head.
pub fn build_forward(
    tape: &mut Tape,
    input: &Tensor,
    params: &ParamSet,
    cfg: &NetworkConfig,
    with_auxiliary: bool,
    needs_grad: bool,
) -> Result<ForwardGraph> {
    cfg.validate()?;
    params.validate(cfg)?;
    let (c, h, w) = input.shape();
    if c != 3 {
        return Err(Error::shape("network input", "3 channels", c));
    }
    cfg.check_input_dims(h, w)?;

    let bound = Bound::bind(tape, params, needs_grad);
    let input_id = tape.leaf(input.clone(), false);

    let first = run_trunk(tape, params, &bound, cfg, input_id, None)?;
    let last = if cfg.feature_recurrence_enabled && cfg.scales > 1 {
        run_trunk(tape, params, &bound, cfg, input_id, Some(&first))?
    } else {
        first
    };
    let features = last.dec[0];
    let slope = cfg.activation_slope;

    let p1 = conv(
        tape,
        params,
        &bound,
        Group::Primary,
        "primary.conv1",
        features,
        1,
    )?;
    let p1 = tape.leaky_relu(p1, slope);
    let residual = conv(tape, params, &bound, Group::Primary, "primary.conv2", p1, 1)?;
    let primary_pre = if cfg.residual_enabled {
        tape.add(input_id, residual)?
    } else {
        residual
    };

    let auxiliary = if with_auxiliary {
        let cat = tape.concat(&[features, primary_pre])?;
        let a1 = conv(tape, params, &bound, Group::Auxiliary, "aux.conv1", cat, 1)?;
        let a1 = tape.leaky_relu(a1, slope);
        Some(conv(
            tape,
            params,
            &bound,
            Group::Auxiliary,
            "aux.conv2",
            a1,
            1,
        )?)
    } else {
        None
    };

    Ok(ForwardGraph {
        input: input_id,
        primary_pre,
        auxiliary,
        masks: last.masks,
        params: bound.ids,
    })
}

/// Clean prediction from the primary branch alone (shared trunk + primary
/// head), clipped to `[-1, 1]`. Input must be in `[-1, 1]`.
pub fn forward_primary(
    input: &ImageTensor,
    params: &ParamSet,
    cfg: &NetworkConfig,
) -> Result<ImageTensor> {
    let mut tape = Tape::new();
    let x = Tensor::from_image(input);
    let graph = build_forward(&mut tape, &x, params, cfg, false, false)?;
    Ok(tape.value(graph.primary_pre).to_image().clip(-1.0, 1.0))
}

/// Both branches: the clean prediction and the self-reconstruction, plus the
/// attention maps for inspection.
pub fn forward_auxiliary(
    input: &ImageTensor,
    params: &ParamSet,
    cfg: &NetworkConfig,
) -> Result<ForwardOutputs> {
    let mut tape = Tape::new();
    let x = Tensor::from_image(input);
    let graph = build_forward(&mut tape, &x, params, cfg, true, false)?;
    let masks = graph
        .masks
        .iter()
        .map(|&m| {
            let t = tape.value(m);
            Array2::from_shape_vec((t.h, t.w), t.data.clone()).expect("mask shape")
        })
        .collect();
    Ok(ForwardOutputs {
        primary: tape.value(graph.primary_pre).to_image().clip(-1.0, 1.0),
        auxiliary: Some(tape.value(graph.auxiliary.expect("requested")).to_image()),
        masks: Some(masks),
    })
}

/// Attention map for one decoder scale from raw features: a 1x1 projection
/// squashed through a sigmoid, so an all-zero feature map with zero-biased
/// projection lands exactly on 0.5.
pub fn compute_mask(
    features: &Tensor,
    scale: usize,
    params: &ParamSet,
    cfg: &NetworkConfig,
) -> Result<Array2<f32>> {
    if scale + 1 >= cfg.scales {
        return Err(Error::Config(format!(
            "mask scale {scale} out of range (decoder scales: 0..{})",
            cfg.scales - 1
        )));
    }
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, params, false);
    let x = tape.leaf(features.clone(), false);
    let logits = conv(
        &mut tape,
        params,
        &bound,
        Group::Shared,
        &format!("mask{scale}"),
        x,
        1,
    )?;
    let mask = tape.sigmoid(logits);
    let t = tape.value(mask);
    Ok(Array2::from_shape_vec((t.h, t.w), t.data.clone()).expect("mask shape"))
}
