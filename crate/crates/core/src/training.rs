//! Offline joint optimization of the base model over a paired dataset.
//!
//! One logical loop owns the mutable parameters; per-sample forward/backward
//! passes of a batch run in parallel and their gradients are reduced in batch
//! order, so a fixed seed reproduces the loss series exactly. The auxiliary
//! branch is skipped entirely when its loss weight is zero, which makes a
//! joint run with `alpha_joint = 1` bitwise identical to a primary-only run.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{splitmix64, to_model_range, PairedSample};
use crate::error::{Error, Result};
use crate::losses::{branch_loss_node, joint_loss_node, LossConfig};
use crate::network::{build_forward, init_params, save_checkpoint, Group, NetworkConfig, ParamSet};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps (not epochs).
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_epsilon: f32,
    pub seed: u64,
    /// Checkpoint cadence in iterations; 0 disables intermediate dumps.
    pub checkpoint_every: usize,
    pub loss: LossConfig,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 8,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            loss: LossConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The paper-scale setting: 256px inputs, batch 30, 1300 steps.
    pub fn full_scale() -> Self {
        Self {
            iterations: 1300,
            batch_size: 30,
            loss: LossConfig::full_scale(),
            network: NetworkConfig {
                base_channels: 32,
                ..NetworkConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        self.loss.validate()?;
        self.network.validate()
    }
}

/// Loss series and bookkeeping of one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub joint: Vec<f32>,
    pub primary: Vec<f32>,
    pub auxiliary: Vec<f32>,
    pub wall_seconds: f64,
    pub final_checkpoint: Option<String>,
    pub seed: u64,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Adam with bias correction over the named parameter arrays.
pub(crate) struct Adam {
    m: BTreeMap<(Group, String), Vec<f32>>,
    v: BTreeMap<(Group, String), Vec<f32>>,
    t: u64,
    beta1: f32,
    beta2: f32,
    epsilon: f32,
}

impl Adam {
    pub(crate) fn new(beta1: f32, beta2: f32, epsilon: f32) -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub(crate) fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<(Group, String), Vec<f32>>,
        lr: f32,
        include: impl Fn(Group) -> bool,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (key, grad) in grads {
            if !include(key.0) {
                continue;
            }
            let arr = params
                .group_mut(key.0)
                .get_mut(&key.1)
                .expect("gradient key matches a parameter");
            let m = self
                .m
                .entry(key.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(key.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                arr.data[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

pub(crate) struct SampleLosses {
    pub joint: f32,
    pub primary: f32,
    pub auxiliary: f32,
}

/// Forward + backward of one sample; returns per-parameter gradients and the
/// loss components.
pub(crate) fn sample_grads(
    input: &Tensor,
    target: &Tensor,
    params: &ParamSet,
    net: &NetworkConfig,
    loss_cfg: &LossConfig,
    with_auxiliary: bool,
) -> Result<(BTreeMap<(Group, String), Vec<f32>>, SampleLosses)> {
    let mut tape = Tape::new();
    let graph = build_forward(&mut tape, input, params, net, with_auxiliary, true)?;
    let target_leaf = tape.leaf(target.clone(), false);
    let lp = branch_loss_node(&mut tape, graph.primary_pre, target_leaf, loss_cfg)?;
    let (la_value, root) = match graph.auxiliary {
        Some(aux) => {
            let la = branch_loss_node(&mut tape, aux, graph.input, loss_cfg)?;
            let joint = joint_loss_node(&mut tape, lp, la, loss_cfg)?;
            (tape.scalar_value(la), joint)
        }
        None => {
            // Zero-weight auxiliary branch: the objective reduces to the
            // primary loss (scaled by its weight so the arithmetic matches
            // the two-branch formula exactly).
            let scaled = if with_auxiliary {
                unreachable!("auxiliary requested but missing")
            } else if loss_cfg.alpha_joint == 1.0 {
                tape.affine(lp, 1.0, 0.0)
            } else {
                lp
            };
            (0.0, scaled)
        }
    };
    tape.backward(root)?;
    let mut grads = BTreeMap::new();
    for (key, &node) in &graph.params {
        let g = tape
            .grad(node)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; tape.value(node).len()]);
        grads.insert(key.clone(), g);
    }
    Ok((
        grads,
        SampleLosses {
            joint: tape.scalar_value(root),
            primary: tape.scalar_value(lp),
            auxiliary: la_value,
        },
    ))
}

fn prepare_samples(pairs: &[PairedSample]) -> Result<Vec<(Tensor, Tensor, String)>> {
    pairs
        .iter()
        .map(|p| {
            if !p.degraded.same_shape(&p.clean) {
                return Err(Error::shape(
                    &format!("sample {}", p.sample_id),
                    format!("{:?}", p.clean.dims()),
                    format!("{:?}", p.degraded.dims()),
                ));
            }
            let input = Tensor::from_image(&to_model_range(&p.degraded)?);
            let target = Tensor::from_image(&to_model_range(&p.clean)?);
            Ok((input, target, p.sample_id.clone()))
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Joint,
    PrimaryOnly,
}

fn run(
    pairs: &[PairedSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mode: Mode,
) -> Result<(ParamSet, TrainReport)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if cfg.batch_size > pairs.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds dataset size {}",
            cfg.batch_size,
            pairs.len()
        )));
    }
    let (h, w, _) = pairs[0].degraded.dims();
    cfg.loss.validate_for(h.min(w))?;
    let samples = prepare_samples(pairs)?;

    let mut params = init_params(&cfg.network, cfg.seed)?;
    // Fail on incompatible resolutions before the first step.
    {
        let mut probe = Tape::new();
        build_forward(
            &mut probe,
            &samples[0].0,
            &params,
            &cfg.network,
            true,
            false,
        )?;
    }
    let with_aux = mode == Mode::Joint && cfg.loss.alpha_joint < 1.0;

    let mut order: Vec<usize> = Vec::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ SHUFFLE_SALT));
    let mut adam = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    let include: Box<dyn Fn(Group) -> bool> = match mode {
        Mode::Joint => Box::new(|_| true),
        // The auxiliary head stays frozen at its initialization.
        Mode::PrimaryOnly => Box::new(|g| g != Group::Auxiliary),
    };

    let mut report = TrainReport {
        joint: Vec::with_capacity(cfg.iterations),
        primary: Vec::with_capacity(cfg.iterations),
        auxiliary: Vec::with_capacity(cfg.iterations),
        wall_seconds: 0.0,
        final_checkpoint: None,
        seed: cfg.seed,
        config: cfg.clone(),
    };
    let start = Instant::now();

    for iteration in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut shuffle_rng);
            }
            batch.push(order.pop().expect("refilled above"));
        }

        let results: Vec<_> = batch
            .par_iter()
            .map(|&idx| {
                let (input, target, _) = &samples[idx];
                sample_grads(input, target, &params, &cfg.network, &cfg.loss, with_aux)
            })
            .collect::<Result<Vec<_>>>()?;

        let losses_finite = results.iter().all(|(_, l)| l.joint.is_finite());
        if !losses_finite {
            return Err(Error::NonFiniteLoss {
                iteration,
                batch_ids: batch.iter().map(|&i| samples[i].2.clone()).collect(),
            });
        }

        // Deterministic reduction in batch order.
        let inv = 1.0 / cfg.batch_size as f32;
        let mut mean_grads: BTreeMap<(Group, String), Vec<f32>> = BTreeMap::new();
        for (grads, _) in &results {
            for (key, g) in grads {
                let acc = mean_grads
                    .entry(key.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        for g in mean_grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= inv);
        }

        report
            .joint
            .push(results.iter().map(|(_, l)| l.joint).sum::<f32>() * inv);
        report
            .primary
            .push(results.iter().map(|(_, l)| l.primary).sum::<f32>() * inv);
        report
            .auxiliary
            .push(results.iter().map(|(_, l)| l.auxiliary).sum::<f32>() * inv);

        adam.step(&mut params, &mean_grads, cfg.learning_rate, &include);

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every != 0 && (iteration + 1) % cfg.checkpoint_every == 0 {
                for (g, name, arr) in params.iter() {
                    if arr.data.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!(
                            "parameter {}/{name} after iteration {iteration}",
                            g.as_str()
                        )));
                    }
                }
                save_checkpoint(
                    &dir.join(format!("ckpt_{:06}.json", iteration + 1)),
                    &params,
                    &cfg.network,
                )?;
            }
        }
        if (iteration + 1) % 100 == 0 {
            log::info!(
                "iteration {}/{}: joint {:.4}",
                iteration + 1,
                cfg.iterations,
                report.joint[iteration]
            );
        }
    }

    report.wall_seconds = start.elapsed().as_secs_f64();
    params.validate(&cfg.network)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = dir.join("model.ckpt");
        save_checkpoint(&ckpt, &params, &cfg.network)?;
        report.final_checkpoint = Some(ckpt.display().to_string());
        report.save(&dir.join("train_report.json"))?;
    }
    Ok((params, report))
}

/// Salt separating the epoch-shuffle stream from other seed derivations.
const SHUFFLE_SALT: u64 = 0x7368_7566_666c_65;

/// Joint two-branch training with the weighted objective.
pub fn train(
    pairs: &[PairedSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ParamSet, TrainReport)> {
    run(pairs, cfg, out_dir, Mode::Joint)
}

/// Primary branch alone: the loss is the primary branch loss and the
/// auxiliary head keeps its initialization, bit for bit.
pub fn train_primary_only(
    pairs: &[PairedSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ParamSet, TrainReport)> {
    run(pairs, cfg, out_dir, Mode::PrimaryOnly)
}
