//! Named parameter storage, the layer table, and deterministic init.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::data::{fnv1a64, splitmix64};
use crate::error::{Error, Result};
use crate::network::NetworkConfig;

pub const PARAMS_VERSION: u32 = 1;

/// Which of the three parameter partitions an array belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Shared,
    Primary,
    Auxiliary,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Shared, Group::Primary, Group::Auxiliary];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Shared => "shared",
            Group::Primary => "primary_head",
            Group::Auxiliary => "auxiliary_head",
        }
    }
}

/// One named parameter array. Weights are `[c_out, c_in, kh, kw]`, biases
/// `[c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl PArray {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// View as a `[C, H, W]` tape tensor.
    pub fn tensor(&self) -> Tensor {
        let (c, h, w) = match self.shape.len() {
            1 => (self.shape[0], 1, 1),
            4 => (self.shape[0], self.shape[1] * self.shape[2], self.shape[3]),
            _ => (1, 1, self.data.len()),
        };
        Tensor {
            c,
            h,
            w,
            data: self.data.clone(),
        }
    }
}

/// The network parameters, partitioned into shared trunk, primary head and
/// auxiliary head. Immutable during forward passes; training and adaptation
/// own private mutable copies.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub shared: BTreeMap<String, PArray>,
    pub primary_head: BTreeMap<String, PArray>,
    pub auxiliary_head: BTreeMap<String, PArray>,
    pub version: u32,
}

impl ParamSet {
    pub fn group(&self, g: Group) -> &BTreeMap<String, PArray> {
        match g {
            Group::Shared => &self.shared,
            Group::Primary => &self.primary_head,
            Group::Auxiliary => &self.auxiliary_head,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut BTreeMap<String, PArray> {
        match g {
            Group::Shared => &mut self.shared,
            Group::Primary => &mut self.primary_head,
            Group::Auxiliary => &mut self.auxiliary_head,
        }
    }

    pub fn get(&self, g: Group, name: &str) -> Result<&PArray> {
        self.group(g)
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {}/{name}", g.as_str())))
    }

    /// Canonical iteration order: shared, primary, auxiliary; names sorted.
    pub fn iter(&self) -> impl Iterator<Item = (Group, &str, &PArray)> {
        Group::ALL.into_iter().flat_map(move |g| {
            self.group(g)
                .iter()
                .map(move |(name, arr)| (g, name.as_str(), arr))
        })
    }

    pub fn param_count(&self) -> usize {
        self.iter().map(|(_, _, a)| a.len()).sum()
    }

    /// Checks name-set disjointness, finiteness, and shape agreement with the
    /// layer table derived from `cfg`.
    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        for (g, name, arr) in self.iter() {
            if arr.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {}/{name}", g.as_str())));
            }
            let owners = Group::ALL
                .into_iter()
                .filter(|&og| self.group(og).contains_key(name))
                .count();
            if owners != 1 {
                return Err(Error::Config(format!(
                    "parameter name {name} appears in {owners} groups; name-sets must be disjoint"
                )));
            }
        }
        let table = layer_shapes(cfg);
        if table.len() != self.shared.len() + self.primary_head.len() + self.auxiliary_head.len() {
            return Err(Error::Config(format!(
                "parameter table mismatch: expected {} arrays, found {}",
                table.len(),
                self.shared.len() + self.primary_head.len() + self.auxiliary_head.len()
            )));
        }
        for (g, name, shape) in &table {
            let arr = self.get(*g, name)?;
            if &arr.shape != shape {
                return Err(Error::shape(
                    &format!("parameter {}/{name}", g.as_str()),
                    format!("{shape:?}"),
                    format!("{:?}", arr.shape),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical encoding of every array; a stable identity
    /// for immutability checks.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (g, name, arr) in self.iter() {
            hasher.update(g.as_str().as_bytes());
            hasher.update(b"/");
            hasher.update(name.as_bytes());
            hasher.update(b":");
            for &d in &arr.shape {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in &arr.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The full layer table for a configuration: `(group, name, shape)` for every
/// parameter array, in canonical order.
pub fn layer_shapes(cfg: &NetworkConfig) -> Vec<(Group, String, Vec<usize>)> {
    let mut table = Vec::new();
    let ch = |s: usize| cfg.channels_at(s);
    let mut conv = |g: Group, name: &str, c_out: usize, c_in: usize, k: usize| {
        table.push((g, format!("{name}.w"), vec![c_out, c_in, k, k]));
        table.push((g, format!("{name}.b"), vec![c_out]));
    };

    conv(Group::Shared, "enc0.conv1", ch(0), 3, 3);
    conv(Group::Shared, "enc0.conv2", ch(0), ch(0), 3);
    for s in 1..cfg.scales {
        conv(Group::Shared, &format!("down{s}"), ch(s), ch(s - 1), 3);
        // conv1 also takes the recurrence channels from the finer decoder.
        conv(
            Group::Shared,
            &format!("enc{s}.conv1"),
            ch(s),
            ch(s) + ch(s - 1),
            3,
        );
        conv(Group::Shared, &format!("enc{s}.conv2"), ch(s), ch(s), 3);
    }
    for s in 0..cfg.scales.saturating_sub(1) {
        conv(
            Group::Shared,
            &format!("dec{s}.conv1"),
            ch(s),
            ch(s + 1) + ch(s),
            3,
        );
        conv(Group::Shared, &format!("dec{s}.conv2"), ch(s), ch(s), 3);
        conv(Group::Shared, &format!("mask{s}"), 1, ch(s), 1);
    }
    conv(Group::Primary, "primary.conv1", ch(0), ch(0), 3);
    conv(Group::Primary, "primary.conv2", 3, ch(0), 3);
    conv(Group::Auxiliary, "aux.conv1", ch(0), ch(0) + 3, 3);
    conv(Group::Auxiliary, "aux.conv2", 3, ch(0), 3);
    table
}

/// Fan-in-scaled uniform init with zero biases; each array draws from its own
/// seed derived from `(seed, group, name)`, so the result is independent of
/// iteration order and identical for identical seeds.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let gain = (2.0 / (1.0 + cfg.activation_slope * cfg.activation_slope)).sqrt();
    let mut set = ParamSet {
        shared: BTreeMap::new(),
        primary_head: BTreeMap::new(),
        auxiliary_head: BTreeMap::new(),
        version: PARAMS_VERSION,
    };
    for (g, name, shape) in layer_shapes(cfg) {
        let arr = if shape.len() == 1 {
            PArray::zeros(shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let limit = gain * (3.0 / fan_in as f32).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
                seed ^ fnv1a64(&format!("{}/{name}", g.as_str())),
            ));
            let len = shape.iter().product();
            PArray {
                shape,
                data: (0..len).map(|_| rng.gen_range(-limit..limit)).collect(),
            }
        };
        set.group_mut(g).insert(name, arr);
    }
    Ok(set)
}
