//! The run configuration file: one TOML document carrying every tunable of
//! the pipeline. Unknown keys are rejected so typos fail fast, and the
//! schema is versioned. Command-line flags override file values.

use std::path::Path;

use anyhow::{bail, Context, Result};
use occlusim_core::adaptation::AdaptConfig;
use occlusim_core::imaging::{CompositionOrder, DegradationSpec, OccluderKind};
use occlusim_core::losses::LossConfig;
use occlusim_core::network::NetworkConfig;
use occlusim_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Output resolution `[height, width]`.
    pub resolution: [usize; 2],
    pub train_fraction: f64,
    /// `[tau_complete, tau_partial]` cuts for stored masks.
    pub thresholds: [f32; 2],
    pub composition: CompositionOrder,
    /// Pairs generated per occluder kind.
    pub count_per_kind: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            resolution: [64, 64],
            train_fraction: 0.89,
            thresholds: [0.05, 0.95],
            composition: CompositionOrder::default(),
            count_per_kind: 8,
        }
    }
}

impl DataSection {
    pub fn to_core(&self) -> occlusim_core::data::DataConfig {
        occlusim_core::data::DataConfig {
            resolution: (self.resolution[0], self.resolution[1]),
            train_fraction: self.train_fraction,
            thresholds: (self.thresholds[0], self.thresholds[1]),
            composition: self.composition,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_epsilon: f32,
    pub checkpoint_every: usize,
    pub seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            iterations: d.iterations,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_epsilon: d.adam_epsilon,
            checkpoint_every: d.checkpoint_every,
            seed: None,
        }
    }
}

/// One `[[degradations]]` entry; unset fields take the kind's defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSection {
    pub kind: String,
    #[serde(default)]
    pub blob_count_range: Option<[usize; 2]>,
    #[serde(default)]
    pub blob_radius_range: Option<[f32; 2]>,
    #[serde(default)]
    pub alpha_floor: Option<f32>,
    #[serde(default)]
    pub psf_radius_range: Option<[f32; 2]>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub degradations: Vec<DegradationSection>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfigFile =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!(
                "config schema_version {} unsupported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            );
        }
        Ok(cfg)
    }

    /// Degradation specs for generation: listed entries with their overrides,
    /// or all four kinds at defaults when the list is empty. Blob radii are
    /// rescaled to the configured resolution.
    pub fn degradation_specs(&self, seed: u64) -> Result<Vec<DegradationSpec>> {
        let min_dim = self.data.resolution[0].min(self.data.resolution[1]);
        let build = |kind: OccluderKind, over: Option<&DegradationSection>| {
            let mut spec = DegradationSpec::default_for(kind, seed).scaled_for(min_dim);
            if let Some(o) = over {
                if let Some(r) = o.blob_count_range {
                    spec.blob_count_range = (r[0], r[1]);
                }
                if let Some(r) = o.blob_radius_range {
                    spec.blob_radius_range = (r[0], r[1]);
                }
                if let Some(f) = o.alpha_floor {
                    spec.alpha_floor = f;
                }
                if let Some(r) = o.psf_radius_range {
                    spec.psf_radius_range = (r[0], r[1]);
                }
            }
            spec
        };
        if self.degradations.is_empty() {
            return Ok(OccluderKind::ALL.iter().map(|&k| build(k, None)).collect());
        }
        self.degradations
            .iter()
            .map(|d| {
                let kind = OccluderKind::parse(&d.kind)
                    .with_context(|| format!("degradation kind '{}'", d.kind))?;
                Ok(build(kind, Some(d)))
            })
            .collect()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.train.iterations,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            adam_beta1: self.train.adam_beta1,
            adam_beta2: self.train.adam_beta2,
            adam_epsilon: self.train.adam_epsilon,
            seed,
            checkpoint_every: self.train.checkpoint_every,
            loss: self.loss.clone(),
            network: self.network.clone(),
        }
    }
}

/// Seed precedence: explicit flag, then the config file, then the
/// `OCCLUSIM_SEED` environment variable, then 0.
pub fn resolve_seed(flag: Option<u64>, from_config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = from_config {
        return Ok(s);
    }
    match std::env::var("OCCLUSIM_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .with_context(|| format!("OCCLUSIM_SEED='{v}' is not a u64")),
        Err(_) => Ok(0),
    }
}
