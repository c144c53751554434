//! Run configuration file shared by every command-line subcommand.
//!
//! The file is TOML: a few top-level paths plus one table per concern.
//!
//! ```toml
//! data = "out/data.dsc"          # dataset container (written by gen-data)
//! checkpoint = "out/model.dsc"   # checkpoint container (written by train)
//! out_dir = "out"                # reports, logs, CSV dumps
//!
//! [synthetic]   # SyntheticSpec: n_identities, samples_per_identity, grid_h, grid_w,
//!               # channels, signal_patch_count, noise_patch_count, noise_scale,
//!               # intra_class_jitter, signal_scale, seed
//! [model]       # ModelConfig: grid_h, grid_w, channels, n_blocks, beta, ffd_hidden,
//!               # n_identities, backbone, residual, embedding, seed
//! [train]       # TrainConfig: optimizer, base_lr, lr_start, lr_min, warmup_iters,
//!               # schedule, step_milestones, step_gamma, epochs, pk_p, pk_k, seed,
//!               # eval_every
//! [loss]        # LossConfig: loss_weight_res, loss_weight_triplet, loss_weight_id,
//!               # margin, mining
//! [ablate]      # betas
//! [inspect]     # split (train | query | gallery), index
//! ```
//!
//! Model keys `grid_h`, `grid_w`, `channels` and `n_identities` default to the
//! values in `[synthetic]`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::losses::LossConfig;
use crate::model::{Backbone, Embedding, ModelConfig};
use crate::sasamg::Percentile;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub grid_h: Option<usize>,
    pub grid_w: Option<usize>,
    pub channels: Option<usize>,
    pub n_blocks: Option<usize>,
    pub beta: Option<Percentile>,
    pub ffd_hidden: Option<usize>,
    pub n_identities: Option<usize>,
    pub backbone: Option<Backbone>,
    pub residual: Option<bool>,
    pub embedding: Option<Embedding>,
    pub seed: Option<u64>,
}

fn default_betas() -> Vec<Percentile> {
    [0.0, 75.0, 85.0, 95.0, 98.0]
        .into_iter()
        .map(|b| Percentile::new(b).expect("valid"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    #[serde(default = "default_betas")]
    pub betas: Vec<Percentile>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            betas: default_betas(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    #[default]
    Query,
    Gallery,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectSection {
    #[serde(default)]
    pub split: SplitName,
    #[serde(default)]
    pub index: usize,
}

fn default_data() -> PathBuf {
    PathBuf::from("out/data.dsc")
}

fn default_checkpoint() -> PathBuf {
    PathBuf::from("out/model.dsc")
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_data")]
    pub data: PathBuf,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub inspect: InspectSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("every key has a default")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a config file; relative paths inside it stay relative to the
    /// working directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let s = &self.synthetic;
        let base = ModelConfig::new(
            m.grid_h.unwrap_or(s.grid_h),
            m.grid_w.unwrap_or(s.grid_w),
            m.channels.unwrap_or(s.channels),
            m.n_identities.unwrap_or(s.n_identities),
        );
        let cfg = ModelConfig {
            n_blocks: m.n_blocks.unwrap_or(base.n_blocks),
            beta: m.beta.unwrap_or(base.beta),
            ffd_hidden: m.ffd_hidden.unwrap_or(base.ffd_hidden),
            backbone: m.backbone.unwrap_or(base.backbone),
            residual: m.residual.unwrap_or(base.residual),
            embedding: m.embedding.unwrap_or(base.embedding),
            seed: m.seed.unwrap_or(base.seed),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
