//! Run configuration: one JSON document whose omitted fields fall back to the
//! named `paper-iv-a` preset (gamma 0.15, p 2, alpha 0.5, lambdas 0.01/1/1,
//! lr 1e-5 with 10x heads, weight decay 5e-4, batch 15).
//!
//! Resolving produces a fully materialized [`RunConfig`] that serializes back
//! into the same schema, so every run is reproducible from its resolved
//! config file alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{DidError, Result};
use crate::losses::LossConfig;
use crate::model::BackboneConfig;
use crate::training::TrainingConfig;

pub const PRESET_NAME: &str = "paper-iv-a";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_manifest: Option<PathBuf>,
    /// Leave-one-domain-out: hold this fake domain out of training.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub holdout_domain: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub real_train_fraction: Option<f64>,
}

/// Fully resolved configuration; also the on-disk schema (all fields present
/// after resolution, all optional before).
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub defaults_from: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub data: DataPaths,
    pub backbone: BackboneConfig,
    pub training: TrainingConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    defaults_from: Option<String>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    synthetic: Option<RawSynthetic>,
    data: Option<DataPaths>,
    backbone: Option<RawBackbone>,
    training: Option<RawTraining>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSynthetic {
    image_size: Option<usize>,
    k: Option<usize>,
    samples_per_domain: Option<usize>,
    seed: Option<u64>,
    corruption_strength: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackbone {
    input_size: Option<usize>,
    channel_widths: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    // LossConfig fields are inlined here under a `loss` key.
    loss: Option<RawLoss>,
    base_lr: Option<f64>,
    head_lr_multiplier: Option<f64>,
    weight_decay: Option<f64>,
    batch_size: Option<usize>,
    iterations_per_epoch: Option<usize>,
    max_epochs: Option<usize>,
    seed: Option<u64>,
    disable_domain_branch: Option<bool>,
    disable_decorrelation: Option<bool>,
    alpha_override: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoss {
    gamma: Option<f64>,
    p: Option<f64>,
    alpha: Option<f64>,
    lambda_dec: Option<f64>,
    lambda_cls: Option<f64>,
    lambda_dom: Option<f64>,
}

impl RunConfig {
    /// Parses and resolves a config file against the preset defaults.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| DidError::io(format!("reading config {}", path.display()), e))?;
        let raw: RawRunConfig = serde_json::from_str(&text)
            .map_err(|e| DidError::Config(format!("parsing {}: {e}", path.display())))?;
        RunConfig::resolve(raw)
    }

    pub fn default_resolved() -> RunConfig {
        RunConfig::resolve(RawRunConfig::default()).expect("defaults are valid")
    }

    fn resolve(raw: RawRunConfig) -> Result<RunConfig> {
        if let Some(preset) = &raw.defaults_from {
            if preset != PRESET_NAME {
                return Err(DidError::Config(format!(
                    "unknown defaults_from preset {preset:?}; the only preset is {PRESET_NAME:?}"
                )));
            }
        }
        let seed = raw.seed.unwrap_or(0);

        let s = raw.synthetic.unwrap_or_default();
        let sd = SyntheticSpec::default();
        let synthetic = SyntheticSpec {
            image_size: s.image_size.unwrap_or(sd.image_size),
            k: s.k.unwrap_or(sd.k),
            samples_per_domain: s.samples_per_domain.unwrap_or(sd.samples_per_domain),
            seed: s.seed.unwrap_or(seed),
            corruption_strength: s.corruption_strength.unwrap_or(sd.corruption_strength),
        };

        let b = raw.backbone.unwrap_or_default();
        let bd = BackboneConfig::default();
        let backbone = BackboneConfig {
            input_size: b.input_size.unwrap_or(synthetic.image_size.max(16)),
            channel_widths: b.channel_widths.unwrap_or(bd.channel_widths),
        };

        let t = raw.training.unwrap_or_default();
        let l = t.loss.unwrap_or_default();
        let ld = LossConfig::default();
        let loss = LossConfig {
            gamma: l.gamma.unwrap_or(ld.gamma),
            p: l.p.unwrap_or(ld.p),
            alpha: l.alpha.unwrap_or(ld.alpha),
            lambda_dec: l.lambda_dec.unwrap_or(ld.lambda_dec),
            lambda_cls: l.lambda_cls.unwrap_or(ld.lambda_cls),
            lambda_dom: l.lambda_dom.unwrap_or(ld.lambda_dom),
        };
        let td = TrainingConfig::default();
        let training = TrainingConfig {
            loss,
            base_lr: t.base_lr.unwrap_or(td.base_lr),
            head_lr_multiplier: t.head_lr_multiplier.unwrap_or(td.head_lr_multiplier),
            weight_decay: t.weight_decay.unwrap_or(td.weight_decay),
            batch_size: t.batch_size.unwrap_or(td.batch_size),
            iterations_per_epoch: t.iterations_per_epoch,
            max_epochs: t.max_epochs.unwrap_or(td.max_epochs),
            seed: t.seed.unwrap_or(seed),
            disable_domain_branch: t.disable_domain_branch.unwrap_or(false),
            disable_decorrelation: t.disable_decorrelation.unwrap_or(false),
            alpha_override: t.alpha_override,
        };

        let config = RunConfig {
            defaults_from: PRESET_NAME.to_string(),
            seed,
            out_dir: raw.out_dir,
            synthetic,
            data: raw.data.unwrap_or_default(),
            backbone,
            training,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.backbone.validate()?;
        self.training.validate()?;
        if let Some(f) = self.data.real_train_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(DidError::Config(format!(
                    "real_train_fraction must be in (0, 1), got {f}"
                )));
            }
        }
        Ok(())
    }

    /// Override the master seed, cascading into the synthetic and training
    /// seeds that were not explicitly pinned elsewhere.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synthetic.seed = seed;
        self.training.seed = seed;
    }

    /// Writes the resolved config beside other run outputs.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text)
            .map_err(|e| DidError::io(format!("writing {}", path.display()), e))
    }
}
