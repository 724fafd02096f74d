//! Experiment configuration files (TOML, or JSON by extension).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::RoundConfig;
use crate::model::{ModelConfig, Preset};
use crate::strategies::{Hyperparameters, PluginOverrides, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub strategy: Strategy,
    #[serde(default)]
    pub hyper: Hyperparameters,
    #[serde(default)]
    pub plugin: PluginOverrides,
    pub round: RoundSection,
    pub data: DataConfig,
}

/// Either a preset with image/patch/class settings, or explicit dimensions
/// (`embed_dim`, `depth`, `num_heads`, `mlp_ratio`) without a preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub image_size: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_layers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundSection {
    pub total_rounds: usize,
    pub num_clients: usize,
    pub participation_ratio: f64,
    #[serde(default)]
    pub uniform_weights: bool,
    /// Evaluate every this many rounds for a learning curve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Folder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Dirichlet,
    Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset root for `folder`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Sample count for `synth`.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Domain count for `synth`.
    #[serde(default = "one")]
    pub domains: usize,
    #[serde(default = "default_partition")]
    pub partition: PartitionKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Clients per domain for `domain` partitions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients_per_domain: Option<usize>,
    #[serde(default = "default_min_per_client")]
    pub min_per_client: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_samples() -> usize {
    1000
}
fn default_noise() -> f64 {
    0.1
}
fn one() -> usize {
    1
}
fn default_partition() -> PartitionKind {
    PartitionKind::Dirichlet
}
fn default_alpha() -> f64 {
    0.1
}
fn default_min_per_client() -> usize {
    4
}
fn default_test_fraction() -> f64 {
    0.25
}

impl ExperimentConfig {
    /// Parse TOML and validate. Syntax errors carry the line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config("<toml>", e.to_string().trim_end()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config("<json>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `.json` files are read as JSON, everything else as TOML.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = match m.preset {
            Some(p) => {
                if m.embed_dim.is_some() || m.depth.is_some() || m.num_heads.is_some() || m.mlp_ratio.is_some() {
                    return Err(Error::config(
                        "model.preset",
                        "explicit dimensions cannot be combined with a preset",
                    ));
                }
                ModelConfig::from_preset(p, m.image_size, m.patch_size, m.num_classes)
            }
            None => {
                let need = |v: Option<usize>, f: &str| v.ok_or_else(|| Error::config(f, "required without a preset"));
                ModelConfig {
                    image_size: m.image_size,
                    patch_size: m.patch_size,
                    channels: 3,
                    embed_dim: need(m.embed_dim, "model.embed_dim")?,
                    depth: need(m.depth, "model.depth")?,
                    num_heads: need(m.num_heads, "model.num_heads")?,
                    mlp_ratio: m
                        .mlp_ratio
                        .ok_or_else(|| Error::config("model.mlp_ratio", "required without a preset"))?,
                    num_classes: m.num_classes,
                    head_layers: 2,
                    preset: None,
                }
            }
        };
        if let Some(h) = m.head_layers {
            cfg.head_layers = h;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            total_rounds: self.round.total_rounds,
            num_clients: self.round.num_clients,
            participation_ratio: self.round.participation_ratio,
            seed: self.seed,
            uniform_weights: self.round.uniform_weights,
            eval_every: self.round.eval_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model_config()?;
        self.round_config().validate()?;
        self.hyper.validate()?;
        if let Some(spec) = self.strategy.plugin_spec(&self.plugin) {
            spec.validate(&model)?;
        }
        let d = &self.data;
        if !(d.alpha.is_finite() && d.alpha > 0.0) {
            return Err(Error::config("data.alpha", "must be positive"));
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::config("data.test_fraction", "must lie strictly between 0 and 1"));
        }
        if !(d.noise.is_finite() && d.noise >= 0.0) {
            return Err(Error::config("data.noise", "must be non-negative"));
        }
        match d.source {
            DataSource::Synth => {
                if d.path.is_some() {
                    return Err(Error::config("data.path", "only used with source = \"folder\""));
                }
                if d.samples < model.num_classes {
                    return Err(Error::config("data.samples", "must be at least model.num_classes"));
                }
                if d.domains == 0 {
                    return Err(Error::config("data.domains", "must be at least 1"));
                }
            }
            DataSource::Folder => {
                if d.path.is_none() {
                    return Err(Error::config("data.path", "required with source = \"folder\""));
                }
            }
        }
        if d.partition == PartitionKind::Domain {
            let k = d
                .clients_per_domain
                .ok_or_else(|| Error::config("data.clients_per_domain", "required for domain partitions"))?;
            if k == 0 {
                return Err(Error::config("data.clients_per_domain", "must be at least 1"));
            }
            if d.source == DataSource::Synth && d.domains * k != self.round.num_clients {
                return Err(Error::config(
                    "round.num_clients",
                    format!("must equal data.domains × data.clients_per_domain = {}", d.domains * k),
                ));
            }
        } else if d.clients_per_domain.is_some() {
            return Err(Error::config(
                "data.clients_per_domain",
                "only used with partition = \"domain\"",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
seed = 7

[model]
preset = "desk-tiny"
image_size = 16
patch_size = 4
num_classes = 4

[strategy]
name = "layer_type_local"
tags = ["attention"]

[round]
total_rounds = 2
num_clients = 4
participation_ratio = 0.5

[data]
source = "synth"
samples = 120
"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(
            cfg.strategy,
            Strategy::LayerTypeLocal {
                tags: vec![crate::params::LayerTag::Attention],
                with_head: false
            }
        );
        assert_eq!(cfg.model_config().unwrap().embed_dim, 32);
        assert_eq!(cfg.data.alpha, 0.1);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let bad = MINIMAL.replace("samples = 120", "samples = 120\nsampels = 3");
        let msg = ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(msg.contains("sampels") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn errors_name_the_field() {
        let bad = MINIMAL.replace("participation_ratio = 0.5", "participation_ratio = 0.0");
        let msg = ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(msg.contains("participation_ratio"), "{msg}");
        let bad = MINIMAL.replace(
            "source = \"synth\"",
            "source = \"synth\"\npartition = \"domain\"\nclients_per_domain = 3",
        );
        let msg = ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(msg.contains("num_clients"), "{msg}");
    }
}
