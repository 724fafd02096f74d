//! Analytic forward-pass FLOPs: two per multiply-accumulate of every matrix
//! product. Normalization, softmax and activations are not counted.

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::plugins::{PluginKind, PluginSpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub patch_embed: u64,
    /// Base transformer blocks, including any extra prompt tokens.
    pub blocks: u64,
    /// Adapters and attention over prefix positions.
    pub plugins: u64,
    pub head: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.blocks + self.plugins + self.head
    }
}

/// FLOPs of one forward pass over `batch` images.
pub fn count_flops(config: &ModelConfig, plugins: &[&PluginSpec], batch: usize) -> FlopCount {
    let d = config.embed_dim as u64;
    let hid = config.mlp_hidden() as u64;
    let np = config.num_patches() as u64;
    let prompts: u64 = plugins.iter().map(|p| p.extra_tokens() as u64).sum();
    let t = config.seq_len() as u64 + prompts;

    let per_block = 2 * t * d * d * 4 // q, k, v, o projections
        + 2 * 2 * t * t * d // scores and weighted values
        + 2 * 2 * t * d * hid; // fc1, fc2

    let mut extra = 0u64;
    for spec in plugins {
        let blocks = spec.blocks(config).len() as u64;
        let h = spec.hidden_dim as u64;
        extra += blocks
            * match spec.kind {
                PluginKind::VanillaPrefix => 2 * 2 * t * spec.prefix_len as u64 * d,
                // generator (d -> h -> 2d) plus attention over one prefix row per token
                PluginKind::AdapterPrefix => 2 * t * (d * h + h * 2 * d) + 2 * 2 * t * t * d,
                PluginKind::MlpAdapter => 2 * t * (d * h + h * d),
                PluginKind::Prompt => 0,
            };
    }

    let b = batch as u64;
    FlopCount {
        patch_embed: b * 2 * np * config.patch_dim() as u64 * d,
        blocks: b * config.depth as u64 * per_block,
        plugins: b * extra,
        head: b * 2 * d * config.num_classes as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    #[test]
    fn vit_small_block_by_hand() {
        let cfg = ModelConfig::vit_small(100);
        let f = count_flops(&cfg, &[], 1);
        // 197 tokens: projections 232,390,656 + attention 59,610,624 + MLP 464,781,312
        assert_eq!(f.blocks, 12 * 756_782_592);
        assert_eq!(f.head, 2 * 384 * 100);
        assert_eq!(f.patch_embed, 2 * 196 * 768 * 384);
    }

    #[test]
    fn adapter_extra_by_hand() {
        let cfg = ModelConfig::vit_small(100);
        let spec = PluginSpec::new(PluginKind::AdapterPrefix);
        let f = count_flops(&cfg, &[&spec], 1);
        assert_eq!(f.plugins, 12 * (116_195_328 + 59_610_624));
    }

    #[test]
    fn block_flops_linear_in_depth() {
        let mut cfg = ModelConfig::from_preset(Preset::DeskTiny, 16, 8, 4);
        let one = count_flops(&cfg, &[], 3);
        cfg.depth *= 2;
        cfg.preset = None;
        let two = count_flops(&cfg, &[], 3);
        assert_eq!(two.blocks, 2 * one.blocks);
        assert_eq!(two.head, one.head);
    }

    #[test]
    fn linear_in_batch() {
        let cfg = ModelConfig::from_preset(Preset::DeskTiny, 16, 4, 4);
        let spec = PluginSpec::new(PluginKind::Prompt);
        assert_eq!(
            count_flops(&cfg, &[&spec], 5).total(),
            5 * count_flops(&cfg, &[&spec], 1).total()
        );
        assert!(count_flops(&cfg, &[&spec], 1).blocks > count_flops(&cfg, &[], 1).blocks);
    }
}
