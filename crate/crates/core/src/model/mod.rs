//! Vision Transformer with tagged parameters.
//!
//! The network is a standard pre-norm ViT: linear patch embedding, a learned
//! `[CLS]` token and position embeddings, `depth` blocks of multi-head
//! self-attention and GELU MLP, a final LayerNorm and a linear head reading
//! the `[CLS]` token. Forward and backward passes are written out by hand in
//! 64-bit floats; see [`vit`] for the batched implementation and
//! [`attention`] for the single-sequence attention operators.

pub mod attention;
pub mod flops;
pub mod loss;
pub(crate) mod ops;
pub(crate) mod vit;

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Catalog, LayerTag, ParamInfo, ParameterSet, Selector};
use crate::plugins::PluginState;
use crate::rng::truncated_normal_vec;

pub use attention::{attention_forward, decomposed_attention, AttentionState, DecomposedAttentionOutput, Prefixes};
pub use flops::{count_flops, FlopCount};
pub use loss::{cross_entropy_grad, cross_entropy_loss};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "vit-tiny")]
    VitTiny,
    #[serde(rename = "vit-small")]
    VitSmall,
    #[serde(rename = "vit-base")]
    VitBase,
    #[serde(rename = "desk-tiny")]
    DeskTiny,
}

impl Preset {
    /// `(embed_dim, depth, num_heads, mlp_ratio)`
    pub fn dims(self) -> (usize, usize, usize, f64) {
        match self {
            Preset::VitTiny => (192, 12, 3, 4.0),
            Preset::VitSmall => (384, 12, 6, 4.0),
            Preset::VitBase => (768, 12, 12, 4.0),
            Preset::DeskTiny => (32, 2, 2, 2.0),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::VitTiny => "vit-tiny",
            Preset::VitSmall => "vit-small",
            Preset::VitBase => "vit-base",
            Preset::DeskTiny => "desk-tiny",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    /// Trailing layers tagged as the classification head.
    pub head_layers: usize,
    pub preset: Option<Preset>,
}

impl ModelConfig {
    pub fn from_preset(preset: Preset, image_size: usize, patch_size: usize, num_classes: usize) -> Self {
        let (embed_dim, depth, num_heads, mlp_ratio) = preset.dims();
        ModelConfig {
            image_size,
            patch_size,
            channels: 3,
            embed_dim,
            depth,
            num_heads,
            mlp_ratio,
            num_classes,
            head_layers: 2,
            preset: Some(preset),
        }
    }

    /// ViT-S/16 at 224px.
    pub fn vit_small(num_classes: usize) -> Self {
        Self::from_preset(Preset::VitSmall, 224, 16, num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("num_classes", self.num_classes),
            ("head_layers", self.head_layers),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{field}"), "must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "model.image_size",
                format!(
                    "image size {} not divisible by patch size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "model.embed_dim",
                format!("embed dim {} not divisible by {} heads", self.embed_dim, self.num_heads),
            ));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::config("model.mlp_ratio", "must give a positive MLP width"));
        }
        if let Some(p) = self.preset {
            let (d, depth, h, r) = p.dims();
            if (d, depth, h) != (self.embed_dim, self.depth, self.num_heads) || r != self.mlp_ratio {
                return Err(Error::config(
                    "model.preset",
                    format!("dimensions do not match preset {p}"),
                ));
            }
        }
        let groups = self.layer_groups().len();
        if self.head_layers > groups {
            return Err(Error::config(
                "model.head_layers",
                format!("{} exceeds the {groups} layers of the model", self.head_layers),
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// `[CLS]` plus patches (prompts not included).
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Logical layers in forward order with their natural tag.
    ///
    /// A "layer" is the unit counted by `head_layers`: the head linear, the
    /// final norm, each MLP linear, each block norm and each attention module.
    pub fn layer_groups(&self) -> Vec<(LayerTag, Vec<ParamInfo>)> {
        let d = self.embed_dim;
        let hid = self.mlp_hidden();
        let mut groups = vec![
            (
                LayerTag::PatchEmbedding,
                vec![
                    ParamInfo::new("patch_embed.weight", LayerTag::PatchEmbedding, &[self.patch_dim(), d]),
                    ParamInfo::new("patch_embed.bias", LayerTag::PatchEmbedding, &[d]),
                ],
            ),
            (
                LayerTag::PatchEmbedding,
                vec![ParamInfo::new("cls_token", LayerTag::PatchEmbedding, &[d])],
            ),
            (
                LayerTag::PositionEmbedding,
                vec![ParamInfo::new(
                    "pos_embed",
                    LayerTag::PositionEmbedding,
                    &[self.seq_len(), d],
                )],
            ),
        ];
        let ln = |prefix: String| {
            (
                LayerTag::Layernorm,
                vec![
                    ParamInfo::new(format!("{prefix}.weight"), LayerTag::Layernorm, &[d]),
                    ParamInfo::new(format!("{prefix}.bias"), LayerTag::Layernorm, &[d]),
                ],
            )
        };
        for i in 0..self.depth {
            groups.push(ln(format!("blocks.{i}.norm1")));
            let mut attn = Vec::new();
            for p in ["q", "k", "v", "o"] {
                attn.push(ParamInfo::new(
                    format!("blocks.{i}.attn.w_{p}"),
                    LayerTag::Attention,
                    &[d, d],
                ));
                attn.push(ParamInfo::new(
                    format!("blocks.{i}.attn.b_{p}"),
                    LayerTag::Attention,
                    &[d],
                ));
            }
            groups.push((LayerTag::Attention, attn));
            groups.push(ln(format!("blocks.{i}.norm2")));
            groups.push((
                LayerTag::Mlp,
                vec![
                    ParamInfo::new(format!("blocks.{i}.mlp.fc1.weight"), LayerTag::Mlp, &[d, hid]),
                    ParamInfo::new(format!("blocks.{i}.mlp.fc1.bias"), LayerTag::Mlp, &[hid]),
                ],
            ));
            groups.push((
                LayerTag::Mlp,
                vec![
                    ParamInfo::new(format!("blocks.{i}.mlp.fc2.weight"), LayerTag::Mlp, &[hid, d]),
                    ParamInfo::new(format!("blocks.{i}.mlp.fc2.bias"), LayerTag::Mlp, &[d]),
                ],
            ));
        }
        groups.push(ln("norm".to_string()));
        groups.push((
            LayerTag::ClassificationHead,
            vec![
                ParamInfo::new("head.weight", LayerTag::ClassificationHead, &[d, self.num_classes]),
                ParamInfo::new("head.bias", LayerTag::ClassificationHead, &[self.num_classes]),
            ],
        ));
        groups
    }

    /// Base-model catalog; the trailing `head_layers` layers carry the
    /// classification-head tag.
    pub fn catalog(&self) -> Catalog {
        let groups = self.layer_groups();
        let first_head = groups.len().saturating_sub(self.head_layers);
        let mut entries = Vec::new();
        for (gi, (_, infos)) in groups.into_iter().enumerate() {
            for mut info in infos {
                if gi >= first_head {
                    info.tag = LayerTag::ClassificationHead;
                }
                entries.push(info);
            }
        }
        Catalog::new(entries)
    }

    /// Ids of the trailing `layers` layers, independent of how they are tagged.
    pub fn head_ids(&self, layers: usize) -> BTreeSet<String> {
        let groups = self.layer_groups();
        let first = groups.len().saturating_sub(layers);
        groups[first..]
            .iter()
            .flat_map(|(_, infos)| infos.iter().map(|i| i.id.clone()))
            .collect()
    }

    /// Every LayerNorm affine parameter, including the final pre-head norm.
    pub fn layernorm_ids(&self) -> BTreeSet<String> {
        self.layer_groups()
            .into_iter()
            .filter(|(tag, _)| *tag == LayerTag::Layernorm)
            .flat_map(|(_, infos)| infos.into_iter().map(|i| i.id))
            .collect()
    }
}

/// A mini-batch of images `[batch, channels, H, W]` in `[0, 1]` with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Array4<f64>, labels: Vec<usize>) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        Ok(Batch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub(crate) fn check(&self, config: &ModelConfig) -> Result<()> {
        let s = self.images.shape();
        let expected = [s[0], config.channels, config.image_size, config.image_size];
        if s != expected {
            return Err(Error::Input(format!(
                "batch images have shape {s:?}, model expects {expected:?}"
            )));
        }
        if s[0] != self.labels.len() {
            return Err(Error::Input("image/label count mismatch".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= config.num_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {} classes",
                config.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParameterSet,
}

/// Build a ViT with deterministic initialization from `seed`.
///
/// Matrices and the `[CLS]` token are truncated-normal (σ = 0.02, cut at 2σ),
/// biases and position embeddings are zero, LayerNorm scales are one.
pub fn build_vit(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    for info in config.catalog().entries() {
        let n = info.numel();
        let data = if info.id == "pos_embed" {
            vec![0.0; n]
        } else if info.id.contains("norm") && info.id.ends_with(".weight") {
            vec![1.0; n]
        } else if info.shape.len() == 2 || info.id == "cls_token" {
            truncated_normal_vec(&mut rng, n, INIT_STD)
        } else {
            vec![0.0; n]
        };
        let value = ArrayD::from_shape_vec(IxDyn(&info.shape), data).expect("catalog shape");
        params.insert(info.id.clone(), info.tag, value);
    }
    Ok(Model {
        config: config.clone(),
        params,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn catalog(&self) -> Catalog {
        self.config.catalog()
    }

    /// Replace parameter values; ids and shapes must match the architecture.
    pub fn load(&mut self, values: &ParameterSet) -> Result<()> {
        self.params.overwrite(values)
    }

    /// The attention weights of block `block` as a standalone operator.
    pub fn attention_state(&self, block: usize) -> Result<AttentionState> {
        if block >= self.config.depth {
            return Err(Error::Input(format!("block {block} out of range")));
        }
        let m = |p: &str| {
            self.params
                .matrix(&format!("blocks.{block}.attn.{p}"))
                .map(|v| v.to_owned())
        };
        let v = |p: &str| {
            self.params
                .vector(&format!("blocks.{block}.attn.{p}"))
                .map(|v| Some(v.to_owned()))
        };
        Ok(AttentionState {
            num_heads: self.config.num_heads,
            w_q: m("w_q")?,
            w_k: m("w_k")?,
            w_v: m("w_v")?,
            w_o: m("w_o")?,
            b_q: v("b_q")?,
            b_k: v("b_k")?,
            b_v: v("b_v")?,
            b_o: v("b_o")?,
        })
    }
}

/// Logits `[batch, num_classes]`; attention layers use prefixes when a
/// prefix plugin is supplied.
pub fn forward(model: &Model, batch: &Batch, plugins: Option<&PluginState>) -> Result<Array2<f64>> {
    let plugins: Vec<&PluginState> = plugins.into_iter().collect();
    vit::forward(model, &plugins, batch)
}

/// Exact gradients of the mean cross-entropy w.r.t. the selected parameters
/// (base and plugin). Unselected parameters get no entry.
pub fn gradients(
    model: &Model,
    batch: &Batch,
    plugins: Option<&PluginState>,
    selector: &Selector,
) -> Result<ParameterSet> {
    let plugins: Vec<&PluginState> = plugins.into_iter().collect();
    vit::loss_and_gradients(model, &plugins, batch, selector).map(|(_, g)| g)
}

pub fn count_parameters(model: &Model, plugins: Option<&PluginState>, selector: &Selector) -> usize {
    let mut catalog = model.catalog();
    if let Some(p) = plugins {
        catalog.extend(p.params.catalog());
    }
    catalog.count(selector)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(num_classes: usize) -> ModelConfig {
        ModelConfig::from_preset(Preset::DeskTiny, 16, 8, num_classes)
    }

    #[test]
    fn desk_tiny_sequence_length() {
        let cfg = desk(4);
        assert_eq!(cfg.seq_len(), 5);
        let m = build_vit(&cfg, 0).unwrap();
        assert_eq!(m.params().matrix("pos_embed").unwrap().shape(), &[5, 32]);
    }

    #[test]
    fn invalid_dims_rejected() {
        let mut cfg = desk(4);
        cfg.patch_size = 5;
        assert!(matches!(build_vit(&cfg, 0), Err(Error::Config { .. })));
        let mut cfg = desk(4);
        cfg.preset = None;
        cfg.num_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        let mut cfg = desk(4);
        cfg.depth = 3;
        assert!(cfg.validate().is_err(), "preset mismatch must be rejected");
    }

    #[test]
    fn build_is_deterministic_and_seed_dependent() {
        let cfg = desk(4);
        assert_eq!(build_vit(&cfg, 11).unwrap(), build_vit(&cfg, 11).unwrap());
        assert_ne!(build_vit(&cfg, 11).unwrap(), build_vit(&cfg, 12).unwrap());
    }

    #[test]
    fn every_parameter_tagged_and_partitioned() {
        let cfg = desk(4);
        let m = build_vit(&cfg, 0).unwrap();
        let cat = m.catalog();
        assert_eq!(m.params().ids(), cat.ids());
        let sum: usize = LayerTag::ALL.iter().map(|&t| cat.count_tag(t)).sum();
        assert_eq!(sum, cat.total());
        assert_eq!(cat.total(), m.params().numel());
    }

    #[test]
    fn head_layers_controls_tagging() {
        let mut cfg = desk(4);
        let cat = cfg.catalog();
        assert_eq!(cat.get("norm.weight").unwrap().tag, LayerTag::ClassificationHead);
        cfg.head_layers = 1;
        let cat = cfg.catalog();
        assert_eq!(cat.get("norm.weight").unwrap().tag, LayerTag::Layernorm);
        assert_eq!(cat.get("head.weight").unwrap().tag, LayerTag::ClassificationHead);
        assert_eq!(cfg.head_ids(1).len(), 2);
        assert_eq!(cfg.head_ids(2).len(), 4);
        assert_eq!(cfg.layernorm_ids().len(), 2 * 2 * cfg.depth + 2);
    }

    #[test]
    fn vit_small_counts_match_timm_layout() {
        let cfg = ModelConfig::vit_small(100);
        let cat = cfg.catalog();
        // qkv + proj with biases
        let attn = cat.count_ids(
            &cat.ids()
                .into_iter()
                .filter(|id| id.starts_with("blocks.0.attn"))
                .collect::<Vec<_>>(),
        );
        assert_eq!(attn, 4 * 384 * 384 + 4 * 384);
        // 22,050,664 with a 1000-class head
        assert_eq!(cat.total(), 22_050_664 - 900 * 385);
    }

    #[test]
    fn vit_small_build_matches_catalog() {
        let cfg = ModelConfig::vit_small(100);
        let m = build_vit(&cfg, 3).unwrap();
        assert_eq!(m.params().numel(), cfg.catalog().total());
        let total = count_parameters(&m, None, &Selector::All) as f64;
        assert!((total / 21.03e6 - 1.0).abs() < 0.05);
    }
}
