//! Parameter-efficient plugins attached to a base ViT.
//!
//! Four families are supported:
//!
//! * `vanilla_prefix`: free key/value prefix rows per block.
//! * `adapter_prefix`: a per-block `tanh` bottleneck that generates one key
//!   and one value prefix row per input token from the attention input.
//! * `prompt`: learnable tokens inserted after `[CLS]` at the input only.
//! * `mlp_adapter`: a bottleneck residual `m + GELU(m·W_down)·W_up` applied
//!   to the MLP output of each block.
//!
//! Plugin ids live under `plugin.` and never collide with base ids.

use std::ops::Range;

use ndarray::{s, Array2, ArrayD, ArrayView2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{vit, AttentionState, Batch, Model, ModelConfig, Prefixes, INIT_STD};
use crate::params::{Catalog, LayerTag, ParamInfo, ParameterSet, Selector};
use crate::rng::truncated_normal_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PluginKind {
    VanillaPrefix,
    AdapterPrefix,
    Prompt,
    MlpAdapter,
}

impl PluginKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PluginKind::VanillaPrefix => "vanilla_prefix",
            PluginKind::AdapterPrefix => "adapter_prefix",
            PluginKind::Prompt => "prompt",
            PluginKind::MlpAdapter => "mlp_adapter",
        }
    }

    fn id_root(self) -> &'static str {
        match self {
            PluginKind::VanillaPrefix => "plugin.prefix",
            PluginKind::AdapterPrefix => "plugin.adapter",
            PluginKind::Prompt => "plugin.prompt",
            PluginKind::MlpAdapter => "plugin.mlp_adapter",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PluginInit {
    Zero,
    Random,
}

/// Shape and initialization of a plugin.
///
/// For the two bottleneck kinds, `init` applies to the up-projection; the
/// down-projection is always truncated-normal (a zero down-projection would
/// receive no gradient).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginSpec {
    pub kind: PluginKind,
    pub prefix_len: usize,
    pub hidden_dim: usize,
    pub scale: f64,
    pub init: PluginInit,
    pub prompt_len: usize,
    /// Restrict per-block plugins to the last `depth` blocks; `None` means all.
    pub depth: Option<usize>,
}

impl PluginSpec {
    /// Defaults for `kind`: 8 prefixes or prompts, hidden width 256, scale 1.5
    /// for generated prefixes and 1 for free prefixes, zero up-projection for
    /// MLP adapters.
    pub fn new(kind: PluginKind) -> Self {
        PluginSpec {
            kind,
            prefix_len: 8,
            hidden_dim: 256,
            scale: if kind == PluginKind::AdapterPrefix { 1.5 } else { 1.0 },
            init: if kind == PluginKind::MlpAdapter {
                PluginInit::Zero
            } else {
                PluginInit::Random
            },
            prompt_len: 8,
            depth: None,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if matches!(self.kind, PluginKind::AdapterPrefix | PluginKind::MlpAdapter) && self.hidden_dim == 0 {
            return Err(Error::config("plugin.hidden_dim", "must be at least 1"));
        }
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::config("plugin.scale", "must be a finite non-negative number"));
        }
        if let Some(d) = self.depth {
            if d == 0 || d > config.depth {
                return Err(Error::config(
                    "plugin.depth",
                    format!("must be in 1..={} for this model", config.depth),
                ));
            }
        }
        Ok(())
    }

    /// Blocks carrying a per-block plugin.
    pub fn blocks(&self, config: &ModelConfig) -> Range<usize> {
        let k = self.depth.unwrap_or(config.depth).min(config.depth);
        config.depth - k..config.depth
    }

    /// Extra tokens inserted into the sequence.
    pub fn extra_tokens(&self) -> usize {
        if self.kind == PluginKind::Prompt {
            self.prompt_len
        } else {
            0
        }
    }
}

/// Ids, tags and shapes of the plugin parameters, without allocating them.
pub fn plugin_catalog(spec: &PluginSpec, config: &ModelConfig) -> Catalog {
    let d = config.embed_dim;
    let h = spec.hidden_dim;
    let root = spec.kind.id_root();
    let mut entries = Vec::new();
    let mut push = |id: String, shape: &[usize]| entries.push(ParamInfo::new(id, LayerTag::Plugin, shape));
    match spec.kind {
        PluginKind::Prompt => {
            if spec.prompt_len > 0 {
                push(format!("{root}.tokens"), &[spec.prompt_len, d]);
            }
        }
        PluginKind::VanillaPrefix => {
            if spec.prefix_len > 0 {
                for i in spec.blocks(config) {
                    push(format!("{root}.{i}.keys"), &[spec.prefix_len, d]);
                    push(format!("{root}.{i}.values"), &[spec.prefix_len, d]);
                }
            }
        }
        PluginKind::AdapterPrefix => {
            for i in spec.blocks(config) {
                push(format!("{root}.{i}.w_down"), &[d, h]);
                push(format!("{root}.{i}.w_up"), &[h, 2 * d]);
            }
        }
        PluginKind::MlpAdapter => {
            for i in spec.blocks(config) {
                push(format!("{root}.{i}.w_down"), &[d, h]);
                push(format!("{root}.{i}.w_up"), &[h, d]);
            }
        }
    }
    Catalog::new(entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PluginState {
    pub spec: PluginSpec,
    pub params: ParameterSet,
}

pub fn init_plugin(spec: &PluginSpec, config: &ModelConfig, seed: u64) -> Result<PluginState> {
    config.validate()?;
    spec.validate(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    let bottleneck = matches!(spec.kind, PluginKind::AdapterPrefix | PluginKind::MlpAdapter);
    for info in plugin_catalog(spec, config).entries() {
        let n = info.numel();
        let random = spec.init == PluginInit::Random || (bottleneck && info.id.ends_with("w_down"));
        let data = if random {
            truncated_normal_vec(&mut rng, n, INIT_STD)
        } else {
            vec![0.0; n]
        };
        let value = ArrayD::from_shape_vec(IxDyn(&info.shape), data).expect("catalog shape");
        params.insert(info.id.clone(), LayerTag::Plugin, value);
    }
    Ok(PluginState {
        spec: spec.clone(),
        params,
    })
}

impl PluginState {
    pub fn kind(&self) -> PluginKind {
        self.spec.kind
    }

    /// Fails unless the stored tensors match what `config` expects.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        self.spec.validate(config)?;
        let expected = plugin_catalog(&self.spec, config);
        if !same_entries(&expected, &self.params.catalog()) {
            return Err(Error::config(
                "plugin",
                format!("{} state does not match the model dimensions", self.spec.kind.as_str()),
            ));
        }
        Ok(())
    }

    fn block_id(&self, block: usize, name: &str) -> String {
        format!("{}.{block}.{name}", self.spec.kind.id_root())
    }

    /// Whether block `block` carries this plugin.
    pub fn covers_block(&self, block: usize) -> bool {
        self.params.contains(&match self.spec.kind {
            PluginKind::VanillaPrefix => self.block_id(block, "keys"),
            PluginKind::Prompt => return false,
            _ => self.block_id(block, "w_down"),
        })
    }

    pub(crate) fn matrix(&self, block: usize, name: &str) -> Result<ArrayView2<'_, f64>> {
        self.params.matrix(&self.block_id(block, name))
    }

    pub(crate) fn block_param_id(&self, block: usize, name: &str) -> String {
        self.block_id(block, name)
    }

    pub(crate) fn prompt_id(&self) -> String {
        format!("{}.tokens", self.spec.kind.id_root())
    }
}

fn same_entries(a: &Catalog, b: &Catalog) -> bool {
    let mut x: Vec<_> = a.entries().iter().map(|e| (&e.id, e.tag, &e.shape)).collect();
    let mut y: Vec<_> = b.entries().iter().map(|e| (&e.id, e.tag, &e.shape)).collect();
    x.sort();
    y.sort();
    x == y
}

/// Generated prefixes `split(tanh(Z·W_down)·W_up)`, unscaled.
pub fn adapter_prefixes(w_down: ArrayView2<f64>, w_up: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<Prefixes> {
    let d = z.ncols();
    if w_down.nrows() != d || w_up.nrows() != w_down.ncols() || w_up.ncols() != 2 * d {
        return Err(Error::Input(format!(
            "adapter shapes {:?}/{:?} incompatible with {d}-dim tokens",
            w_down.dim(),
            w_up.dim()
        )));
    }
    let p = z.dot(&w_down).mapv(f64::tanh).dot(&w_up);
    Prefixes::new(p.slice(s![.., ..d]).to_owned(), p.slice(s![.., d..]).to_owned())
}

/// The prefixes used by block `block` for attention input `z`, unscaled.
///
/// Free prefixes ignore `z`; generated prefixes have one row per token.
pub fn compute_prefixes(state: &PluginState, block: usize, z: ArrayView2<f64>) -> Result<Prefixes> {
    match state.spec.kind {
        PluginKind::VanillaPrefix => {
            if !state.covers_block(block) {
                let d = z.ncols();
                return Prefixes::new(Array2::zeros((0, d)), Array2::zeros((0, d)));
            }
            Prefixes::new(
                state.matrix(block, "keys")?.to_owned(),
                state.matrix(block, "values")?.to_owned(),
            )
        }
        PluginKind::AdapterPrefix => {
            if !state.covers_block(block) {
                let d = z.ncols();
                return Prefixes::new(Array2::zeros((0, d)), Array2::zeros((0, d)));
            }
            adapter_prefixes(state.matrix(block, "w_down")?, state.matrix(block, "w_up")?, z)
        }
        other => Err(Error::Usage(format!("{} does not produce prefixes", other.as_str()))),
    }
}

/// A base model with zero or more plugins of distinct kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct PluggedModel {
    model: Model,
    plugins: Vec<PluginState>,
}

impl From<Model> for PluggedModel {
    fn from(model: Model) -> Self {
        PluggedModel {
            model,
            plugins: Vec::new(),
        }
    }
}

/// Attach `state` to a model; attaching a second plugin of the same kind is a
/// usage error.
pub fn attach(target: impl Into<PluggedModel>, state: PluginState) -> Result<PluggedModel> {
    let mut plugged = target.into();
    if plugged.plugins.iter().any(|p| p.kind() == state.kind()) {
        return Err(Error::Usage(format!(
            "{} plugin already attached",
            state.kind().as_str()
        )));
    }
    state.check_compatible(plugged.model.config())?;
    plugged.plugins.push(state);
    plugged.plugins.sort_by_key(PluginState::kind);
    Ok(plugged)
}

pub fn detach(plugged: PluggedModel) -> (Model, Vec<PluginState>) {
    (plugged.model, plugged.plugins)
}

impl PluggedModel {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn plugins(&self) -> &[PluginState] {
        &self.plugins
    }

    pub fn plugin(&self, kind: PluginKind) -> Option<&PluginState> {
        self.plugins.iter().find(|p| p.kind() == kind)
    }

    pub fn catalog(&self) -> Catalog {
        let mut c = self.model.catalog();
        for p in &self.plugins {
            c.extend(p.params.catalog());
        }
        c
    }

    pub fn count_parameters(&self, selector: &Selector) -> usize {
        self.catalog().count(selector)
    }

    /// Every base and plugin parameter.
    pub fn params(&self) -> ParameterSet {
        let mut out = self.model.params().clone();
        for p in &self.plugins {
            out = out.merged(&p.params).expect("plugin ids are disjoint from base ids");
        }
        out
    }

    /// Copy of the named parameters.
    pub fn export<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> ParameterSet {
        let mut out = ParameterSet::new();
        for id in ids {
            let src = if id.starts_with("plugin.") {
                self.plugins.iter().find_map(|p| p.params.get(id))
            } else {
                self.model.params().get(id)
            };
            if let Some(p) = src {
                out.insert(id.clone(), p.tag, p.value.clone());
            }
        }
        out
    }

    /// Overwrite the parameters named in `values`.
    pub fn import(&mut self, values: &ParameterSet) -> Result<()> {
        self.apply(values, |dst, src| dst.overwrite(src))
    }

    /// In-place SGD step over the parameters named in `grads`.
    pub fn sgd_step(&mut self, grads: &ParameterSet, lr: f64) -> Result<()> {
        self.apply(grads, |dst, src| dst.sgd_step(src, lr))
    }

    fn apply(
        &mut self,
        values: &ParameterSet,
        mut f: impl FnMut(&mut ParameterSet, &ParameterSet) -> Result<()>,
    ) -> Result<()> {
        let (plugin_ids, base_ids): (Vec<&String>, Vec<&String>) = values
            .iter()
            .map(|(id, _)| id)
            .partition(|id| id.starts_with("plugin."));
        f(self.model.params_mut(), &values.subset(base_ids))?;
        for id in plugin_ids {
            let state = self
                .plugins
                .iter_mut()
                .find(|p| p.params.contains(id))
                .ok_or_else(|| Error::Selector(id.clone()))?;
            f(&mut state.params, &values.subset([id]))?;
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Batch) -> Result<Array2<f64>> {
        vit::forward(&self.model, &self.plugin_refs(), batch)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let logits = self.forward(batch)?;
        crate::model::cross_entropy_loss(logits.view(), &batch.labels)
    }

    /// Mean cross-entropy and its gradients w.r.t. the selected parameters.
    pub fn loss_and_gradients(&self, batch: &Batch, selector: &Selector) -> Result<(f64, ParameterSet)> {
        vit::loss_and_gradients(&self.model, &self.plugin_refs(), batch, selector)
    }

    pub fn attention_state(&self, block: usize) -> Result<AttentionState> {
        self.model.attention_state(block)
    }

    fn plugin_refs(&self) -> Vec<&PluginState> {
        self.plugins.iter().collect()
    }
}
