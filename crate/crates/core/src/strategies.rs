//! Personalization strategies.
//!
//! A strategy splits the parameter ids of a (plugged) model into a global
//! part `u`, aggregated by the server, a local part `v_i`, kept on each
//! client, and a frozen part that is neither communicated nor trained. It
//! also fixes the local training rule and an optional pre-evaluation step.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{cross_entropy_grad, Batch, ModelConfig};
use crate::params::{Catalog, LayerTag, ParameterSet, Selector};
use crate::plugins::{PluggedModel, PluginInit, PluginKind, PluginSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", try_from = "StrategyDef")]
pub enum Strategy {
    Fedavg,
    Local,
    /// Parameters with the given tags stay local; `with_head` adds the
    /// classification head (the "combined" setting).
    LayerTypeLocal {
        tags: Vec<LayerTag>,
        with_head: bool,
    },
    Fedrep,
    FedbnLn,
    Fedbabu,
    Apfl,
    PerFedavg,
    VanillaAttention,
    VanillaPrefix {
        init: PluginInit,
    },
    Fedperfix,
    PromptLocal,
    MlpAdapterLocal,
}

/// Flat form used for strict parsing: serde does not reject unknown keys
/// next to the tag of a unit variant.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StrategyDef {
    name: String,
    tags: Option<Vec<LayerTag>>,
    with_head: Option<bool>,
    init: Option<PluginInit>,
}

impl TryFrom<StrategyDef> for Strategy {
    type Error = String;

    fn try_from(def: StrategyDef) -> std::result::Result<Self, String> {
        let StrategyDef {
            name,
            tags,
            with_head,
            init,
        } = def;
        let strategy = match name.as_str() {
            "layer_type_local" => {
                let tags = tags.ok_or("layer_type_local needs `tags`")?;
                return Ok(Strategy::LayerTypeLocal {
                    tags,
                    with_head: with_head.unwrap_or(false),
                });
            }
            "vanilla_prefix" if tags.is_none() && with_head.is_none() => {
                return Ok(Strategy::VanillaPrefix {
                    init: init.unwrap_or(PluginInit::Random),
                });
            }
            "fedavg" => Strategy::Fedavg,
            "local" => Strategy::Local,
            "fedrep" => Strategy::Fedrep,
            "fedbn_ln" => Strategy::FedbnLn,
            "fedbabu" => Strategy::Fedbabu,
            "apfl" => Strategy::Apfl,
            "per_fedavg" => Strategy::PerFedavg,
            "vanilla_attention" => Strategy::VanillaAttention,
            "fedperfix" => Strategy::Fedperfix,
            "prompt_local" => Strategy::PromptLocal,
            "mlp_adapter_local" => Strategy::MlpAdapterLocal,
            "vanilla_prefix" => return Err("vanilla_prefix only takes `init`".into()),
            other => return Err(format!("unknown strategy `{other}`")),
        };
        if tags.is_some() || with_head.is_some() || init.is_some() {
            return Err(format!("strategy `{name}` takes no options"));
        }
        Ok(strategy)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::LayerTypeLocal { tags, with_head } => {
                let names: Vec<&str> = tags.iter().map(|t| t.as_str()).collect();
                write!(
                    f,
                    "layer_type_local({}{})",
                    names.join("+"),
                    if *with_head { "+head" } else { "" }
                )
            }
            Strategy::VanillaPrefix { init } => match init {
                PluginInit::Zero => f.write_str("vanilla_prefix(zero)"),
                PluginInit::Random => f.write_str("vanilla_prefix(random)"),
            },
            other => {
                let v = serde_json::to_value(other).expect("strategy serializes");
                f.write_str(v["name"].as_str().unwrap_or("?"))
            }
        }
    }
}

/// Optional overrides for the plugin implied by a strategy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginOverrides {
    pub prefix_len: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub scale: Option<f64>,
    pub init: Option<PluginInit>,
    pub prompt_len: Option<usize>,
    pub depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub lr: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub apfl_alpha: f64,
    pub apfl_adaptive: bool,
    pub perfedavg_beta: f64,
    pub babu_finetune_steps: usize,
    /// FedRep: head-only epochs followed by one body-only epoch.
    pub fedrep_alternate: bool,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            lr: 0.01,
            local_epochs: 10,
            batch_size: 64,
            apfl_alpha: 0.25,
            apfl_adaptive: false,
            perfedavg_beta: 0.001,
            babu_finetune_steps: 1,
            fedrep_alternate: false,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("hyper.lr", "must be positive"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("hyper.local_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("hyper.batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.apfl_alpha) {
            return Err(Error::config("hyper.apfl_alpha", "must lie in [0, 1]"));
        }
        if !(self.perfedavg_beta.is_finite() && self.perfedavg_beta >= 0.0) {
            return Err(Error::config("hyper.perfedavg_beta", "must be non-negative"));
        }
        Ok(())
    }
}

/// Disjoint cover of all parameter ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub global: BTreeSet<String>,
    pub local: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl Strategy {
    /// Every strategy in one canonical configuration.
    pub fn registered() -> Vec<Strategy> {
        vec![
            Strategy::Fedavg,
            Strategy::Local,
            Strategy::Fedrep,
            Strategy::FedbnLn,
            Strategy::Fedbabu,
            Strategy::Apfl,
            Strategy::PerFedavg,
            Strategy::VanillaAttention,
            Strategy::VanillaPrefix { init: PluginInit::Zero },
            Strategy::VanillaPrefix {
                init: PluginInit::Random,
            },
            Strategy::Fedperfix,
            Strategy::PromptLocal,
            Strategy::MlpAdapterLocal,
        ]
    }

    pub fn plugin_kind(&self) -> Option<PluginKind> {
        match self {
            Strategy::VanillaPrefix { .. } => Some(PluginKind::VanillaPrefix),
            Strategy::Fedperfix => Some(PluginKind::AdapterPrefix),
            Strategy::PromptLocal => Some(PluginKind::Prompt),
            Strategy::MlpAdapterLocal => Some(PluginKind::MlpAdapter),
            _ => None,
        }
    }

    /// The plugin this strategy trains, with defaults and overrides applied.
    pub fn plugin_spec(&self, overrides: &PluginOverrides) -> Option<PluginSpec> {
        let mut spec = PluginSpec::new(self.plugin_kind()?);
        if let Strategy::VanillaPrefix { init } = self {
            spec.init = *init;
        }
        let o = overrides;
        spec.prefix_len = o.prefix_len.unwrap_or(spec.prefix_len);
        spec.hidden_dim = o.hidden_dim.unwrap_or(spec.hidden_dim);
        spec.scale = o.scale.unwrap_or(spec.scale);
        spec.prompt_len = o.prompt_len.unwrap_or(spec.prompt_len);
        spec.depth = o.depth.or(spec.depth);
        if !matches!(self, Strategy::VanillaPrefix { .. }) {
            spec.init = o.init.unwrap_or(spec.init);
        }
        Some(spec)
    }

    /// Partition the ids of `catalog` (base plus plugins) for `config`
    /// without building the model.
    pub fn partition_catalog(&self, config: &ModelConfig, catalog: &Catalog) -> Result<Partition> {
        let all = catalog.ids();
        let plugin_ids = catalog.ids_with_tags(&[LayerTag::Plugin].into());
        let head = |n: usize| config.head_ids(n);
        let (local, frozen): (BTreeSet<String>, BTreeSet<String>) = match self {
            Strategy::Fedavg | Strategy::Apfl | Strategy::PerFedavg => (BTreeSet::new(), BTreeSet::new()),
            Strategy::Local => (all.clone(), BTreeSet::new()),
            Strategy::LayerTypeLocal { tags, with_head } => {
                let mut ids = catalog.ids_with_tags(&tags.iter().copied().collect());
                if *with_head {
                    ids.extend(catalog.ids_with_tags(&[LayerTag::ClassificationHead].into()));
                }
                (ids, BTreeSet::new())
            }
            Strategy::Fedrep => (head(1), BTreeSet::new()),
            Strategy::FedbnLn => (config.layernorm_ids(), BTreeSet::new()),
            Strategy::Fedbabu => (BTreeSet::new(), head(1)),
            Strategy::VanillaAttention => {
                let mut ids = catalog.ids_with_tags(&[LayerTag::Attention].into());
                ids.extend(head(config.head_layers));
                (ids, BTreeSet::new())
            }
            Strategy::VanillaPrefix { .. }
            | Strategy::Fedperfix
            | Strategy::PromptLocal
            | Strategy::MlpAdapterLocal => {
                let mut ids = plugin_ids.clone();
                ids.extend(head(config.head_layers));
                (ids, BTreeSet::new())
            }
        };
        let global = all
            .iter()
            .filter(|id| !local.contains(*id) && !frozen.contains(*id))
            .cloned()
            .collect();
        Ok(Partition { global, local, frozen })
    }

    pub fn partition(&self, model: &PluggedModel) -> Result<Partition> {
        if let Some(kind) = self.plugin_kind() {
            if model.plugin(kind).is_none() {
                return Err(Error::config(
                    "strategy",
                    format!("{self} needs a {} plugin attached", kind.as_str()),
                ));
            }
        }
        self.partition_catalog(model.config(), &model.catalog())
    }

    /// Parameters updated by plain local SGD.
    fn trainable(&self, model: &PluggedModel) -> Result<Selector> {
        let p = self.partition(model)?;
        Ok(Selector::Ids(p.global.union(&p.local).cloned().collect()))
    }
}

/// Losses recorded during local training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub losses: Vec<f64>,
}

impl TrainStats {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Shuffled mini-batch index lists covering `n` samples once.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn sgd_epochs<R: Rng + ?Sized>(
    model: &mut PluggedModel,
    shard: &Dataset,
    selector: &Selector,
    hyper: &Hyperparameters,
    epochs: usize,
    rng: &mut R,
    stats: &mut TrainStats,
) -> Result<()> {
    for _ in 0..epochs {
        for idx in epoch_batches(shard.len(), hyper.batch_size, rng) {
            let (loss, grads) = model.loss_and_gradients(&shard.batch(&idx), selector)?;
            model.sgd_step(&grads, hyper.lr)?;
            stats.losses.push(loss);
        }
    }
    Ok(())
}

/// `local_epochs` epochs of mini-batch SGD on the client model.
///
/// APFL keeps two models and is trained with [`apfl_update`] instead.
pub fn local_update<R: Rng + ?Sized>(
    strategy: &Strategy,
    model: &mut PluggedModel,
    shard: &Dataset,
    hyper: &Hyperparameters,
    rng: &mut R,
) -> Result<TrainStats> {
    if shard.is_empty() {
        return Err(Error::Data("empty training shard".into()));
    }
    let mut stats = TrainStats::default();
    match strategy {
        Strategy::Apfl => {
            return Err(Error::Usage("APFL trains two models; use apfl_update".into()));
        }
        Strategy::PerFedavg => {
            per_fedavg_update(model, shard, hyper, rng, &mut stats)?;
        }
        Strategy::Fedrep if hyper.fedrep_alternate => {
            let head = Selector::Ids(model.config().head_ids(1));
            let body = Selector::Ids(
                model
                    .catalog()
                    .ids()
                    .difference(&model.config().head_ids(1))
                    .cloned()
                    .collect(),
            );
            let e = hyper.local_epochs;
            if e > 0 {
                sgd_epochs(model, shard, &head, hyper, (e - 1).max(1), rng, &mut stats)?;
                sgd_epochs(model, shard, &body, hyper, 1, rng, &mut stats)?;
            }
        }
        _ => {
            let selector = strategy.trainable(model)?;
            sgd_epochs(model, shard, &selector, hyper, hyper.local_epochs, rng, &mut stats)?;
        }
    }
    Ok(stats)
}

/// `h_per ← h_per − η(α·g_per + (1−α)·g_glob)` for every id of `personal`.
pub fn apfl_personal_step(
    personal: &mut ParameterSet,
    grad_personal: &ParameterSet,
    grad_global: &ParameterSet,
    alpha: f64,
    lr: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("hyper.apfl_alpha", "must lie in [0, 1]"));
    }
    let mut mixed = grad_personal.clone();
    for (id, p) in mixed.iter_mut() {
        let g = grad_global.get(id).ok_or_else(|| Error::Selector(id.clone()))?;
        p.value
            .zip_mut_with(&g.value, |a, &b| *a = alpha * *a + (1.0 - alpha) * b);
    }
    personal.sgd_step(&mixed, lr)
}

/// Derivative of the mean cross-entropy of `α·per + (1−α)·glob` logits
/// w.r.t. `α`.
pub fn apfl_alpha_gradient(
    per_logits: &Array2<f64>,
    glob_logits: &Array2<f64>,
    alpha: f64,
    labels: &[usize],
) -> Result<f64> {
    let mixed = per_logits * alpha + glob_logits * (1.0 - alpha);
    let g = cross_entropy_grad(mixed.view(), labels)?;
    Ok((&g * &(per_logits - glob_logits)).sum())
}

/// One APFL local round: the global model takes plain SGD steps while the
/// personalized model follows the α-mixed gradient of both, each evaluated
/// at its own parameters on the same batch. With `apfl_adaptive`, α moves
/// along its own gradient and is clipped to `[0, 1]`.
pub fn apfl_update<R: Rng + ?Sized>(
    global: &mut PluggedModel,
    personal: &mut PluggedModel,
    alpha: &mut f64,
    shard: &Dataset,
    hyper: &Hyperparameters,
    rng: &mut R,
) -> Result<TrainStats> {
    if shard.is_empty() {
        return Err(Error::Data("empty training shard".into()));
    }
    if !(0.0..=1.0).contains(alpha) {
        return Err(Error::config("hyper.apfl_alpha", "must lie in [0, 1]"));
    }
    let mut stats = TrainStats::default();
    for _ in 0..hyper.local_epochs {
        for idx in epoch_batches(shard.len(), hyper.batch_size, rng) {
            let batch = shard.batch(&idx);
            let (_, g_glob) = global.loss_and_gradients(&batch, &Selector::All)?;
            let (loss, g_per) = personal.loss_and_gradients(&batch, &Selector::All)?;
            if hyper.apfl_adaptive {
                let d = apfl_alpha_gradient(
                    &personal.forward(&batch)?,
                    &global.forward(&batch)?,
                    *alpha,
                    &batch.labels,
                )?;
                *alpha = (*alpha - hyper.lr * d).clamp(0.0, 1.0);
            }
            let mut per_params = personal.params();
            apfl_personal_step(&mut per_params, &g_per, &g_glob, *alpha, hyper.lr)?;
            personal.import(&per_params)?;
            global.sgd_step(&g_glob, hyper.lr)?;
            stats.losses.push(loss);
        }
    }
    Ok(stats)
}

/// First-order MAML step: `θ' = θ − η∇f_B1(θ)`, then `θ ← θ − β∇f_B2(θ')`.
pub fn per_fedavg_step<B>(
    theta: &mut ParameterSet,
    b1: &B,
    b2: &B,
    eta: f64,
    beta: f64,
    mut grad: impl FnMut(&ParameterSet, &B) -> Result<ParameterSet>,
) -> Result<()> {
    let mut inner = theta.clone();
    let g1 = grad(theta, b1)?;
    inner.sgd_step(&g1, eta)?;
    let g2 = grad(&inner, b2)?;
    theta.sgd_step(&g2, beta)
}

fn per_fedavg_update<R: Rng + ?Sized>(
    model: &mut PluggedModel,
    shard: &Dataset,
    hyper: &Hyperparameters,
    rng: &mut R,
    stats: &mut TrainStats,
) -> Result<()> {
    let n = shard.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "Per-FedAvg needs two disjoint batches; shard has {n} sample(s)"
        )));
    }
    let bs = hyper.batch_size.min(n / 2).max(1);
    let mut work = model.clone();
    let mut theta = model.params();
    for _ in 0..hyper.local_epochs {
        let batches = epoch_batches(n, bs, rng);
        for pair in batches.chunks_exact(2) {
            let (b1, b2) = (shard.batch(&pair[0]), shard.batch(&pair[1]));
            let mut last = 0.0;
            per_fedavg_step(&mut theta, &b1, &b2, hyper.lr, hyper.perfedavg_beta, |p, b: &Batch| {
                work.import(p)?;
                let (loss, g) = work.loss_and_gradients(b, &Selector::All)?;
                last = loss;
                Ok(g)
            })?;
            stats.losses.push(last);
        }
    }
    model.import(&theta)
}

/// Adaptation before evaluation: FedBABU fine-tunes its head for
/// `babu_finetune_steps` SGD steps on the first mini-batches of the shard in
/// order; every other strategy leaves the model unchanged.
pub fn pre_eval(strategy: &Strategy, model: &mut PluggedModel, shard: &Dataset, hyper: &Hyperparameters) -> Result<()> {
    if *strategy != Strategy::Fedbabu || hyper.babu_finetune_steps == 0 {
        return Ok(());
    }
    if shard.is_empty() {
        return Err(Error::Data("empty training shard".into()));
    }
    let head = Selector::Ids(model.config().head_ids(1));
    let order: Vec<usize> = (0..shard.len()).collect();
    let chunks: Vec<&[usize]> = order.chunks(hyper.batch_size.max(1)).collect();
    for step in 0..hyper.babu_finetune_steps {
        let (_, grads) = model.loss_and_gradients(&shard.batch(chunks[step % chunks.len()]), &head)?;
        model.sgd_step(&grads, hyper.lr)?;
    }
    Ok(())
}
