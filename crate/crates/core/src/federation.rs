//! Round-based client/server simulation.
//!
//! Each round the server samples `K` clients and broadcasts the global part
//! `u`. Every sampled client plugs it into its local part `v_i`, trains, and
//! uploads its new global part. The server then replaces `u` by the weighted
//! mean of the uploads. Every message is logged and checked against the
//! strategy's local ids.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, PartitionKind};
use crate::data::{
    dirichlet_partition, domain_partition, load_folder_dataset, split_per_client, synth_dataset, Dataset,
    PartitionPlan, SynthSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{resource_report, summarize_clients, AccuracySummary, ResourceRow};
use crate::model::{build_vit, Batch};
use crate::params::ParameterSet;
use crate::plugins::{attach, init_plugin, PluggedModel};
use crate::rng::{derive_seed, stream, stream_rng};
use crate::strategies::{apfl_update, local_update, pre_eval, Hyperparameters, Partition, Strategy, TrainStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub total_rounds: usize,
    pub num_clients: usize,
    pub participation_ratio: f64,
    pub seed: u64,
    /// Weight every sampled client equally instead of by sample count.
    pub uniform_weights: bool,
    pub eval_every: Option<usize>,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_rounds == 0 {
            return Err(Error::config("round.total_rounds", "must be at least 1"));
        }
        if self.num_clients == 0 {
            return Err(Error::config("round.num_clients", "must be at least 1"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::config("round.eval_every", "must be at least 1"));
        }
        sampled_count(self.num_clients, self.participation_ratio).map(|_| ())
    }

    pub fn sampled_count(&self) -> Result<usize> {
        sampled_count(self.num_clients, self.participation_ratio)
    }
}

/// `K = round(r·N)`, at least 1.
pub fn sampled_count(n: usize, r: f64) -> Result<usize> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::config(
            "round.participation_ratio",
            format!("{r} is outside (0, 1]"),
        ));
    }
    let expected = r * n as f64;
    if expected < 1.0 {
        return Err(Error::config(
            "round.participation_ratio",
            format!("{r} × {n} clients samples less than one client"),
        ));
    }
    Ok((expected.round() as usize).clamp(1, n))
}

/// Uniform sample of `K = round(r·N)` client ids without replacement, sorted.
pub fn sample_clients<R: Rng + ?Sized>(n: usize, r: f64, rng: &mut R) -> Result<Vec<usize>> {
    let k = sampled_count(n, r)?;
    let mut ids = rand::seq::index::sample(rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// One client's contribution to an aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParameterSet,
    pub weight: f64,
}

/// Weighted mean `Σ α_i x_i` with `α_i = w_i / Σ w_j`.
///
/// Updates are reduced in client-id order, as `x_ref + Σ α_i (x_i − x_ref)`
/// with the first client as reference, and clamped to the element-wise range
/// of the inputs. The result is therefore independent of input order, exact
/// for identical inputs, and never leaves the convex hull through rounding.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ParameterSet> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = *sorted.first().ok_or_else(|| Error::Aggregation("no updates".into()))?;
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Aggregation("duplicate client id".into()));
    }
    if let Some(u) = sorted.iter().find(|u| !(u.weight.is_finite() && u.weight > 0.0)) {
        return Err(Error::Aggregation(format!(
            "client {} has weight {}",
            u.client_id, u.weight
        )));
    }
    if let Some(u) = sorted.iter().find(|u| !u.params.same_schema(&first.params)) {
        return Err(Error::Aggregation(format!(
            "client {} uploaded a different schema from client {}",
            u.client_id, first.client_id
        )));
    }
    let total: f64 = sorted.iter().map(|u| u.weight).sum();
    let mut out = first.params.clone();
    for (id, p) in out.iter_mut() {
        let reference = &first.params.get(id).expect("same schema").value;
        let mut lo = reference.clone();
        let mut hi = reference.clone();
        for u in &sorted[1..] {
            let x = &u.params.get(id).expect("same schema").value;
            let a = u.weight / total;
            ndarray::Zip::from(&mut p.value)
                .and(x)
                .and(reference)
                .for_each(|o, &x, &r| *o += a * (x - r));
            ndarray::Zip::from(&mut lo).and(&mut hi).and(x).for_each(|l, h, &x| {
                *l = l.min(x);
                *h = h.max(x);
            });
        }
        ndarray::Zip::from(&mut p.value)
            .and(&lo)
            .and(&hi)
            .for_each(|o, &l, &h| *o = o.clamp(l, h));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Broadcast,
    Upload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub round: usize,
    pub client_id: usize,
    pub direction: Direction,
    pub ids: Vec<String>,
    pub elements: usize,
}

impl Message {
    fn new(round: usize, client_id: usize, direction: Direction, params: &ParameterSet) -> Self {
        Message {
            round,
            client_id,
            direction,
            ids: params.ids().into_iter().collect(),
            elements: params.numel(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// The global part `u`.
    pub global: ParameterSet,
    /// Number of completed rounds.
    pub round: usize,
    pub log: Vec<Message>,
}

impl ServerState {
    pub fn new(global: ParameterSet) -> Self {
        ServerState {
            global,
            round: 0,
            log: Vec::new(),
        }
    }

    /// Append a message after checking it carries no local id.
    fn send(&mut self, msg: Message, local_ids: &BTreeSet<String>) -> Result<()> {
        if let Some(id) = msg.ids.iter().find(|id| local_ids.contains(*id)) {
            return Err(Error::Privacy {
                id: id.clone(),
                round: msg.round,
            });
        }
        self.log.push(msg);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// The local part `v_i`.
    pub local: ParameterSet,
    /// APFL's personal model.
    pub shadow: Option<ParameterSet>,
    pub apfl_alpha: f64,
    pub train: Dataset,
    pub test: Dataset,
}

impl ClientState {
    /// `m_i`
    pub fn sample_count(&self) -> usize {
        self.train.len()
    }
}

/// Client-side training within a round.
pub trait LocalTrainer: Sync {
    /// Ids that must never leave a client.
    fn local_ids(&self) -> &BTreeSet<String>;

    /// Train `client` starting from the broadcast `global` and return the
    /// new global part to upload. `client.local` and `client.shadow` are
    /// updated in place.
    fn train(
        &self,
        client: &mut ClientState,
        global: &ParameterSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ParameterSet, TrainStats)>;
}

/// A model that produces logits.
pub trait Classifier {
    fn logits(&self, batch: &Batch) -> Result<Array2<f64>>;
}

impl Classifier for PluggedModel {
    fn logits(&self, batch: &Batch) -> Result<Array2<f64>> {
        self.forward(batch)
    }
}

/// APFL's deployed model: `α·personal + (1−α)·global` in logit space.
#[derive(Debug, Clone)]
pub struct ApflMixture {
    pub personal: PluggedModel,
    pub global: PluggedModel,
    pub alpha: f64,
}

impl Classifier for ApflMixture {
    fn logits(&self, batch: &Batch) -> Result<Array2<f64>> {
        let p = self.personal.forward(batch)?;
        let g = self.global.forward(batch)?;
        Ok(p * self.alpha + g * (1.0 - self.alpha))
    }
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy; ties go to the lowest class index.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Data("empty test shard".into()));
    }
    let order: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in order.chunks(EVAL_CHUNK) {
        let batch = test.batch(chunk);
        let logits = model.logits(&batch)?;
        for (row, &label) in logits.rows().into_iter().zip(&batch.labels) {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Per-round summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub sampled: Vec<usize>,
    /// Mean over sampled clients of their mean mini-batch loss.
    pub mean_loss: f64,
}

fn pool_map<T, U, F>(pool: Option<&rayon::ThreadPool>, items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    match pool {
        Some(pool) => pool.install(|| items.into_par_iter().map(&f).collect()),
        None => items.into_iter().map(f).collect(),
    }
}

/// One communication round. `clients[i].id` must equal `i`. Unsampled
/// clients are not touched. With `pool`, sampled clients train
/// concurrently; results do not depend on scheduling since every client
/// draws from its own stream and uploads are reduced in id order.
pub fn run_round<T: LocalTrainer + ?Sized>(
    server: &mut ServerState,
    clients: &mut [ClientState],
    trainer: &T,
    cfg: &RoundConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<RoundSummary> {
    if clients.len() != cfg.num_clients || clients.iter().enumerate().any(|(i, c)| c.id != i) {
        return Err(Error::Usage("clients must be numbered 0..num_clients in order".into()));
    }
    if server.round >= cfg.total_rounds {
        return Err(Error::Usage(format!("all {} rounds already ran", cfg.total_rounds)));
    }
    let round = server.round;
    let mut sampling = stream_rng(cfg.seed, stream::SAMPLING, round as u64, 0);
    let sampled = sample_clients(cfg.num_clients, cfg.participation_ratio, &mut sampling)?;
    let local_ids = trainer.local_ids();
    let communicates = !server.global.is_empty();

    if communicates {
        for &id in &sampled {
            server.send(Message::new(round, id, Direction::Broadcast, &server.global), local_ids)?;
        }
    }

    let chosen: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| sampled.binary_search(&c.id).is_ok())
        .collect();
    let global = &server.global;
    let results = pool_map(pool, chosen, |client| {
        let mut rng = stream_rng(cfg.seed, stream::CLIENT, round as u64, client.id as u64);
        let weight = if cfg.uniform_weights {
            1.0
        } else {
            client.sample_count() as f64
        };
        trainer.train(client, global, &mut rng).map(|(params, stats)| {
            (
                ClientUpdate {
                    client_id: client.id,
                    params,
                    weight,
                },
                stats,
            )
        })
    });

    let mut updates = Vec::with_capacity(results.len());
    let mut losses = Vec::with_capacity(results.len());
    for r in results {
        let (update, stats) = r?;
        let n = stats.losses.len().max(1) as f64;
        losses.push(stats.losses.iter().sum::<f64>() / n);
        updates.push(update);
    }
    if communicates {
        let expected = server.global.ids();
        for u in &updates {
            server.send(
                Message::new(round, u.client_id, Direction::Upload, &u.params),
                local_ids,
            )?;
            if u.params.ids() != expected {
                return Err(Error::Aggregation(format!(
                    "client {} uploaded ids that differ from the global part",
                    u.client_id
                )));
            }
        }
        server.global = aggregate(&updates)?;
    }
    server.round += 1;
    let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    Ok(RoundSummary {
        round,
        sampled,
        mean_loss,
    })
}

/// The built-in trainer: a template model (initial weights of every id)
/// into which `u` and `v_i` are plugged before each local update.
#[derive(Debug, Clone)]
pub struct StrategyTrainer {
    pub strategy: Strategy,
    pub hyper: Hyperparameters,
    pub template: PluggedModel,
    pub partition: Partition,
}

/// A client's deployable model.
#[derive(Debug, Clone)]
pub enum Assembled {
    Single(PluggedModel),
    Apfl(ApflMixture),
}

impl Classifier for Assembled {
    fn logits(&self, batch: &Batch) -> Result<Array2<f64>> {
        match self {
            Assembled::Single(m) => m.logits(batch),
            Assembled::Apfl(m) => m.logits(batch),
        }
    }
}

impl StrategyTrainer {
    pub fn new(strategy: Strategy, hyper: Hyperparameters, template: PluggedModel) -> Result<Self> {
        hyper.validate()?;
        let partition = strategy.partition(&template)?;
        Ok(StrategyTrainer {
            strategy,
            hyper,
            template,
            partition,
        })
    }

    fn plugged(&self, parts: &[&ParameterSet]) -> Result<PluggedModel> {
        let mut model = self.template.clone();
        for p in parts {
            model.import(p)?;
        }
        Ok(model)
    }

    /// Initial client state: `v_i` (and APFL's personal model) from the
    /// template.
    pub fn client(&self, id: usize, train: Dataset, test: Dataset) -> ClientState {
        ClientState {
            id,
            local: self.template.export(&self.partition.local),
            shadow: (self.strategy == Strategy::Apfl).then(|| self.template.params()),
            apfl_alpha: self.hyper.apfl_alpha,
            train,
            test,
        }
    }

    pub fn initial_global(&self) -> ParameterSet {
        self.template.export(&self.partition.global)
    }

    /// The model a client deploys after receiving `global`, adapted by the
    /// strategy's pre-evaluation step.
    pub fn assemble(&self, client: &ClientState, global: &ParameterSet) -> Result<Assembled> {
        if self.strategy == Strategy::Apfl {
            let shadow = client
                .shadow
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("client {} has no personal model", client.id)))?;
            return Ok(Assembled::Apfl(ApflMixture {
                personal: self.plugged(&[shadow])?,
                global: self.plugged(&[global])?,
                alpha: client.apfl_alpha,
            }));
        }
        let mut model = self.plugged(&[global, &client.local])?;
        pre_eval(&self.strategy, &mut model, &client.train, &self.hyper)?;
        Ok(Assembled::Single(model))
    }
}

impl LocalTrainer for StrategyTrainer {
    fn local_ids(&self) -> &BTreeSet<String> {
        &self.partition.local
    }

    fn train(
        &self,
        client: &mut ClientState,
        global: &ParameterSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ParameterSet, TrainStats)> {
        if self.strategy == Strategy::Apfl {
            let mut glob = self.plugged(&[global])?;
            let shadow = client
                .shadow
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("client {} has no personal model", client.id)))?;
            let mut personal = self.plugged(&[shadow])?;
            let stats = apfl_update(
                &mut glob,
                &mut personal,
                &mut client.apfl_alpha,
                &client.train,
                &self.hyper,
                rng,
            )?;
            client.shadow = Some(personal.params());
            return Ok((glob.export(&self.partition.global), stats));
        }
        let mut model = self.plugged(&[global, &client.local])?;
        let stats = local_update(&self.strategy, &mut model, &client.train, &self.hyper, rng)?;
        client.local = model.export(&self.partition.local);
        Ok((model.export(&self.partition.global), stats))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTraffic {
    pub round: usize,
    pub broadcast: usize,
    pub upload: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageTotals {
    pub broadcast_elements: usize,
    pub upload_elements: usize,
    /// Training rounds only; the final broadcast is in the totals.
    pub per_round: Vec<RoundTraffic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub strategy: String,
    pub seed: u64,
    pub rounds: usize,
    pub num_clients: usize,
    pub sampled_per_round: usize,
    pub accuracy: AccuracySummary,
    /// Mean training loss of every round.
    pub train_loss: Vec<f64>,
    pub curve: Vec<CurvePoint>,
    pub messages: MessageTotals,
    pub global_params_per_client: usize,
    pub local_params_per_client: usize,
    pub resources: Vec<ResourceRow>,
    pub notes: Vec<String>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// A configured run: data, clients, server and trainer.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub round_cfg: RoundConfig,
    pub plan: PartitionPlan,
    pub trainer: StrategyTrainer,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    train_loss: Vec<f64>,
    curve: Vec<CurvePoint>,
}

fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let m = &config.model;
    let d = &config.data;
    let ds = match d.source {
        DataSource::Synth => {
            let spec = SynthSpec {
                classes: m.num_classes,
                samples: d.samples,
                image_size: m.image_size,
                noise: d.noise,
                domains: d.domains,
            };
            synth_dataset(&spec, &mut stream_rng(config.seed, stream::DATA, 0, 0))?
        }
        DataSource::Folder => {
            let path = d.path.as_ref().ok_or_else(|| Error::config("data.path", "required"))?;
            load_folder_dataset(path, m.image_size)?
        }
    };
    if ds.num_classes != m.num_classes {
        return Err(Error::config(
            "model.num_classes",
            format!("dataset has {} classes", ds.num_classes),
        ));
    }
    Ok(ds)
}

impl Experiment {
    pub fn setup(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model_cfg = config.model_config()?;
        let round_cfg = config.round_config();
        let dataset = load_dataset(config)?;
        let d = &config.data;
        let mut rng = stream_rng(config.seed, stream::PARTITION, 0, 0);
        let plan = match d.partition {
            PartitionKind::Dirichlet => dirichlet_partition(
                &dataset.labels,
                dataset.num_classes,
                round_cfg.num_clients,
                d.alpha,
                &mut rng,
                d.min_per_client,
            )?,
            PartitionKind::Domain => {
                let k = d.clients_per_domain.expect("validated");
                if dataset.domain_count() * k != round_cfg.num_clients {
                    return Err(Error::config(
                        "round.num_clients",
                        format!("data has {} domains × {k} clients each", dataset.domain_count()),
                    ));
                }
                domain_partition(&dataset, k, d.alpha, &mut rng, d.min_per_client)?
            }
        };
        let shards = split_per_client(
            &plan,
            &dataset,
            d.test_fraction,
            &mut stream_rng(config.seed, stream::SPLIT, 0, 0),
        )?;

        let mut template: PluggedModel =
            build_vit(&model_cfg, derive_seed(config.seed, stream::MODEL_INIT, 0, 0))?.into();
        if let Some(spec) = config.strategy.plugin_spec(&config.plugin) {
            let state = init_plugin(&spec, &model_cfg, derive_seed(config.seed, stream::PLUGIN_INIT, 0, 0))?;
            template = attach(template, state)?;
        }
        let trainer = StrategyTrainer::new(config.strategy.clone(), config.hyper.clone(), template)?;
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(i, s)| trainer.client(i, s.train, s.test))
            .collect();
        Ok(Experiment {
            config: config.clone(),
            server: ServerState::new(trainer.initial_global()),
            round_cfg,
            plan,
            trainer,
            clients,
            train_loss: Vec::new(),
            curve: Vec::new(),
        })
    }

    /// Accuracy of every client after receiving the current `u`.
    pub fn evaluate_all(&self, pool: Option<&rayon::ThreadPool>) -> Result<Vec<f64>> {
        let global = &self.server.global;
        let trainer = &self.trainer;
        pool_map(pool, self.clients.iter().collect(), |c| {
            trainer.assemble(c, global).and_then(|m| evaluate(&m, &c.test))
        })
        .into_iter()
        .collect()
    }

    /// Remaining rounds, then a final broadcast to every client and
    /// evaluation on each client's test shard.
    pub fn run(&mut self, jobs: usize) -> Result<Report> {
        let pool = if jobs > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build()
                    .map_err(|e| Error::Usage(e.to_string()))?,
            )
        } else {
            None
        };
        let pool = pool.as_ref();
        while self.server.round < self.round_cfg.total_rounds {
            let summary = run_round(
                &mut self.server,
                &mut self.clients,
                &self.trainer,
                &self.round_cfg,
                pool,
            )?;
            log::info!(
                "round {}: {} clients, loss {:.4}",
                summary.round,
                summary.sampled.len(),
                summary.mean_loss
            );
            self.train_loss.push(summary.mean_loss);
            if let Some(k) = self.round_cfg.eval_every {
                let done = self.server.round;
                if done.is_multiple_of(k) && done < self.round_cfg.total_rounds {
                    let accs = self.evaluate_all(pool)?;
                    self.curve.push(CurvePoint {
                        round: done,
                        mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
                    });
                }
            }
        }

        let round = self.server.round;
        if !self.server.global.is_empty() {
            for id in 0..self.clients.len() {
                let msg = Message::new(round, id, Direction::Broadcast, &self.server.global);
                self.server.send(msg, &self.trainer.partition.local)?;
            }
        }
        let accs = self.evaluate_all(pool)?;
        let ids: Vec<usize> = self.clients.iter().map(|c| c.id).collect();
        let accuracy = summarize_clients(&ids, &accs)?;
        let mut curve = self.curve.clone();
        curve.push(CurvePoint {
            round,
            mean_accuracy: accuracy.mean,
        });
        self.report(accuracy, curve)
    }

    fn report(&self, accuracy: AccuracySummary, curve: Vec<CurvePoint>) -> Result<Report> {
        let per_round = (0..self.round_cfg.total_rounds)
            .map(|r| {
                let sum = |d: Direction| {
                    self.server
                        .log
                        .iter()
                        .filter(|m| m.round == r && m.direction == d)
                        .map(|m| m.elements)
                        .sum()
                };
                RoundTraffic {
                    round: r,
                    broadcast: sum(Direction::Broadcast),
                    upload: sum(Direction::Upload),
                }
            })
            .collect();
        let total = |d: Direction| {
            self.server
                .log
                .iter()
                .filter(|m| m.direction == d)
                .map(|m| m.elements)
                .sum()
        };
        let catalog = self.trainer.template.catalog();
        let mut notes = Vec::new();
        if self.config.strategy == Strategy::PerFedavg {
            notes.push("per_fedavg uses the first-order meta-gradient".to_string());
        }
        Ok(Report {
            strategy: self.config.strategy.to_string(),
            seed: self.config.seed,
            rounds: self.server.round,
            num_clients: self.round_cfg.num_clients,
            sampled_per_round: self.round_cfg.sampled_count()?,
            accuracy,
            train_loss: self.train_loss.clone(),
            curve,
            messages: MessageTotals {
                broadcast_elements: total(Direction::Broadcast),
                upload_elements: total(Direction::Upload),
                per_round,
            },
            global_params_per_client: catalog.count_ids(&self.trainer.partition.global),
            local_params_per_client: catalog.count_ids(&self.trainer.partition.local),
            resources: resource_report(
                std::slice::from_ref(&self.config.strategy),
                self.trainer.template.config(),
                &self.config.plugin,
            )?,
            notes,
        })
    }

    /// PFXP files for `u`, every `v_i` and APFL personal model, plus
    /// `checkpoint.json` with the round, config hash, α values and the seeds
    /// of the next round's streams as decimal strings.
    pub fn save_checkpoint(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.server
            .global
            .write_pfxp(fs::File::create(dir.join("global.pfxp"))?)?;
        let round = self.server.round as u64;
        let seed = self.config.seed;
        let mut clients = Vec::new();
        for c in &self.clients {
            c.local
                .write_pfxp(fs::File::create(dir.join(format!("client_{}.pfxp", c.id)))?)?;
            if let Some(shadow) = &c.shadow {
                shadow.write_pfxp(fs::File::create(dir.join(format!("client_{}_personal.pfxp", c.id)))?)?;
            }
            clients.push(serde_json::json!({
                "id": c.id,
                "apfl_alpha": c.apfl_alpha,
                "rng_seed": derive_seed(seed, stream::CLIENT, round, c.id as u64).to_string(),
            }));
        }
        let manifest = serde_json::json!({
            "round": round,
            "config_hash": config_hash,
            "seed": seed.to_string(),
            "sampling_rng_seed": derive_seed(seed, stream::SAMPLING, round, 0).to_string(),
            "clients": clients,
        });
        fs::write(
            dir.join("checkpoint.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(())
    }
}

/// Set up and run an experiment with `jobs` concurrent client updates.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<Report> {
    Experiment::setup(config)?.run(jobs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::LayerTag;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn scalar(v: f64) -> ParameterSet {
        let mut s = ParameterSet::new();
        s.insert("w", LayerTag::Mlp, ArrayD::from_elem(IxDyn(&[]), v));
        s
    }

    fn upd(id: usize, v: f64, w: f64) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            params: scalar(v),
            weight: w,
        }
    }

    fn value(s: &ParameterSet) -> f64 {
        *s.get("w").unwrap().value.first().unwrap()
    }

    #[test]
    fn participation_pairs() {
        assert_eq!(sampled_count(64, 0.125).unwrap(), 8);
        assert_eq!(sampled_count(16, 0.25).unwrap(), 4);
        assert!(matches!(sampled_count(4, 0.2), Err(Error::Config { .. })));
        assert!(sampled_count(4, 0.0).is_err());
        assert!(sampled_count(4, 1.5).is_err());
        let all = sample_clients(5, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn aggregation_by_hand() {
        assert_eq!(value(&aggregate(&[upd(0, 2.0, 1.0), upd(1, 4.0, 3.0)]).unwrap()), 3.5);
        assert_eq!(value(&aggregate(&[upd(5, 0.3, 7.0)]).unwrap()), 0.3);
        let same = aggregate(&[upd(0, 0.1, 1.0), upd(1, 0.1, 2.0), upd(2, 0.1, 5.0)]).unwrap();
        assert_eq!(value(&same), 0.1);
        assert!(matches!(aggregate(&[]), Err(Error::Aggregation(_))));
        assert!(matches!(aggregate(&[upd(0, 1.0, 0.0)]), Err(Error::Aggregation(_))));
        let mut other = upd(1, 1.0, 1.0);
        other.params.insert("b", LayerTag::Mlp, ArrayD::zeros(IxDyn(&[2])));
        assert!(matches!(
            aggregate(&[upd(0, 1.0, 1.0), other]),
            Err(Error::Aggregation(_))
        ));
    }

    struct Constant(f64);

    impl Classifier for Constant {
        fn logits(&self, batch: &Batch) -> Result<Array2<f64>> {
            Ok(Array2::from_elem((batch.len(), 3), self.0))
        }
    }

    #[test]
    fn ties_go_to_class_zero() {
        let images = ndarray::Array4::zeros((6, 3, 2, 2));
        let ds = Dataset::new(images, vec![0, 1, 2, 0, 1, 2], None, 3).unwrap();
        assert!((evaluate(&Constant(0.5), &ds).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = ds.subset(&[]);
        assert!(matches!(evaluate(&Constant(0.5), &empty), Err(Error::Data(_))));
    }
}
