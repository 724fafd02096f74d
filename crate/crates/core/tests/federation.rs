//! Round mechanics, aggregation invariants, privacy and determinism.

use std::collections::BTreeSet;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use perfix_core::config::ExperimentConfig;
use perfix_core::data::{synth_dataset, Dataset, SynthSpec};
use perfix_core::federation::{
    aggregate, evaluate, run_experiment, run_round, Classifier, ClientState, ClientUpdate, Experiment, LocalTrainer,
    RoundConfig, ServerState,
};
use perfix_core::metrics::{gain_density, summarize};
use perfix_core::model::{build_vit, Batch, ModelConfig, Preset};
use perfix_core::rng::{stream, stream_rng};
use perfix_core::strategies::{local_update, Strategy, TrainStats};
use perfix_core::{Error, LayerTag, ParameterSet, Result, Selector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar(v: f64) -> ParameterSet {
    let mut s = ParameterSet::new();
    s.insert("w", LayerTag::Mlp, ArrayD::from_elem(IxDyn(&[]), v));
    s
}

fn value(s: &ParameterSet) -> f64 {
    *s.get("w").unwrap().value.first().unwrap()
}

fn tiny_dataset(n: usize) -> Dataset {
    Dataset::new(Array4::zeros((n, 3, 2, 2)), vec![0; n], None, 1).unwrap()
}

fn client(id: usize, n: usize) -> ClientState {
    ClientState {
        id,
        local: ParameterSet::new(),
        shadow: None,
        apfl_alpha: 0.0,
        train: tiny_dataset(n),
        test: tiny_dataset(1),
    }
}

fn round_cfg(n: usize, r: f64) -> RoundConfig {
    RoundConfig {
        total_rounds: 5,
        num_clients: n,
        participation_ratio: r,
        seed: 3,
        uniform_weights: false,
        eval_every: None,
    }
}

/// One gradient step on `f_i(w) = (w − t_i)²/2`, whose gradient is `w − t_i`.
struct Quadratic {
    targets: Vec<f64>,
    lr: f64,
    local: BTreeSet<String>,
}

impl LocalTrainer for Quadratic {
    fn local_ids(&self) -> &BTreeSet<String> {
        &self.local
    }

    fn train(
        &self,
        client: &mut ClientState,
        global: &ParameterSet,
        _: &mut ChaCha8Rng,
    ) -> Result<(ParameterSet, TrainStats)> {
        let w = value(global);
        Ok((
            scalar(w - self.lr * (w - self.targets[client.id])),
            TrainStats::default(),
        ))
    }
}

#[test]
fn two_client_round_by_hand() {
    let trainer = Quadratic {
        targets: vec![1.0, 5.0],
        lr: 0.5,
        local: BTreeSet::new(),
    };
    let mut server = ServerState::new(scalar(3.0));
    let mut clients = vec![client(0, 1), client(1, 3)];
    run_round(&mut server, &mut clients, &trainer, &round_cfg(2, 1.0), None).unwrap();
    // client 0: 3 − 0.5·2 = 2; client 1: 3 − 0.5·(−2) = 4; weights 1:3 → 3.5
    assert_eq!(value(&server.global), 3.5);
    assert_eq!(server.round, 1);
    assert_eq!(server.log.len(), 4);
    assert!(server
        .log
        .iter()
        .all(|m| m.elements == 1 && m.ids == vec!["w".to_string()]));
}

#[test]
fn local_id_in_a_message_is_a_privacy_error() {
    let trainer = Quadratic {
        targets: vec![0.0],
        lr: 0.1,
        local: ["w".to_string()].into(),
    };
    let mut server = ServerState::new(scalar(1.0));
    let err = run_round(&mut server, &mut [client(0, 1)], &trainer, &round_cfg(1, 1.0), None).unwrap_err();
    assert!(matches!(err, Error::Privacy { ref id, round: 0 } if id == "w"), "{err}");
}

#[test]
fn unsampled_clients_are_untouched() {
    struct Marker(BTreeSet<String>);
    impl LocalTrainer for Marker {
        fn local_ids(&self) -> &BTreeSet<String> {
            &self.0
        }
        fn train(
            &self,
            client: &mut ClientState,
            global: &ParameterSet,
            _: &mut ChaCha8Rng,
        ) -> Result<(ParameterSet, TrainStats)> {
            client.local = scalar(client.id as f64);
            Ok((global.clone(), TrainStats::default()))
        }
    }
    let mut server = ServerState::new(ParameterSet::new());
    let mut clients: Vec<ClientState> = (0..8).map(|i| client(i, 2)).collect();
    let before = clients.clone();
    let summary = run_round(
        &mut server,
        &mut clients,
        &Marker(BTreeSet::new()),
        &round_cfg(8, 0.25),
        None,
    )
    .unwrap();
    assert_eq!(summary.sampled.len(), 2);
    assert!(server.log.is_empty(), "empty global part sends nothing");
    for (a, b) in clients.iter().zip(&before) {
        if summary.sampled.contains(&a.id) {
            assert_eq!(value(&a.local), a.id as f64);
        } else {
            assert_eq!(a, b);
        }
    }
}

fn random_set(rng: &mut ChaCha8Rng) -> ParameterSet {
    let mut s = ParameterSet::new();
    s.insert(
        "a",
        LayerTag::Attention,
        ArrayD::from_shape_fn(IxDyn(&[2, 3]), |_| rng.random::<f64>() * 10.0 - 5.0),
    );
    s.insert(
        "b",
        LayerTag::Mlp,
        ArrayD::from_shape_fn(IxDyn(&[4]), |_| rng.random::<f64>() * 1e-3),
    );
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_is_permutation_invariant_and_convex(seed in any::<u64>(), k in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut updates: Vec<ClientUpdate> = (0..k)
            .map(|i| ClientUpdate {
                client_id: i * 3 + 1,
                params: random_set(&mut rng),
                weight: rng.random_range(1..50) as f64,
            })
            .collect();
        let reference = aggregate(&updates).unwrap();
        for _ in 0..3 {
            use rand::seq::SliceRandom;
            updates.shuffle(&mut rng);
            prop_assert_eq!(&aggregate(&updates).unwrap(), &reference);
        }
        for (id, p) in reference.iter() {
            for (flat, &v) in p.value.iter().enumerate() {
                let vals: Vec<f64> = updates.iter().map(|u| u.params.get(id).unwrap().value.as_slice().unwrap()[flat]).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo <= v && v <= hi);
            }
        }
        let same: Vec<ClientUpdate> = updates.iter().map(|u| ClientUpdate { params: updates[0].params.clone(), ..u.clone() }).collect();
        prop_assert_eq!(&aggregate(&same).unwrap(), &updates[0].params);
    }
}

fn config(strategy: &str, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 11

[model]
preset = "desk-tiny"
image_size = 8
patch_size = 4
num_classes = 4

[strategy]
name = "{strategy}"

[hyper]
lr = 0.1
local_epochs = 1
batch_size = 8

[round]
total_rounds = 2
num_clients = 4
participation_ratio = 0.5
{extra}

[data]
source = "synth"
samples = 96
alpha = 0.5
"#
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

#[test]
fn no_local_id_ever_leaves_a_client() {
    for strategy in [
        "fedperfix",
        "fedrep",
        "fedbn_ln",
        "vanilla_attention",
        "apfl",
        "prompt_local",
    ] {
        let mut exp = Experiment::setup(&config(strategy, "")).unwrap();
        exp.run(1).unwrap();
        let local = &exp.trainer.partition.local;
        assert!(!exp.server.log.is_empty());
        for m in &exp.server.log {
            assert!(m.ids.iter().all(|id| !local.contains(id)), "{strategy}");
            assert_eq!(
                m.ids.iter().cloned().collect::<BTreeSet<_>>(),
                exp.trainer.partition.global
            );
        }
        for c in &exp.clients {
            assert_eq!(c.local.ids(), *local, "{strategy}: v_i ids");
        }
    }
}

#[test]
fn local_strategy_sends_nothing() {
    let report = run_experiment(&config("local", ""), 1).unwrap();
    assert_eq!(report.messages.broadcast_elements, 0);
    assert_eq!(report.messages.upload_elements, 0);
    assert_eq!(report.global_params_per_client, 0);
}

#[test]
fn reports_are_deterministic_and_independent_of_jobs() {
    for strategy in ["fedperfix", "apfl", "per_fedavg"] {
        let cfg = config(strategy, "eval_every = 1");
        let a = run_experiment(&cfg, 1).unwrap().to_json();
        let b = run_experiment(&cfg, 1).unwrap().to_json();
        let c = run_experiment(&cfg, 4).unwrap().to_json();
        assert_eq!(a, b, "{strategy}");
        assert_eq!(a, c, "{strategy}");
    }
    let mut other = config("fedperfix", "");
    other.seed += 1;
    assert_ne!(
        run_experiment(&other, 1).unwrap().accuracy,
        run_experiment(&config("fedperfix", ""), 1).unwrap().accuracy
    );
}

#[test]
fn report_counts_messages() {
    let report = run_experiment(&config("fedavg", ""), 1).unwrap();
    let g = report.global_params_per_client;
    // 2 sampled clients per round, both directions, plus the final broadcast to 4
    assert_eq!(report.messages.upload_elements, 2 * 2 * g);
    assert_eq!(report.messages.broadcast_elements, (2 * 2 + 4) * g);
    assert_eq!(report.messages.per_round.len(), 2);
    assert_eq!(report.accuracy.per_client.len(), 4);
    assert_eq!(report.resources[0].strategy, "fedavg");
    let d = gain_density(&report.accuracy, &report.accuracy, 0.05).unwrap();
    assert_eq!(d.bins.iter().map(|b| b.count).sum::<usize>(), 4);
}

#[test]
fn single_client_round_is_one_sgd_epoch() {
    let mut cfg = config("fedavg", "");
    cfg.round.num_clients = 1;
    cfg.round.participation_ratio = 1.0;
    cfg.round.total_rounds = 1;
    let mut exp = Experiment::setup(&cfg).unwrap();
    let mut direct = exp.trainer.template.clone();
    let round_cfg = exp.round_cfg.clone();
    run_round(&mut exp.server, &mut exp.clients, &exp.trainer, &round_cfg, None).unwrap();
    let mut rng = stream_rng(cfg.seed, stream::CLIENT, 0, 0);
    local_update(
        &Strategy::Fedavg,
        &mut direct,
        &exp.clients[0].train,
        &cfg.hyper,
        &mut rng,
    )
    .unwrap();
    assert_eq!(exp.server.global, direct.params());
}

#[test]
fn separable_shard_is_learned_in_one_round() {
    let mut cfg = config("fedavg", "");
    cfg.model.num_classes = 2;
    cfg.data.samples = 80;
    cfg.data.noise = 0.01;
    cfg.round.num_clients = 1;
    cfg.round.participation_ratio = 1.0;
    cfg.round.total_rounds = 1;
    cfg.hyper.local_epochs = 20;
    let report = run_experiment(&cfg, 1).unwrap();
    assert_eq!(report.accuracy.mean, 1.0);
}

#[test]
fn synthetic_two_class_task_trains_within_50_steps() {
    let spec = SynthSpec {
        classes: 2,
        samples: 64,
        image_size: 8,
        noise: 0.01,
        domains: 1,
    };
    let ds = synth_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cfg = ModelConfig::from_preset(Preset::DeskTiny, 8, 4, 2);
    let mut model: perfix_core::plugins::PluggedModel = build_vit(&cfg, 1).unwrap().into();
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut steps = 0;
    while evaluate(&model, &ds).unwrap() < 0.95 {
        assert!(steps < 50, "not trained after 50 steps");
        let idx: Vec<usize> = (0..16).map(|_| all[rng.random_range(0..all.len())]).collect();
        let (_, g) = model.loss_and_gradients(&ds.batch(&idx), &Selector::All).unwrap();
        model.sgd_step(&g, 0.1).unwrap();
        steps += 1;
    }
}

struct RandomLogits;

impl Classifier for RandomLogits {
    fn logits(&self, batch: &Batch) -> Result<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(batch.len() as u64 + (batch.images.sum() * 1e6) as u64);
        Ok(Array2::from_shape_fn((batch.len(), 10), |_| rng.random::<f64>()))
    }
}

#[test]
fn random_logits_score_near_chance() {
    let spec = SynthSpec {
        classes: 10,
        samples: 1000,
        image_size: 2,
        noise: 0.5,
        domains: 1,
    };
    let ds = synth_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let acc = evaluate(&RandomLogits, &ds).unwrap();
    assert!((acc - 0.1).abs() <= 0.03, "{acc}");
}

#[test]
fn checkpoints_round_trip() {
    let mut exp = Experiment::setup(&config("apfl", "")).unwrap();
    exp.run(1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    exp.save_checkpoint(dir.path(), "abc").unwrap();
    let read = |name: &str| ParameterSet::read_pfxp(std::fs::File::open(dir.path().join(name)).unwrap()).unwrap();
    assert_eq!(read("global.pfxp"), exp.server.global);
    assert_eq!(read("client_2.pfxp"), exp.clients[2].local);
    assert_eq!(Some(read("client_2_personal.pfxp")), exp.clients[2].shadow);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(manifest["round"], 2);
    assert_eq!(manifest["seed"], "11");
    assert!(manifest["clients"][0]["rng_seed"]
        .as_str()
        .unwrap()
        .parse::<u64>()
        .is_ok());
}

#[test]
fn summary_matches_report() {
    let report = run_experiment(&config("fedbabu", ""), 1).unwrap();
    assert_eq!(
        summarize(&report.accuracy.per_client).unwrap().mean,
        report.accuracy.mean
    );
    assert!(report.messages.per_round.iter().all(|r| r.upload > 0));
}
