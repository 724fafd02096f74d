//! Partitions and local update rules on a real desk-tiny model.

use std::collections::BTreeSet;

use perfix_core::data::{synth_dataset, Dataset, SynthSpec};
use perfix_core::model::{build_vit, ModelConfig, Preset};
use perfix_core::plugins::{attach, init_plugin, PluggedModel};
use perfix_core::strategies::{local_update, pre_eval, Hyperparameters, PluginOverrides, Strategy};
use perfix_core::{Error, LayerTag};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig::from_preset(Preset::DeskTiny, 8, 4, 3)
}

fn model_for(strategy: &Strategy) -> PluggedModel {
    let cfg = config();
    let mut m: PluggedModel = build_vit(&cfg, 0).unwrap().into();
    if let Some(spec) = strategy.plugin_spec(&PluginOverrides::default()) {
        m = attach(m, init_plugin(&spec, &cfg, 1).unwrap()).unwrap();
    }
    m
}

fn shard(n: usize) -> Dataset {
    shard_seeded(n, 5)
}

fn shard_seeded(n: usize, seed: u64) -> Dataset {
    let spec = SynthSpec {
        classes: 3,
        samples: n,
        image_size: 8,
        noise: 0.1,
        domains: 1,
    };
    synth_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn hyper() -> Hyperparameters {
    Hyperparameters {
        lr: 0.1,
        local_epochs: 2,
        batch_size: 4,
        ..Hyperparameters::default()
    }
}

#[test]
fn partitions_are_disjoint_covers() {
    let cfg = config();
    for s in Strategy::registered() {
        let m = model_for(&s);
        let p = s.partition(&m).unwrap();
        let all = m.catalog().ids();
        assert!(p.global.is_disjoint(&p.local) && p.global.is_disjoint(&p.frozen) && p.local.is_disjoint(&p.frozen));
        let union: BTreeSet<String> = p.global.iter().chain(&p.local).chain(&p.frozen).cloned().collect();
        assert_eq!(union, all, "{s}");
        match &s {
            Strategy::Fedavg | Strategy::Apfl | Strategy::PerFedavg => assert!(p.local.is_empty()),
            Strategy::Local => assert!(p.global.is_empty()),
            Strategy::Fedrep => assert_eq!(p.local, cfg.head_ids(1)),
            Strategy::Fedbabu => assert_eq!((p.frozen.clone(), p.local.len()), (cfg.head_ids(1), 0)),
            Strategy::FedbnLn => assert!(p.local.iter().all(|id| id.contains("norm"))),
            Strategy::VanillaAttention => {
                let attn = m.catalog().ids_with_tags(&[LayerTag::Attention].into());
                assert!(attn.is_subset(&p.local));
                assert!(cfg.head_ids(cfg.head_layers).is_subset(&p.local));
            }
            _ => {
                let plugin = m.catalog().ids_with_tags(&[LayerTag::Plugin].into());
                assert!(!plugin.is_empty());
                assert!(plugin.is_subset(&p.local), "{s}");
            }
        }
    }
}

#[test]
fn missing_plugin_is_a_config_error() {
    let bare: PluggedModel = build_vit(&config(), 0).unwrap().into();
    assert!(matches!(
        Strategy::Fedperfix.partition(&bare),
        Err(Error::Config { .. })
    ));
}

#[test]
fn local_update_moves_only_trainable_ids() {
    let data = shard(24);
    for s in Strategy::registered() {
        if s == Strategy::Apfl {
            continue;
        }
        let mut m = model_for(&s);
        let before = m.params();
        let p = s.partition(&m).unwrap();
        let stats = local_update(&s, &mut m, &data, &hyper(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(stats.steps() > 0, "{s}");
        let after = m.params();
        let mut moved = false;
        for (id, v) in after.iter() {
            let changed = v.value != before.get(id).unwrap().value;
            if p.frozen.contains(id) {
                assert!(!changed, "{s}: frozen {id} moved");
            }
            moved |= changed;
        }
        assert!(moved, "{s}");
    }
}

/// Full-batch steps inside the first-order regime. Per-sample gradients at
/// the σ=0.02 init are large along sharp directions and cancel in the mean,
/// so any step on a strict subset can raise the full loss. Per-FedAvg only
/// ever steps on disjoint halves and is pinned by its scalar unit test instead.
#[test]
fn full_batch_training_lowers_the_loss() {
    let h = Hyperparameters {
        lr: 0.002,
        local_epochs: 5,
        batch_size: 24,
        fedrep_alternate: true,
        ..Hyperparameters::default()
    };
    for seed in 0..3 {
        let data = shard_seeded(24, seed);
        let batch = data.batch(&(0..24).collect::<Vec<_>>());
        for s in Strategy::registered() {
            if matches!(s, Strategy::Apfl | Strategy::PerFedavg) {
                continue;
            }
            let mut m = model_for(&s);
            let start = m.loss(&batch).unwrap();
            local_update(&s, &mut m, &data, &h, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let end = m.loss(&batch).unwrap();
            assert!(end < start, "{s} seed {seed}: {start} -> {end}");
        }
    }
}

#[test]
fn apfl_goes_through_its_own_update() {
    let mut m = model_for(&Strategy::Apfl);
    let err = local_update(
        &Strategy::Apfl,
        &mut m,
        &shard(6),
        &hyper(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn per_fedavg_needs_two_samples() {
    let mut m = model_for(&Strategy::PerFedavg);
    let one = shard(3).subset(&[0]);
    assert!(local_update(
        &Strategy::PerFedavg,
        &mut m,
        &one,
        &hyper(),
        &mut ChaCha8Rng::seed_from_u64(0)
    )
    .is_err());
}

#[test]
fn fedbabu_pre_eval_touches_only_the_head() {
    let cfg = config();
    let mut m = model_for(&Strategy::Fedbabu);
    let before = m.params();
    let mut h = hyper();
    h.babu_finetune_steps = 3;
    pre_eval(&Strategy::Fedbabu, &mut m, &shard(12), &h).unwrap();
    let head = cfg.head_ids(1);
    for (id, v) in m.params().iter() {
        let changed = v.value != before.get(id).unwrap().value;
        assert_eq!(changed, head.contains(id), "{id}");
    }
    let mut other = model_for(&Strategy::Fedavg);
    let before = other.params();
    pre_eval(&Strategy::Fedavg, &mut other, &shard(12), &h).unwrap();
    assert_eq!(other.params(), before);
}
