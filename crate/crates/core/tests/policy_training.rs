mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdvrp_core::env::action_mask;
use tdvrp_core::instance::generate;
use tdvrp_core::policy::{
    encode, init_params, load_params, rollout, save_params, DecodeMode, Policy, PolicyDims,
};
use tdvrp_core::trainer::{TrainConfig, TrainState, Trainer};
use tdvrp_core::{FleetPreset, GeneratorConfig};

use common::random_rollout;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        dims: PolicyDims::new(8, 2, 1, 3),
        customers: 5,
        batch_size: 4,
        instances_per_epoch: 8,
        eval_instances: 4,
        max_epochs: 2,
        seed: 7,
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn distributions_are_normalized_along_random_walks(n in 1usize..9, seed in any::<u64>(), walk in any::<u64>()) {
        let cfg = GeneratorConfig::new(n, FleetPreset::DESK).with_intervals(3);
        let (inst, fleet) = generate(&cfg, seed).unwrap();
        let params = init_params(PolicyDims::new(8, 2, 1, 3), seed ^ 1).unwrap();
        let mut policy = Policy::new(&params, &inst, &fleet).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(walk);
        let mut checks = Vec::new();
        random_rollout(&inst, &fleet, &mut rng, |s| {
            if tdvrp_core::env::is_terminal(s) {
                return;
            }
            let v = policy.vehicle_probabilities(s).unwrap();
            checks.push(v.iter().sum::<f64>());
            for (k, &pk) in v.iter().enumerate() {
                if pk > 0.0 {
                    let mask = action_mask(s, k, &inst, &fleet);
                    let p = policy.node_probabilities(s, k).unwrap();
                    checks.push(p.iter().sum::<f64>());
                    checks.extend(p.iter().zip(&mask).filter(|(_, &m)| m).map(|(x, _)| 1.0 + x));
                }
            }
        });
        for c in checks {
            prop_assert!((c - 1.0).abs() < 1e-6, "{}", c);
        }
    }
}

#[test]
fn saved_policy_decodes_identically() {
    let dir = tempfile_dir();
    let params = init_params(PolicyDims::desk(), 3).unwrap();
    let path = dir.join("policy.json");
    save_params(&params, &path).unwrap();
    let loaded = load_params(&path).unwrap();
    assert_eq!(loaded, params);
    let (inst, fleet) = generate(&GeneratorConfig::desk(), 5).unwrap();
    for mode in [DecodeMode::Greedy, DecodeMode::Sample { seed: 2 }] {
        assert_eq!(
            rollout(&inst, &fleet, &params, mode).unwrap(),
            rollout(&inst, &fleet, &loaded, mode).unwrap()
        );
    }
}

#[test]
fn interrupted_training_resumes_to_the_same_result() {
    let dir = tempfile_dir();
    let mut straight = Trainer::new(tiny_config()).unwrap();
    straight.run(|_| Ok(())).unwrap();

    let mut first = Trainer::new(TrainConfig { max_epochs: 1, ..tiny_config() }).unwrap();
    first.run(|_| Ok(())).unwrap();
    let path = dir.join("checkpoint.json");
    first.state.save(&path).unwrap();
    let mut state = TrainState::load(&path).unwrap();
    state.config.max_epochs = 2;
    state.finished = false;
    let mut resumed = Trainer::resume(state).unwrap();
    resumed.run(|_| Ok(())).unwrap();

    assert_eq!(resumed.state.iteration, straight.state.iteration);
    assert_eq!(resumed.state.params, straight.state.params);
    assert_eq!(resumed.state.lr(), straight.state.lr());
    let costs = |t: &Trainer| t.state.log.iter().map(|r| r.mean_greedy_cost).collect::<Vec<_>>();
    assert_eq!(costs(&resumed), costs(&straight));
}

#[test]
fn rollout_budget_is_never_exceeded() {
    for budget in [3, 20, 45, 100] {
        let mut trainer = Trainer::new(TrainConfig {
            rollout_budget: Some(budget),
            max_epochs: 50,
            ..tiny_config()
        })
        .unwrap();
        trainer.run(|_| Ok(())).unwrap();
        assert!(trainer.state.rollouts <= budget, "{} > {budget}", trainer.state.rollouts);
    }
}

#[test]
fn flattened_encoder_reads_mean_costs() {
    let (inst, fleet) = generate(&GeneratorConfig::desk(), 8).unwrap();
    let params = init_params(PolicyDims::desk().flattened(), 4).unwrap();
    let a = encode(&inst, &fleet, &params).unwrap();
    let b = encode(&inst.time_flattened(), &fleet, &params).unwrap();
    assert_eq!(a.node, b.node);
    assert_eq!(a.graph, b.graph);
    let sol = rollout(&inst, &fleet, &params, DecodeMode::Greedy).unwrap();
    assert_eq!(
        tdvrp_core::env::replay(&inst, &fleet, &sol.actions).unwrap().total_minutes,
        sol.total_minutes
    );
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("tdvrp-it-{}-{:?}", std::process::id(), std::thread::current().id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
