mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdvrp_core::env::{finalize, is_terminal, replay, reset, step};
use tdvrp_core::instance::generate;
use tdvrp_core::metaheuristics::{decode_chromosome, Decoded, encode_solution, solve_aco, solve_ga, AcoParams, GaParams};
use tdvrp_core::oracle::{solve_exact, solve_exact_with, OracleConfig, DEFAULT_BUDGET};
use tdvrp_core::{FleetConfig, FleetPreset, GeneratorConfig, Instance, State};

use common::{open_actions, random_rollout};

fn config(n: usize, vehicles: usize, intervals: usize) -> GeneratorConfig {
    GeneratorConfig::new(n, FleetPreset::Custom { vehicles, capacity: 15 }).with_intervals(intervals)
}

/// Exhaustive search over every unmasked action sequence.
fn brute_force(state: &State, instance: &Instance, fleet: &FleetConfig) -> f64 {
    if is_terminal(state) {
        return finalize(state, instance, fleet).unwrap().total_minutes;
    }
    open_actions(state, instance, fleet)
        .into_iter()
        .filter(|a| !(a.node == 0 && state.vehicle(a.vehicle).location == 0))
        .map(|a| brute_force(&step(state, a, instance, fleet).unwrap(), instance, fleet))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn exact_matches_exhaustive_search() {
    for seed in 0..12 {
        let n = 2 + (seed as usize % 3);
        let (inst, fleet) = generate(&config(n, 2, 2), seed).unwrap();
        let expected = brute_force(&reset(&inst, &fleet).unwrap(), &inst, &fleet);
        let got = solve_exact(&inst, &fleet, DEFAULT_BUDGET).unwrap();
        assert!(got.proven_optimal);
        assert!((got.best_cost - expected).abs() < 1e-9, "seed {seed}: {} vs {expected}", got.best_cost);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exact_lower_bounds_random_solutions(n in 1usize..6, vehicles in 1usize..3, seed in any::<u64>(), walk in any::<u64>()) {
        let (inst, fleet) = generate(&config(n, vehicles, 3), seed).unwrap();
        let best = solve_exact(&inst, &fleet, DEFAULT_BUDGET).unwrap();
        prop_assert!(best.proven_optimal);
        let again = replay(&inst, &fleet, &best.best_solution.actions).unwrap();
        prop_assert_eq!(again.total_minutes, best.best_cost);
        let mut rng = ChaCha8Rng::seed_from_u64(walk);
        if let Some(end) = random_rollout(&inst, &fleet, &mut rng, |_| {}) {
            prop_assert!(best.best_cost <= finalize(&end, &inst, &fleet).unwrap().total_minutes + 1e-9);
        }
    }

    #[test]
    fn pruning_and_symmetry_breaking_preserve_the_optimum(n in 1usize..6, seed in any::<u64>()) {
        let (inst, fleet) = generate(&config(n, 2, 3), seed).unwrap();
        let run = |prune, break_symmetry| {
            solve_exact_with(&inst, &fleet, OracleConfig { budget: DEFAULT_BUDGET, prune, break_symmetry })
                .unwrap()
                .best_cost
        };
        let reference = run(false, false);
        prop_assert_eq!(run(true, true), reference);
        prop_assert_eq!(run(true, false), reference);
        prop_assert_eq!(run(false, true), reference);
    }

    #[test]
    fn chromosomes_round_trip(n in 1usize..8, seed in any::<u64>(), walk in any::<u64>()) {
        let (inst, fleet) = generate(&config(n, 2, 3), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(walk);
        if let Some(end) = random_rollout(&inst, &fleet, &mut rng, |_| {}) {
            let solution = finalize(&end, &inst, &fleet).unwrap();
            let empty_trip = solution.trip_customers().iter().flatten().any(|t| t.is_empty());
            match decode_chromosome(&encode_solution(&solution, n), &inst, &fleet).unwrap() {
                Decoded::Feasible(decoded) => {
                    prop_assert!((decoded.total_minutes - solution.total_minutes).abs() < 1e-9)
                }
                Decoded::Infeasible { .. } => prop_assert!(empty_trip),
            }
        }
    }
}

#[test]
fn metaheuristics_never_beat_the_oracle_and_replay_exactly() {
    let aco = AcoParams { ants: 10, iterations: 30, ..AcoParams::desk() };
    let ga = GaParams { population: 16, generations: 20, ..GaParams::desk() };
    for seed in 0..6 {
        let (inst, fleet) = generate(&config(5, 2, 3), 100 + seed).unwrap();
        let best = solve_exact(&inst, &fleet, DEFAULT_BUDGET).unwrap().best_cost;
        for report in [solve_aco(&inst, &fleet, &aco, seed).unwrap(), solve_ga(&inst, &fleet, &ga, seed).unwrap()] {
            assert!(report.objective >= best - 1e-9, "{} beat the optimum", report.solver);
            let again = replay(&inst, &fleet, &report.solution.actions).unwrap();
            assert_eq!(again.total_minutes, report.objective);
            assert_eq!(report.instance_digest, inst.digest(&fleet));
        }
    }
}

#[test]
fn metaheuristics_are_seed_deterministic() {
    let (inst, fleet) = generate(&config(6, 2, 3), 9).unwrap();
    let aco = AcoParams { ants: 8, iterations: 20, ..AcoParams::desk() };
    let ga = GaParams { population: 12, generations: 15, ..GaParams::desk() };
    let a = solve_aco(&inst, &fleet, &aco, 4).unwrap();
    let b = solve_aco(&inst, &fleet, &aco, 4).unwrap();
    assert_eq!(a.solution, b.solution);
    let a = solve_ga(&inst, &fleet, &ga, 4).unwrap();
    let b = solve_ga(&inst, &fleet, &ga, 4).unwrap();
    assert_eq!(a.solution, b.solution);
}
