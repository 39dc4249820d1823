#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use tdvrp_core::env::{action_mask, is_terminal, reset, step_mut};
use tdvrp_core::{Action, FleetConfig, Instance, State};

/// Every unmasked `(vehicle, node)` pair in `state`.
pub fn open_actions(state: &State, instance: &Instance, fleet: &FleetConfig) -> Vec<Action> {
    let mut out = Vec::new();
    for k in 0..state.vehicles().len() {
        for (node, masked) in action_mask(state, k, instance, fleet).into_iter().enumerate() {
            if !masked {
                out.push(Action::new(k, node));
            }
        }
    }
    out
}

/// Uniform random walk over unmasked actions; `None` if it deadlocks.
/// `visit` sees every state along the way, including the initial one.
pub fn random_rollout<R: Rng>(
    instance: &Instance,
    fleet: &FleetConfig,
    rng: &mut R,
    mut visit: impl FnMut(&State),
) -> Option<State> {
    let mut state = reset(instance, fleet).ok()?;
    visit(&state);
    while !is_terminal(&state) {
        let open = open_actions(&state, instance, fleet);
        let &action = open.choose(rng)?;
        step_mut(&mut state, action, instance, fleet).expect("unmasked action applies");
        visit(&state);
    }
    Some(state)
}

const EPS: f64 = 1e-9;

/// MDP invariants of `state`, and monotonicity against `prev` when given.
pub fn check_state(state: &State, prev: Option<&State>, instance: &Instance, fleet: &FleetConfig) -> Result<(), String> {
    let n = instance.n();
    let visited: Vec<usize> = state.visited().collect();
    let to_visit: Vec<usize> = state.to_visit().collect();
    let mut all: Vec<usize> = visited.iter().chain(&to_visit).copied().collect();
    all.sort_unstable();
    if all != (1..=n).collect::<Vec<_>>() {
        return Err(format!("visited {visited:?} and to-visit {to_visit:?} do not partition 1..={n}"));
    }
    let schedule = instance.schedule();
    for (k, v) in state.vehicles().iter().enumerate() {
        if v.remaining_capacity > fleet.capacity {
            return Err(format!("vehicle {k} capacity {} outside [0, Q]", v.remaining_capacity));
        }
        if v.remaining_hours < 0.0 || v.remaining_hours > fleet.max_hours + EPS {
            return Err(format!("vehicle {k} remaining time {} out of range", v.remaining_hours));
        }
        let elapsed = fleet.max_hours - v.remaining_hours;
        let p = schedule.interval_of(elapsed).map_err(|e| e.to_string())?;
        if p != v.interval {
            return Err(format!("vehicle {k} interval {} but elapsed {elapsed} lies in {p}", v.interval));
        }
        let residue = schedule.boundaries()[p] - elapsed;
        if (residue.max(0.0) - v.interval_residue).abs() > 1e-6 {
            return Err(format!("vehicle {k} residue {} expected {residue}", v.interval_residue));
        }
        if let Some(prev) = prev {
            let before = &prev.vehicles()[k];
            if v.remaining_hours > before.remaining_hours + EPS {
                return Err(format!("vehicle {k} remaining time grew"));
            }
            if v.interval < before.interval {
                return Err(format!("vehicle {k} interval went back"));
            }
        }
    }
    if let Some(prev) = prev {
        if state.visited_count() < prev.visited_count() {
            return Err("visited set shrank".into());
        }
    }
    Ok(())
}
