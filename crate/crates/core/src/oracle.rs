//! Exhaustive branch-and-bound solver for tiny instances.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::env::{self, Action, Solution, State, VehicleState, DEPOT};
use crate::error::{Error, Result};
use crate::instance::{validate_instance, FleetConfig, Instance};

pub const DEFAULT_BUDGET: u64 = 10_000_000;

/// Costs closer than this are treated as ties.
const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OracleConfig {
    pub budget: u64,
    pub prune: bool,
    /// Vehicle k+1 may only start once vehicle k has.
    pub break_symmetry: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            prune: true,
            break_symmetry: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    pub best_solution: Solution,
    pub best_cost: f64,
    pub nodes_expanded: u64,
    pub proven_optimal: bool,
}

pub fn solve_exact(instance: &Instance, fleet: &FleetConfig, budget: u64) -> Result<OracleResult> {
    solve_exact_with(instance, fleet, OracleConfig { budget, ..OracleConfig::default() })
}

/// Depth-first search over the env's action space.
///
/// Vehicles are routed one after another: once a later vehicle moves, the
/// earlier ones are closed. Cost depends only on each vehicle's own sequence,
/// so every solution keeps a representative in this order.
pub fn solve_exact_with(instance: &Instance, fleet: &FleetConfig, config: OracleConfig) -> Result<OracleResult> {
    if config.budget == 0 {
        return Err(Error::InvalidArgument("budget must be positive".into()));
    }
    let violations = validate_instance(instance, fleet);
    if !violations.is_empty() {
        return Err(Error::InvalidInstance(violations));
    }
    let n = instance.n();
    if n > 127 {
        return Err(Error::InvalidArgument(format!("exact search supports at most 127 customers, got {n}")));
    }

    let mut min_in = vec![f64::INFINITY; n + 1];
    for (to, slot) in min_in.iter_mut().enumerate() {
        for from in (0..=n).filter(|&f| f != to) {
            for p in 1..=instance.interval_count() {
                *slot = slot.min(instance.cost(from, to, p));
            }
        }
    }
    if n == 0 {
        min_in[DEPOT] = 0.0;
    }

    let mut search = Search {
        instance,
        fleet,
        config,
        min_in,
        vehicles: vec![VehicleState::fresh(instance, fleet); fleet.vehicles],
        started: vec![false; fleet.vehicles],
        active: None,
        visited: 0,
        remaining: n,
        path: Vec::with_capacity(3 * n),
        best_cost: f64::INFINITY,
        best_path: None,
        expanded: 0,
        exhausted: false,
    };
    search.dfs(0.0);

    let proven = !search.exhausted;
    let Some(path) = search.best_path else {
        return Err(Error::Infeasible(if proven {
            "no feasible solution exists".into()
        } else {
            format!("budget of {} expansions exhausted before any feasible solution", config.budget)
        }));
    };
    let solution = env::replay(instance, fleet, &path)?;
    Ok(OracleResult {
        best_cost: solution.total_minutes,
        best_solution: solution,
        nodes_expanded: search.expanded,
        proven_optimal: proven,
    })
}

struct Search<'a> {
    instance: &'a Instance,
    fleet: &'a FleetConfig,
    config: OracleConfig,
    min_in: Vec<f64>,
    vehicles: Vec<VehicleState>,
    started: Vec<bool>,
    active: Option<usize>,
    visited: u128,
    remaining: usize,
    path: Vec<Action>,
    best_cost: f64,
    best_path: Option<Vec<Action>>,
    expanded: u64,
    exhausted: bool,
}

impl Search<'_> {
    fn return_cost(&self, k: usize) -> f64 {
        let v = &self.vehicles[k];
        if v.location == DEPOT {
            0.0
        } else {
            self.instance.cost(v.location, DEPOT, v.interval)
        }
    }

    fn lower_bound(&self, cost: f64) -> f64 {
        let mut bound = cost;
        for i in 1..=self.instance.n() {
            if self.visited & (1 << i) == 0 {
                bound += self.min_in[i];
            }
        }
        for k in 0..self.vehicles.len() {
            if self.vehicles[k].location == DEPOT {
                continue;
            }
            bound += if Some(k) == self.active {
                self.min_in[DEPOT]
            } else {
                self.return_cost(k)
            };
        }
        bound
    }

    fn offer(&mut self, cost: f64) {
        let better = cost < self.best_cost - TIE_EPS
            || (cost <= self.best_cost + TIE_EPS
                && self.best_path.as_ref().map_or(true, |b| self.path < *b));
        if better {
            self.best_cost = cost;
            self.best_path = Some(self.path.clone());
        }
    }

    fn allowed_vehicles(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(k) = self.active {
            out.push(k);
        }
        for k in 0..self.vehicles.len() {
            if self.started[k] {
                continue;
            }
            out.push(k);
            if self.config.break_symmetry {
                break;
            }
        }
        out.sort_unstable();
        out
    }

    fn dfs(&mut self, cost: f64) {
        if self.exhausted {
            return;
        }
        self.expanded += 1;
        if self.expanded > self.config.budget {
            self.exhausted = true;
            return;
        }
        if self.remaining == 0 {
            let total = cost + (0..self.vehicles.len()).map(|k| self.return_cost(k)).sum::<f64>();
            self.offer(total);
            return;
        }
        if self.config.prune && self.lower_bound(cost) > self.best_cost + TIE_EPS {
            return;
        }

        let visited = self.visited;
        for k in self.allowed_vehicles() {
            let saved = self.vehicles[k];
            for node in 0..self.instance.node_count() {
                if node == DEPOT && saved.location == DEPOT {
                    continue;
                }
                if saved.forbids(self.instance, self.fleet, node, |c| visited & (1 << c) != 0) {
                    continue;
                }
                let mut moved = saved;
                let Ok(leg) = moved.advance(self.instance, self.fleet, node) else {
                    continue;
                };
                let (prev_active, prev_started) = (self.active, self.started[k]);
                self.vehicles[k] = moved;
                self.active = Some(k);
                self.started[k] = true;
                if node != DEPOT {
                    self.visited |= 1 << node;
                    self.remaining -= 1;
                }
                self.path.push(Action::new(k, node));

                self.dfs(cost + leg.leg_minutes);

                self.path.pop();
                if node != DEPOT {
                    self.visited &= !(1 << node);
                    self.remaining += 1;
                }
                self.vehicles[k] = saved;
                self.active = prev_active;
                self.started[k] = prev_started;
                if self.exhausted {
                    return;
                }
            }
        }
    }
}

/// Feasible moves computed by direct simulation, without consulting the mask.
/// Depot moves of a vehicle already at the depot are left out.
pub fn enumerate_feasible_actions(state: &State, instance: &Instance, fleet: &FleetConfig) -> BTreeSet<Action> {
    let bounds = instance.schedule().boundaries();
    let t_max = fleet.max_hours;
    let interval_at = |elapsed: f64| -> Option<usize> {
        if !(0.0..=t_max).contains(&elapsed) {
            return None;
        }
        let last = bounds.len() - 1;
        (1..=last)
            .find(|&p| bounds[p - 1] <= elapsed && elapsed < bounds[p])
            .or(Some(last))
    };

    let mut out = BTreeSet::new();
    for (k, v) in state.vehicles().iter().enumerate() {
        let elapsed = t_max - v.remaining_hours;
        let here = v.location;
        if here != DEPOT && instance.cost(here, DEPOT, v.interval) <= v.remaining_hours {
            out.insert(Action::new(k, DEPOT));
        }
        for c in 1..=instance.n() {
            if state.is_visited(c) || instance.demand(c) > v.remaining_capacity {
                continue;
            }
            let out_leg = instance.cost(here, c, v.interval);
            let Some(p_next) = interval_at(elapsed + out_leg) else {
                continue;
            };
            if out_leg + instance.cost(c, DEPOT, p_next) <= v.remaining_hours {
                out.insert(Action::new(k, c));
            }
        }
    }
    out
}
