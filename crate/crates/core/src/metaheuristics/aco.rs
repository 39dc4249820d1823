//! Time-dependent ant colony system with early vehicle change.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, Action, Solution, State, DEPOT};
use crate::error::{Error, Result};
use crate::instance::{validate_instance, FleetConfig, Instance};
use crate::report::{stream_rng, SolverReport};

pub const PHEROMONE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcoParams {
    pub ants: usize,
    pub evaporation: f64,
    pub iterations: usize,
    pub alpha: f64,
    pub beta: f64,
    pub q0: f64,
    /// Lower trail bound as a fraction of the initial trail.
    pub min_trail_ratio: f64,
}

impl Default for AcoParams {
    fn default() -> Self {
        Self {
            ants: 100,
            evaporation: 0.1,
            iterations: 1280,
            alpha: 1.0,
            beta: 2.0,
            q0: 0.1,
            min_trail_ratio: 0.5,
        }
    }
}

impl AcoParams {
    /// Iteration budget for the named problem sizes; other sizes use the nearest larger one.
    pub fn for_size(n: usize) -> Self {
        let iterations = match n {
            0..=10 => 1280,
            11..=20 => 2496,
            21..=50 => 4992,
            _ => 12496,
        };
        Self { iterations, ..Self::default() }
    }

    /// Short run for tiny instances.
    pub fn desk() -> Self {
        Self {
            iterations: 300,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ants == 0 {
            return Err(Error::InvalidArgument("ants must be at least 1".into()));
        }
        if !(self.evaporation > 0.0 && self.evaporation < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "evaporation must lie in (0, 1), got {}",
                self.evaporation
            )));
        }
        if !(0.0..=1.0).contains(&self.min_trail_ratio) {
            return Err(Error::InvalidArgument(format!(
                "min_trail_ratio must lie in [0, 1], got {}",
                self.min_trail_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.q0) {
            return Err(Error::InvalidArgument(format!("q0 must lie in [0, 1], got {}", self.q0)));
        }
        Ok(())
    }
}

/// Pheromone trails indexed by (from, to, departure interval).
#[derive(Debug, Clone, PartialEq)]
pub struct Pheromone {
    nodes: usize,
    intervals: usize,
    floor: f64,
    trail: Vec<f64>,
}

impl Pheromone {
    pub fn uniform(nodes: usize, intervals: usize, level: f64) -> Self {
        Self {
            nodes,
            intervals,
            floor: PHEROMONE_FLOOR,
            trail: vec![level.max(PHEROMONE_FLOOR); nodes * nodes * intervals],
        }
    }

    /// Raise the lower trail bound; never below [`PHEROMONE_FLOOR`].
    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor.max(PHEROMONE_FLOOR);
        for t in &mut self.trail {
            *t = t.max(self.floor);
        }
        self
    }

    fn offset(&self, from: usize, to: usize, p: usize) -> usize {
        (from * self.nodes + to) * self.intervals + p - 1
    }

    pub fn get(&self, from: usize, to: usize, p: usize) -> f64 {
        self.trail[self.offset(from, to, p)]
    }

    pub fn set(&mut self, from: usize, to: usize, p: usize, level: f64) {
        let o = self.offset(from, to, p);
        self.trail[o] = level.max(self.floor);
    }

    pub fn evaporate(&mut self, rho: f64) {
        let floor = self.floor;
        for t in &mut self.trail {
            *t = ((1.0 - rho) * *t).max(floor);
        }
    }

    pub fn deposit(&mut self, solution: &Solution) {
        if !(solution.total_minutes > 0.0) {
            return;
        }
        let amount = 1.0 / solution.total_minutes;
        for leg in solution.vehicles.iter().flat_map(|v| &v.trips).flat_map(|t| &t.legs) {
            let o = self.offset(leg.from, leg.to, leg.interval);
            self.trail[o] += amount;
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.trail
    }

    /// Unnormalized transition weights `tau^alpha * (1/c)^beta` for `candidates`.
    pub fn weights(&self, instance: &Instance, from: usize, p: usize, candidates: &[usize], params: &AcoParams) -> Vec<f64> {
        candidates
            .iter()
            .map(|&j| {
                let visibility = 1.0 / instance.cost(from, j, p).max(1e-9);
                self.get(from, j, p).powf(params.alpha) * visibility.powf(params.beta)
            })
            .collect()
    }
}

fn pick(weights: &[f64], q0: f64, rng: &mut ChaCha8Rng) -> usize {
    if rng.gen::<f64>() < q0 {
        let mut best = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w > weights[best] {
                best = i;
            }
        }
        return best;
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return rng.gen_range(0..weights.len());
    }
    let mut r = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    weights.len() - 1
}

/// Nodes the vehicle may move to next, depot included when away from it.
fn candidates(state: &State, vehicle: usize, instance: &Instance, fleet: &FleetConfig) -> (Vec<usize>, bool) {
    let mask = env::action_mask(state, vehicle, instance, fleet);
    let nodes: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
    let has_customer = nodes.iter().any(|&i| i != DEPOT);
    (nodes, has_customer)
}

/// Build one ant's solution; `None` when the fleet runs out before every customer is served.
pub fn construct(
    instance: &Instance,
    fleet: &FleetConfig,
    pheromone: &Pheromone,
    params: &AcoParams,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Solution>> {
    let mut state = env::reset_unchecked(instance, fleet);
    let mut vehicle = 0;
    while !env::is_terminal(&state) {
        let (mut nodes, has_customer) = candidates(&state, vehicle, instance, fleet);
        if !has_customer {
            // Early vehicle change: head home, then hand over if still stuck.
            if state.vehicle(vehicle).location != DEPOT {
                env::step_mut(&mut state, Action::new(vehicle, DEPOT), instance, fleet)?;
                continue;
            }
            vehicle += 1;
            if vehicle == fleet.vehicles {
                return Ok(None);
            }
            continue;
        }
        let v = state.vehicle(vehicle);
        if v.location == DEPOT {
            nodes.retain(|&i| i != DEPOT);
        }
        let w = pheromone.weights(instance, v.location, v.interval, &nodes, params);
        let next = nodes[pick(&w, params.q0, rng)];
        env::step_mut(&mut state, Action::new(vehicle, next), instance, fleet)?;
    }
    env::finalize(&state, instance, fleet).map(Some)
}

pub fn solve_aco(instance: &Instance, fleet: &FleetConfig, params: &AcoParams, seed: u64) -> Result<SolverReport> {
    params.validate()?;
    let violations = validate_instance(instance, fleet);
    if !violations.is_empty() {
        return Err(Error::InvalidInstance(violations));
    }
    let start = Instant::now();
    let n = instance.n();
    if n == 0 {
        let solution = Solution::empty(fleet.vehicles);
        return Ok(SolverReport::new("aco", params, instance, fleet, solution, 0.0, Some(seed)));
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=n {
        for j in (0..=n).filter(|&j| j != i) {
            for p in 1..=instance.interval_count() {
                total += instance.cost(i, j, p);
                count += 1;
            }
        }
    }
    let tau0 = 1.0 / (n as f64 * (total / count as f64).max(1e-9));
    let mut pheromone =
        Pheromone::uniform(instance.node_count(), instance.interval_count(), tau0).with_floor(tau0 * params.min_trail_ratio);

    let mut best: Option<Solution> = None;
    for it in 0..params.iterations {
        let ants: Vec<Option<Solution>> = (0..params.ants)
            .into_par_iter()
            .map(|a| {
                let mut rng = stream_rng(seed, (it * params.ants + a) as u64);
                construct(instance, fleet, &pheromone, params, &mut rng)
            })
            .collect::<Result<_>>()?;
        let iteration_best = ants
            .into_iter()
            .flatten()
            .min_by(|a, b| a.total_minutes.total_cmp(&b.total_minutes));

        pheromone.evaporate(params.evaporation);
        if let Some(sol) = iteration_best {
            pheromone.deposit(&sol);
            if best.as_ref().map_or(true, |b| sol.total_minutes < b.total_minutes) {
                best = Some(sol);
            }
        }
    }
    let solution = best.ok_or_else(|| Error::Infeasible("no ant built a complete solution".into()))?;
    let wall = start.elapsed().as_secs_f64();
    Ok(SolverReport::new("aco", params, instance, fleet, solution, wall, Some(seed)))
}
