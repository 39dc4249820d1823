//! The routing MDP: fleet and routing state, feasibility mask, deterministic
//! transitions, rewards and solution accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{validate_instance, FleetConfig, Instance, TIME_EPS};

pub const DEPOT: usize = 0;

/// Vehicle `vehicle` travels to node `node`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Action {
    pub vehicle: usize,
    pub node: usize,
}

impl Action {
    pub fn new(vehicle: usize, node: usize) -> Self {
        Self { vehicle, node }
    }
}

/// Per-vehicle 5-tuple plus the previous location needed by the depot rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VehicleState {
    pub remaining_capacity: u32,
    pub location: usize,
    pub previous_location: usize,
    pub remaining_hours: f64,
    /// 1-based current interval.
    pub interval: usize,
    /// Minutes left in the current interval.
    pub interval_residue: f64,
}

impl VehicleState {
    pub fn fresh(instance: &Instance, fleet: &FleetConfig) -> Self {
        let schedule = instance.schedule();
        Self {
            remaining_capacity: fleet.capacity,
            location: DEPOT,
            previous_location: DEPOT,
            remaining_hours: fleet.max_hours,
            interval: 1,
            interval_residue: schedule.boundaries()[1],
        }
    }

    /// Minutes since the start of the day.
    pub fn elapsed(&self, fleet: &FleetConfig) -> f64 {
        fleet.max_hours - self.remaining_hours
    }

    /// Whether the mask forbids `node` for this vehicle. `visited` reports served customers.
    #[inline]
    pub fn forbids(
        &self,
        instance: &Instance,
        fleet: &FleetConfig,
        node: usize,
        visited: impl Fn(usize) -> bool,
    ) -> bool {
        if node == DEPOT {
            return self.location == DEPOT && self.previous_location == DEPOT;
        }
        if visited(node) {
            return true;
        }
        if instance.demand(node) > self.remaining_capacity {
            return true;
        }
        let out = instance.cost(self.location, node, self.interval);
        let arrival = self.elapsed(fleet) + out;
        if arrival > fleet.max_hours {
            return true;
        }
        let next = match instance.schedule().interval_of(arrival) {
            Ok(p) => p,
            Err(_) => return true,
        };
        self.remaining_hours < out + instance.cost(node, DEPOT, next)
    }

    /// Apply a move and return the travelled leg. Feasibility is the caller's job.
    pub fn advance(&mut self, instance: &Instance, fleet: &FleetConfig, node: usize) -> Result<Leg> {
        let depart = self.elapsed(fleet);
        let minutes = instance.cost(self.location, node, self.interval);
        let remaining = self.remaining_hours - minutes;
        if remaining < -TIME_EPS {
            return Err(Error::Infeasible(format!(
                "vehicle would exceed working hours travelling {} -> {node}",
                self.location
            )));
        }
        let leg = Leg {
            from: self.location,
            to: node,
            depart_minute: depart,
            interval: self.interval,
            leg_minutes: minutes,
        };
        self.remaining_hours = remaining.max(0.0);
        let elapsed = fleet.max_hours - self.remaining_hours;
        let schedule = instance.schedule();
        self.interval = schedule.interval_of(elapsed)?;
        self.interval_residue = (schedule.boundaries()[self.interval] - elapsed).max(0.0);
        self.remaining_capacity = if node == DEPOT {
            fleet.capacity
        } else {
            self.remaining_capacity - instance.demand(node)
        };
        self.previous_location = self.location;
        self.location = node;
        Ok(leg)
    }
}

/// One travelled edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Leg {
    pub from: usize,
    pub to: usize,
    pub depart_minute: f64,
    pub interval: usize,
    pub leg_minutes: f64,
}

/// A depot-anchored trip.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub legs: Vec<Leg>,
}

impl Trip {
    pub fn customers(&self) -> Vec<usize> {
        self.legs.iter().map(|l| l.to).filter(|&v| v != DEPOT).collect()
    }

    pub fn minutes(&self) -> f64 {
        self.legs.iter().map(|l| l.leg_minutes).sum()
    }

    pub fn is_closed(&self) -> bool {
        self.legs.last().map_or(false, |l| l.to == DEPOT)
    }
}

/// Fleet state and routing state.
#[derive(Debug, Clone)]
pub struct State {
    vehicles: Vec<VehicleState>,
    visited: Vec<bool>,
    remaining: usize,
    served_interval: Vec<usize>,
    step: usize,
    trips: Vec<Vec<Trip>>,
    actions: Vec<Action>,
    travel: f64,
}

impl State {
    pub fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    pub fn vehicle(&self, k: usize) -> &VehicleState {
        &self.vehicles[k]
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_visited(&self, customer: usize) -> bool {
        self.visited[customer]
    }

    pub fn visited(&self) -> impl Iterator<Item = usize> + '_ {
        (1..self.visited.len()).filter(|&i| self.visited[i])
    }

    pub fn to_visit(&self) -> impl Iterator<Item = usize> + '_ {
        (1..self.visited.len()).filter(|&i| !self.visited[i])
    }

    pub fn visited_count(&self) -> usize {
        self.visited.len() - 1 - self.remaining
    }

    pub fn remaining(&self) -> usize {
        self.remaining
    }

    /// Interval in which a served customer was reached.
    pub fn served_interval(&self, customer: usize) -> Option<usize> {
        match self.served_interval[customer] {
            0 => None,
            p => Some(p),
        }
    }

    pub fn trips(&self, vehicle: usize) -> &[Trip] {
        &self.trips[vehicle]
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    /// Minutes travelled so far, summed in action order.
    pub fn travelled(&self) -> f64 {
        self.travel
    }
}

pub fn reset(instance: &Instance, fleet: &FleetConfig) -> Result<State> {
    let violations = validate_instance(instance, fleet);
    if !violations.is_empty() {
        return Err(Error::InvalidInstance(violations));
    }
    Ok(reset_unchecked(instance, fleet))
}

/// [`reset`] without the validation pass, for hot loops over known-valid instances.
pub fn reset_unchecked(instance: &Instance, fleet: &FleetConfig) -> State {
    let n = instance.n();
    State {
        vehicles: vec![VehicleState::fresh(instance, fleet); fleet.vehicles],
        visited: vec![false; n + 1],
        remaining: n,
        served_interval: vec![0; n + 1],
        step: 0,
        trips: vec![Vec::new(); fleet.vehicles],
        actions: Vec::new(),
        travel: 0.0,
    }
}

/// Boolean mask over nodes `0..=n`; `true` means forbidden.
pub fn action_mask(state: &State, vehicle: usize, instance: &Instance, fleet: &FleetConfig) -> Vec<bool> {
    let v = &state.vehicles[vehicle];
    (0..instance.node_count())
        .map(|node| v.forbids(instance, fleet, node, |c| state.visited[c]))
        .collect()
}

pub fn has_feasible_action(state: &State, vehicle: usize, instance: &Instance, fleet: &FleetConfig) -> bool {
    let v = &state.vehicles[vehicle];
    (0..instance.node_count()).any(|node| !v.forbids(instance, fleet, node, |c| state.visited[c]))
}

/// Apply `action` in place.
pub fn step_mut(state: &mut State, action: Action, instance: &Instance, fleet: &FleetConfig) -> Result<()> {
    if action.vehicle >= state.vehicles.len() || action.node >= instance.node_count() {
        return Err(Error::OutOfRange(format!("action {action:?}")));
    }
    let v = &mut state.vehicles[action.vehicle];
    if v.forbids(instance, fleet, action.node, |c| state.visited[c]) {
        return Err(Error::MaskedAction { action });
    }
    let was_at_depot = v.location == DEPOT;
    let leg = v.advance(instance, fleet, action.node)?;
    let arrival_interval = v.interval;

    let trips = &mut state.trips[action.vehicle];
    if !(was_at_depot && action.node == DEPOT) {
        if was_at_depot {
            trips.push(Trip::default());
        }
        trips.last_mut().expect("open trip").legs.push(leg);
    }
    if action.node != DEPOT {
        state.visited[action.node] = true;
        state.served_interval[action.node] = arrival_interval;
        state.remaining -= 1;
    }
    state.travel += leg.leg_minutes;
    state.actions.push(action);
    state.step += 1;
    Ok(())
}

/// Functional transition: returns the successor state.
pub fn step(state: &State, action: Action, instance: &Instance, fleet: &FleetConfig) -> Result<State> {
    let mut next = state.clone();
    step_mut(&mut next, action, instance, fleet)?;
    Ok(next)
}

/// Negated travel minutes of the leg `action` would travel from `prev`.
pub fn single_step_reward(prev: &State, action: Action, instance: &Instance) -> f64 {
    let v = &prev.vehicles[action.vehicle];
    -instance.cost(v.location, action.node, v.interval)
}

pub fn is_terminal(state: &State) -> bool {
    state.remaining == 0
}

/// Vehicles that still have at least one unmasked node.
pub fn feasible_vehicles(state: &State, instance: &Instance, fleet: &FleetConfig) -> Vec<bool> {
    (0..state.vehicles.len())
        .map(|k| has_feasible_action(state, k, instance, fleet))
        .collect()
}

/// Error unless some vehicle can still act.
pub fn ensure_progress(state: &State, instance: &Instance, fleet: &FleetConfig) -> Result<()> {
    if is_terminal(state) || (0..state.vehicles.len()).any(|k| has_feasible_action(state, k, instance, fleet)) {
        Ok(())
    } else {
        Err(Error::InfeasibleEpisode {
            remaining: state.remaining,
            step: state.step,
        })
    }
}

/// Per-vehicle route of a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRoute {
    pub trips: Vec<Trip>,
    pub minutes: f64,
}

/// A complete, costed set of routes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub total_minutes: f64,
    pub vehicles: Vec<VehicleRoute>,
    pub actions: Vec<Action>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub log_probability: Option<f64>,
}

impl Solution {
    /// Solution of an instance without customers.
    pub fn empty(vehicles: usize) -> Self {
        Self {
            total_minutes: 0.0,
            vehicles: vec![
                VehicleRoute {
                    trips: Vec::new(),
                    minutes: 0.0
                };
                vehicles
            ],
            actions: Vec::new(),
            log_probability: None,
        }
    }

    /// Customer sequences, one list per trip, per vehicle.
    pub fn trip_customers(&self) -> Vec<Vec<Vec<usize>>> {
        self.vehicles
            .iter()
            .map(|v| v.trips.iter().map(Trip::customers).collect())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solution serializes")
    }
}

/// Close every open trip and account the final return legs.
pub fn finalize(state: &State, instance: &Instance, fleet: &FleetConfig) -> Result<Solution> {
    if !is_terminal(state) {
        return Err(Error::NotTerminal(state.remaining));
    }
    let mut vehicles = state.vehicles.clone();
    let mut trips = state.trips.clone();
    let mut total = state.travel;
    for (k, v) in vehicles.iter_mut().enumerate() {
        if v.location != DEPOT {
            let leg = v.advance(instance, fleet, DEPOT)?;
            trips[k].last_mut().expect("open trip").legs.push(leg);
            total += leg.leg_minutes;
        }
    }
    let routes = trips
        .into_iter()
        .map(|trips| {
            let minutes = trips.iter().map(Trip::minutes).sum();
            VehicleRoute { trips, minutes }
        })
        .collect();
    Ok(Solution {
        total_minutes: total,
        vehicles: routes,
        actions: state.actions.clone(),
        log_probability: None,
    })
}

/// Re-simulate an action sequence from the initial state.
pub fn replay(instance: &Instance, fleet: &FleetConfig, actions: &[Action]) -> Result<Solution> {
    let mut state = reset(instance, fleet)?;
    for &a in actions {
        step_mut(&mut state, a, instance, fleet)?;
    }
    finalize(&state, instance, fleet)
}

/// Percent excess of `cost` over `best_cost`.
pub fn optimality_gap(cost: f64, best_cost: f64) -> Result<f64> {
    if !(best_cost > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "best cost must be positive, found {best_cost}"
        )));
    }
    Ok((cost - best_cost) / best_cost * 100.0)
}
