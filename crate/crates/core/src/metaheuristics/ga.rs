//! Elitist genetic algorithm over separator-encoded chromosomes.
//!
//! Genes are customers `1..=n`; `0` closes a trip and `n + 1` closes a
//! vehicle's day. Exactly one terminator per vehicle.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, Action, Solution, VehicleState, DEPOT};
use crate::error::{Error, Result};
use crate::instance::{validate_instance, FleetConfig, Instance};
use crate::report::{stream_rng, SolverReport};

const INIT_ATTEMPTS_PER_SLOT: usize = 100;
const EARLY_SPLIT: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaParams {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    /// Per-gene swap probability.
    pub mutation_rate: f64,
    pub elite_count: usize,
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            population: 128,
            generations: 200,
            crossover_rate: 0.9,
            mutation_rate: 0.1,
            elite_count: 2,
        }
    }
}

impl GaParams {
    /// Population and generation budget per named problem size.
    pub fn for_size(n: usize) -> Self {
        let (population, generations) = match n {
            0..=10 => (128, 200),
            11..=20 => (256, 500),
            21..=50 => (1024, 2000),
            _ => (2048, 4000),
        };
        Self {
            population,
            generations,
            ..Self::default()
        }
    }

    pub fn desk() -> Self {
        Self {
            population: 64,
            generations: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {rate}")));
            }
        }
        if self.population == 0 || self.elite_count >= self.population {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= elite_count < population, got {} and {}",
                self.elite_count, self.population
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chromosome {
    pub genes: Vec<usize>,
}

impl Chromosome {
    pub fn new(genes: Vec<usize>) -> Self {
        Self { genes }
    }

    /// Customers in gene order.
    pub fn customers(&self, n: usize) -> Vec<usize> {
        self.genes.iter().copied().filter(|&g| g != 0 && g != n + 1).collect()
    }

    fn check(&self, n: usize, vehicles: usize) -> Result<()> {
        let mut seen = vec![false; n + 2];
        let mut terminators = 0;
        for (pos, &g) in self.genes.iter().enumerate() {
            if g > n + 1 {
                return Err(Error::InvalidArgument(format!("gene {g} at position {pos} is out of range")));
            }
            if g == n + 1 {
                terminators += 1;
            } else if g != 0 {
                if seen[g] {
                    return Err(Error::InvalidArgument(format!("customer {g} repeated at position {pos}")));
                }
                seen[g] = true;
            }
        }
        if let Some(missing) = (1..=n).find(|&c| !seen[c]) {
            return Err(Error::InvalidArgument(format!("customer {missing} missing from chromosome")));
        }
        if terminators != vehicles || self.genes.last() != Some(&(n + 1)) {
            return Err(Error::InvalidArgument(format!(
                "expected {vehicles} terminators ending the chromosome, found {terminators}"
            )));
        }
        Ok(())
    }
}

/// Outcome of replaying a chromosome through the env.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Feasible(Solution),
    /// The gene at `position` asks for a masked move.
    Infeasible { position: usize, action: Action },
}

fn actions_of(ch: &Chromosome, n: usize) -> Vec<(usize, Action)> {
    let mut out = Vec::with_capacity(ch.genes.len());
    let mut vehicle = 0;
    let mut away = false;
    for (pos, &g) in ch.genes.iter().enumerate() {
        if g == 0 || g == n + 1 {
            if away {
                out.push((pos, Action::new(vehicle, DEPOT)));
                away = false;
            }
            if g == n + 1 {
                vehicle += 1;
            }
        } else {
            out.push((pos, Action::new(vehicle, g)));
            away = true;
        }
    }
    out
}

pub fn decode_chromosome(ch: &Chromosome, instance: &Instance, fleet: &FleetConfig) -> Result<Decoded> {
    let n = instance.n();
    ch.check(n, fleet.vehicles)?;
    let mut state = env::reset_unchecked(instance, fleet);
    for (position, action) in actions_of(ch, n) {
        match env::step_mut(&mut state, action, instance, fleet) {
            Ok(()) => {}
            Err(Error::MaskedAction { .. }) => return Ok(Decoded::Infeasible { position, action }),
            Err(e) => return Err(e),
        }
    }
    Ok(Decoded::Feasible(env::finalize(&state, instance, fleet)?))
}

pub fn encode_solution(solution: &Solution, n: usize) -> Chromosome {
    let mut genes = Vec::new();
    for v in &solution.vehicles {
        for (t, trip) in v.trips.iter().enumerate() {
            if t > 0 {
                genes.push(0);
            }
            genes.extend(trip.customers());
        }
        genes.push(n + 1);
    }
    Chromosome { genes }
}

/// `1/(1 + total) + sum_j (T_max - minutes_j)`; larger is better.
pub fn ga_fitness(solution: &Solution, fleet: &FleetConfig) -> f64 {
    let slack: f64 = solution.vehicles.iter().map(|v| fleet.max_hours - v.minutes).sum();
    1.0 / (1.0 + solution.total_minutes) + slack
}

/// Cost-only replay; `Err(position)` on the first masked gene.
fn evaluate(genes: &[usize], instance: &Instance, fleet: &FleetConfig) -> std::result::Result<(f64, Vec<f64>), usize> {
    let n = instance.n();
    let mut visited = vec![false; n + 1];
    let mut per_vehicle = vec![0.0; fleet.vehicles];
    let mut total = 0.0;
    let mut vehicle = 0;
    let mut v = VehicleState::fresh(instance, fleet);
    let go = |v: &mut VehicleState, node: usize, visited: &[bool], vehicle: usize, total: &mut f64, pv: &mut [f64]| {
        if v.forbids(instance, fleet, node, |c| visited[c]) {
            return false;
        }
        let leg = v.advance(instance, fleet, node).expect("mask guarantees the move");
        *total += leg.leg_minutes;
        pv[vehicle] += leg.leg_minutes;
        true
    };
    for (pos, &g) in genes.iter().enumerate() {
        if g == 0 || g == n + 1 {
            if v.location != DEPOT {
                go(&mut v, DEPOT, &visited, vehicle, &mut total, &mut per_vehicle);
            }
            if g == n + 1 {
                vehicle += 1;
                if vehicle < fleet.vehicles {
                    v = VehicleState::fresh(instance, fleet);
                }
            }
        } else {
            if vehicle >= fleet.vehicles || !go(&mut v, g, &visited, vehicle, &mut total, &mut per_vehicle) {
                return Err(pos);
            }
            visited[g] = true;
        }
    }
    Ok((total, per_vehicle))
}

fn fitness_of(total: f64, per_vehicle: &[f64], fleet: &FleetConfig) -> f64 {
    1.0 / (1.0 + total) + per_vehicle.iter().map(|m| fleet.max_hours - m).sum::<f64>()
}

#[derive(Debug, Clone)]
struct Individual {
    genes: Vec<usize>,
    total: f64,
    fitness: f64,
}

impl Individual {
    fn try_new(genes: Vec<usize>, instance: &Instance, fleet: &FleetConfig) -> Option<Self> {
        let (total, pv) = evaluate(&genes, instance, fleet).ok()?;
        Some(Self {
            fitness: fitness_of(total, &pv, fleet),
            genes,
            total,
        })
    }
}

/// Greedy split of a customer order into trips and vehicles.
fn split(order: &[usize], instance: &Instance, fleet: &FleetConfig, rng: &mut ChaCha8Rng, early: f64) -> Option<Vec<usize>> {
    let n = instance.n();
    let mut visited = vec![false; n + 1];
    let mut genes = Vec::with_capacity(order.len() * 2 + fleet.vehicles);
    let mut vehicle = 0;
    let mut v = VehicleState::fresh(instance, fleet);
    for &c in order {
        if v.location != DEPOT && rng.gen::<f64>() < early {
            v.advance(instance, fleet, DEPOT).ok()?;
            genes.push(0);
        }
        loop {
            if !v.forbids(instance, fleet, c, |x| visited[x]) {
                v.advance(instance, fleet, c).ok()?;
                visited[c] = true;
                genes.push(c);
                break;
            }
            if v.location != DEPOT {
                v.advance(instance, fleet, DEPOT).ok()?;
                genes.push(0);
                continue;
            }
            vehicle += 1;
            if vehicle >= fleet.vehicles {
                return None;
            }
            if genes.last() == Some(&0) {
                genes.pop();
            }
            genes.push(n + 1);
            v = VehicleState::fresh(instance, fleet);
        }
    }
    while vehicle < fleet.vehicles {
        genes.push(n + 1);
        vehicle += 1;
    }
    Some(genes)
}

/// Move each violating customer to its cheapest feasible slot, one at a time.
fn repair(mut genes: Vec<usize>, instance: &Instance, fleet: &FleetConfig) -> Option<Vec<usize>> {
    let n = instance.n();
    for _ in 0..=n {
        let pos = match evaluate(&genes, instance, fleet) {
            Ok(_) => return Some(genes),
            Err(pos) => pos,
        };
        let c = genes.remove(pos);
        let mut best: Option<(f64, Vec<usize>)> = None;
        for at in 0..genes.len() {
            for with_break in [false, true] {
                let mut trial = genes.clone();
                if with_break {
                    trial.splice(at..at, [0, c]);
                } else {
                    trial.insert(at, c);
                }
                if let Ok((total, _)) = evaluate(&trial, instance, fleet) {
                    if best.as_ref().map_or(true, |(b, _)| total < *b) {
                        best = Some((total, trial));
                    }
                }
            }
        }
        genes = best?.1;
    }
    None
}

/// Order crossover on customer sequences; separators follow the first parent.
fn order_crossover(a: &[usize], b: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let pa: Vec<usize> = a.iter().copied().filter(|&g| g != 0 && g != n + 1).collect();
    let pb: Vec<usize> = b.iter().copied().filter(|&g| g != 0 && g != n + 1).collect();
    let len = pa.len();
    if len < 2 {
        return a.to_vec();
    }
    let mut i = rng.gen_range(0..len);
    let mut j = rng.gen_range(0..len);
    if i > j {
        std::mem::swap(&mut i, &mut j);
    }
    let mut child = vec![0usize; len];
    let mut used = vec![false; n + 1];
    for k in i..=j {
        child[k] = pa[k];
        used[pa[k]] = true;
    }
    let mut fill = pb.iter().cycle().skip(j + 1).filter(|&&g| !used[g]);
    for k in (j + 1..len).chain(0..i) {
        child[k] = *fill.next().expect("enough genes");
    }
    let mut it = child.into_iter();
    a.iter()
        .map(|&g| if g == 0 || g == n + 1 { g } else { it.next().expect("same customer count") })
        .collect()
}

/// Swap two genes; separators and terminators move too, except the final terminator.
fn swap_mutation(genes: &mut [usize], rng: &mut ChaCha8Rng) {
    let len = genes.len().saturating_sub(1);
    if len < 2 {
        return;
    }
    let x = rng.gen_range(0..len);
    let y = rng.gen_range(0..len);
    genes.swap(x, y);
}

fn tournament<'a>(pop: &'a [Individual], rng: &mut ChaCha8Rng) -> &'a Individual {
    let a = &pop[rng.gen_range(0..pop.len())];
    let b = &pop[rng.gen_range(0..pop.len())];
    if b.fitness > a.fitness {
        b
    } else {
        a
    }
}

fn by_fitness(a: &Individual, b: &Individual) -> std::cmp::Ordering {
    b.fitness.total_cmp(&a.fitness).then_with(|| a.genes.cmp(&b.genes))
}

/// Per-generation best fitness, recorded for elitism checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GaTrace {
    pub best_fitness: Vec<f64>,
}

pub fn solve_ga(instance: &Instance, fleet: &FleetConfig, params: &GaParams, seed: u64) -> Result<SolverReport> {
    solve_ga_traced(instance, fleet, params, seed).map(|(r, _)| r)
}

pub fn solve_ga_traced(
    instance: &Instance,
    fleet: &FleetConfig,
    params: &GaParams,
    seed: u64,
) -> Result<(SolverReport, GaTrace)> {
    params.validate()?;
    let violations = validate_instance(instance, fleet);
    if !violations.is_empty() {
        return Err(Error::InvalidInstance(violations));
    }
    let start = Instant::now();
    let n = instance.n();

    let mut rng = stream_rng(seed, u64::MAX);
    let mut population: Vec<Individual> = Vec::with_capacity(params.population);
    let mut attempts = 0;
    let customers: Vec<usize> = (1..=n).collect();
    while population.len() < params.population {
        attempts += 1;
        if attempts > INIT_ATTEMPTS_PER_SLOT * params.population {
            if population.is_empty() {
                return Err(Error::Infeasible(format!(
                    "no feasible chromosome found in {} attempts",
                    attempts - 1
                )));
            }
            let k = population.len();
            let clone: Individual = population[rng.gen_range(0..k)].clone();
            population.push(clone);
            continue;
        }
        let mut order = customers.clone();
        order.shuffle(&mut rng);
        let early = if population.is_empty() { 0.0 } else { EARLY_SPLIT };
        if let Some(ind) = split(&order, instance, fleet, &mut rng, early).and_then(|g| Individual::try_new(g, instance, fleet)) {
            population.push(ind);
        }
    }
    population.sort_by(by_fitness);

    let mut trace = GaTrace::default();
    trace.best_fitness.push(population[0].fitness);
    for gen in 0..params.generations {
        let offspring: Vec<Individual> = (params.elite_count..params.population)
            .into_par_iter()
            .map(|slot| {
                let mut rng = stream_rng(seed, (gen * params.population + slot) as u64);
                let a = tournament(&population, &mut rng);
                let b = tournament(&population, &mut rng);
                let mut genes = if rng.gen::<f64>() < params.crossover_rate {
                    order_crossover(&a.genes, &b.genes, n, &mut rng)
                } else {
                    a.genes.clone()
                };
                for _ in 0..genes.len() {
                    if rng.gen::<f64>() < params.mutation_rate {
                        swap_mutation(&mut genes, &mut rng);
                    }
                }
                repair(genes, instance, fleet)
                    .and_then(|g| Individual::try_new(g, instance, fleet))
                    .unwrap_or_else(|| a.clone())
            })
            .collect();
        population.truncate(params.elite_count);
        population.extend(offspring);
        population.sort_by(by_fitness);
        trace.best_fitness.push(population[0].fitness);
    }

    let best = Chromosome::new(population[0].genes.clone());
    let solution = match decode_chromosome(&best, instance, fleet)? {
        Decoded::Feasible(s) => s,
        Decoded::Infeasible { position, .. } => {
            return Err(Error::Infeasible(format!("best chromosome fails replay at gene {position}")))
        }
    };
    debug_assert!((solution.total_minutes - population[0].total).abs() < 1e-6);
    let wall = start.elapsed().as_secs_f64();
    Ok((SolverReport::new("ga", params, instance, fleet, solution, wall, Some(seed)), trace))
}
