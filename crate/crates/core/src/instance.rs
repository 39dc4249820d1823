//! Problem instances: customer-depot graph, interval schedule, step-function
//! travel costs, fleet configuration, generation and (de)serialization.
//!
//! Interval indices are 1-based throughout the public API (`1..=interval_count`),
//! node index 0 is the depot and `1..=n` are customers. All times are minutes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Slack used when comparing accumulated floating point times against limits.
pub const TIME_EPS: f64 = 1e-9;

/// Partition of the working day `[0, T_max]` into contiguous intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeIntervalSchedule {
    boundaries: Vec<f64>,
}

impl TimeIntervalSchedule {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        let problems = schedule_violations(&boundaries);
        if !problems.is_empty() {
            return Err(Error::InvalidArgument(problems.join("; ")));
        }
        Ok(Self { boundaries })
    }

    /// `intervals` equal slices of `[0, max_hours]`.
    pub fn equal(intervals: usize, max_hours: f64) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::InvalidArgument("at least one interval is required".into()));
        }
        let width = max_hours / intervals as f64;
        let mut boundaries: Vec<f64> = (0..intervals).map(|k| k as f64 * width).collect();
        boundaries.push(max_hours);
        Self::new(boundaries)
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// `|TI|`.
    pub fn interval_count(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn t_max(&self) -> f64 {
        self.boundaries[self.boundaries.len() - 1]
    }

    /// Start and end minute of interval `p` (1-based).
    pub fn bounds(&self, p: usize) -> (f64, f64) {
        (self.boundaries[p - 1], self.boundaries[p])
    }

    pub fn width(&self, p: usize) -> f64 {
        self.boundaries[p] - self.boundaries[p - 1]
    }

    /// Interval containing `elapsed`. A boundary belongs to the interval it opens;
    /// `elapsed == T_max` maps to the last interval.
    pub fn interval_of(&self, elapsed: f64) -> Result<usize> {
        let t_max = self.t_max();
        if !elapsed.is_finite() || elapsed < -TIME_EPS || elapsed > t_max + TIME_EPS {
            return Err(Error::OutOfRange(format!(
                "elapsed time {elapsed} outside [0, {t_max}]"
            )));
        }
        // First boundary strictly greater than elapsed closes the interval.
        let upper = self.boundaries[1..].partition_point(|&b| b <= elapsed);
        Ok((upper + 1).min(self.interval_count()))
    }
}

fn schedule_violations(boundaries: &[f64]) -> Vec<String> {
    let mut out = Vec::new();
    if boundaries.len() < 2 {
        out.push("schedule needs at least two boundaries".to_string());
        return out;
    }
    if boundaries[0] != 0.0 {
        out.push(format!("schedule must start at 0, found {}", boundaries[0]));
    }
    if boundaries.iter().any(|b| !b.is_finite()) {
        out.push("schedule boundaries must be finite".to_string());
    }
    if boundaries.windows(2).any(|w| w[1] <= w[0]) {
        out.push("schedule boundaries must be strictly increasing".to_string());
    }
    out
}

/// Node features: coordinates and integer demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub x: f64,
    pub y: f64,
    pub demand: u32,
}

/// Dense `(n+1) x (n+1) x |TI|` travel-minute tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTensor {
    nodes: usize,
    intervals: usize,
    data: Vec<f64>,
}

impl CostTensor {
    pub fn zeros(nodes: usize, intervals: usize) -> Self {
        Self {
            nodes,
            intervals,
            data: vec![0.0; nodes * nodes * intervals],
        }
    }

    /// Build from a closure over `(from, to, interval)` with 1-based intervals.
    pub fn from_fn(nodes: usize, intervals: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(nodes, intervals);
        for i in 0..nodes {
            for j in 0..nodes {
                for p in 1..=intervals {
                    t.set(i, j, p, f(i, j, p));
                }
            }
        }
        t
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn interval_count(&self) -> usize {
        self.intervals
    }

    #[inline]
    fn offset(&self, from: usize, to: usize, p: usize) -> usize {
        (from * self.nodes + to) * self.intervals + (p - 1)
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize, p: usize) -> f64 {
        self.data[self.offset(from, to, p)]
    }

    pub fn set(&mut self, from: usize, to: usize, p: usize, minutes: f64) {
        let k = self.offset(from, to, p);
        self.data[k] = minutes;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Fleet size, per-vehicle capacity, and the working-hours limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    #[serde(rename = "f")]
    pub vehicles: usize,
    #[serde(rename = "Q")]
    pub capacity: u32,
    #[serde(rename = "T_max")]
    pub max_hours: f64,
}

/// Provenance carried in the instance file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub seed: Option<u64>,
    pub preset: String,
}

/// A multi-trip time-dependent routing instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    nodes: Vec<Node>,
    cost: CostTensor,
    schedule: TimeIntervalSchedule,
    meta: InstanceMeta,
}

impl Instance {
    /// Assemble an instance; shape mismatches are rejected, value-level problems
    /// are left to [`validate_instance`].
    pub fn new(
        nodes: Vec<Node>,
        cost: CostTensor,
        schedule: TimeIntervalSchedule,
        meta: InstanceMeta,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Shape("an instance needs at least the depot node".into()));
        }
        if cost.node_count() != nodes.len() || cost.interval_count() != schedule.interval_count() {
            return Err(Error::Shape(format!(
                "cost tensor is {}x{}x{}, expected {}x{}x{}",
                cost.node_count(),
                cost.node_count(),
                cost.interval_count(),
                nodes.len(),
                nodes.len(),
                schedule.interval_count()
            )));
        }
        Ok(Self {
            nodes,
            cost,
            schedule,
            meta,
        })
    }

    /// Number of customers.
    pub fn n(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn demand(&self, i: usize) -> u32 {
        self.nodes[i].demand
    }

    pub fn schedule(&self) -> &TimeIntervalSchedule {
        &self.schedule
    }

    pub fn interval_count(&self) -> usize {
        self.schedule.interval_count()
    }

    pub fn costs(&self) -> &CostTensor {
        &self.cost
    }

    pub fn meta(&self) -> &InstanceMeta {
        &self.meta
    }

    /// Unchecked lookup used on hot paths; indices must be valid.
    #[inline]
    pub fn cost(&self, from: usize, to: usize, p: usize) -> f64 {
        self.cost.get(from, to, p)
    }

    /// Travel minutes from `from` to `to` when departing during interval `p`.
    pub fn travel_cost(&self, from: usize, to: usize, p: usize) -> Result<f64> {
        let n = self.node_count();
        if from >= n || to >= n {
            return Err(Error::OutOfRange(format!(
                "node pair ({from}, {to}) outside 0..{n}"
            )));
        }
        if p == 0 || p > self.interval_count() {
            return Err(Error::OutOfRange(format!(
                "interval {p} outside 1..={}",
                self.interval_count()
            )));
        }
        Ok(self.cost.get(from, to, p))
    }

    /// Copy of this instance with every edge's costs replaced by its mean over
    /// intervals and a single-interval schedule.
    pub fn time_flattened(&self) -> Instance {
        let intervals = self.interval_count();
        let nodes = self.node_count();
        let cost = CostTensor::from_fn(nodes, 1, |i, j, _| {
            (1..=intervals).map(|p| self.cost(i, j, p)).sum::<f64>() / intervals as f64
        });
        let schedule = TimeIntervalSchedule::new(vec![0.0, self.schedule.t_max()])
            .expect("two-boundary schedule is valid");
        Instance {
            nodes: self.nodes.clone(),
            cost,
            schedule,
            meta: self.meta.clone(),
        }
    }

    /// Copy with customers relabelled: new customer `k` is old customer `perm[k-1]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Instance> {
        let n = self.n();
        let mut seen = vec![false; n + 1];
        if perm.len() != n || perm.iter().any(|&c| c == 0 || c > n || std::mem::replace(&mut seen[c], true)) {
            return Err(Error::InvalidArgument("not a permutation of the customers".into()));
        }
        let old = |k: usize| if k == 0 { 0 } else { perm[k - 1] };
        let nodes = (0..=n).map(|k| self.nodes[old(k)]).collect();
        let cost = CostTensor::from_fn(n + 1, self.interval_count(), |i, j, p| {
            self.cost(old(i), old(j), p)
        });
        Instance::new(nodes, cost, self.schedule.clone(), self.meta.clone())
    }

    /// Hex SHA-256 over the canonical document text.
    pub fn digest(&self, fleet: &FleetConfig) -> String {
        let text = write_instance(self, fleet);
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Capacity/fleet presets from the benchmark problem sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FleetPreset {
    Mttdvrp10,
    Mttdvrp20,
    Mttdvrp50,
    Mttdvrp100,
    Custom { vehicles: usize, capacity: u32 },
}

impl FleetPreset {
    /// Small two-vehicle fleet used for desk-scale experiments.
    pub const DESK: FleetPreset = FleetPreset::Custom {
        vehicles: 2,
        capacity: 15,
    };

    /// `(vehicles, capacity)`.
    pub fn fleet(&self) -> (usize, u32) {
        match *self {
            FleetPreset::Mttdvrp10 => (2, 20),
            FleetPreset::Mttdvrp20 => (3, 30),
            FleetPreset::Mttdvrp50 => (3, 40),
            FleetPreset::Mttdvrp100 => (5, 50),
            FleetPreset::Custom { vehicles, capacity } => (vehicles, capacity),
        }
    }

    pub fn name(&self) -> String {
        match self {
            FleetPreset::Mttdvrp10 => "10".into(),
            FleetPreset::Mttdvrp20 => "20".into(),
            FleetPreset::Mttdvrp50 => "50".into(),
            FleetPreset::Mttdvrp100 => "100".into(),
            FleetPreset::Custom { vehicles, capacity } => format!("custom:f={vehicles},Q={capacity}"),
        }
    }

    /// Preset whose problem-set size matches `size`, if any.
    pub fn for_size(size: usize) -> Option<FleetPreset> {
        match size {
            10 => Some(FleetPreset::Mttdvrp10),
            20 => Some(FleetPreset::Mttdvrp20),
            50 => Some(FleetPreset::Mttdvrp50),
            100 => Some(FleetPreset::Mttdvrp100),
            _ => None,
        }
    }
}

impl fmt::Display for FleetPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for FleetPreset {
    type Err = Error;

    /// Accepts `10`, `20`, `50`, `100`, `custom` (desk fleet) and
    /// `custom:f=<vehicles>,Q=<capacity>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "10" => return Ok(FleetPreset::Mttdvrp10),
            "20" => return Ok(FleetPreset::Mttdvrp20),
            "50" => return Ok(FleetPreset::Mttdvrp50),
            "100" => return Ok(FleetPreset::Mttdvrp100),
            "custom" => return Ok(FleetPreset::DESK),
            _ => {}
        }
        let unknown = || Error::InvalidArgument(format!("unknown fleet preset `{s}`"));
        let body = s.strip_prefix("custom:").ok_or_else(unknown)?;
        let (mut vehicles, mut capacity) = FleetPreset::DESK.fleet();
        for part in body.split(',') {
            let (key, value) = part.split_once('=').ok_or_else(unknown)?;
            match key.trim() {
                "f" => vehicles = value.trim().parse().map_err(|_| unknown())?,
                "Q" => capacity = value.trim().parse().map_err(|_| unknown())?,
                _ => return Err(unknown()),
            }
        }
        Ok(FleetPreset::Custom { vehicles, capacity })
    }
}

impl Serialize for FleetPreset {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for FleetPreset {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub size: usize,
    pub preset: FleetPreset,
    pub intervals: usize,
    pub max_hours: f64,
    /// Minutes needed to cross one coordinate unit at free-flow speed.
    pub minutes_per_unit: f64,
}

impl GeneratorConfig {
    pub fn new(size: usize, preset: FleetPreset) -> Self {
        Self {
            size,
            preset,
            intervals: 10,
            max_hours: 720.0,
            minutes_per_unit: 60.0,
        }
    }

    /// Eight customers, two vehicles of capacity 15, three intervals.
    pub fn desk() -> Self {
        Self {
            intervals: 3,
            ..Self::new(8, FleetPreset::DESK)
        }
    }

    pub fn with_intervals(mut self, intervals: usize) -> Self {
        self.intervals = intervals;
        self
    }
}

/// Grid resolution of the congestion clusters (cells per axis).
const CLUSTER_GRID: usize = 3;
/// Congestion amplitude pairs `(morning, evening)` a cluster can draw.
const RUSH_PROFILES: [(f64, f64); 3] = [(1.0, 1.0), (1.0, 0.4), (0.4, 1.0)];
const RUSH_PEAK: f64 = 0.8;
const MORNING_CENTER: f64 = 0.15;
const EVENING_CENTER: f64 = 0.8;
const RUSH_WIDTH: f64 = 0.1;
const JITTER: f64 = 0.1;

fn rush_template(day_fraction: f64, morning: f64, evening: f64) -> f64 {
    let bump = |c: f64| (-0.5 * ((day_fraction - c) / RUSH_WIDTH).powi(2)).exp();
    1.0 + RUSH_PEAK * (morning * bump(MORNING_CENTER) + evening * bump(EVENING_CENTER))
}

fn cell_of(node: &Node) -> usize {
    let cx = ((node.x * CLUSTER_GRID as f64) as usize).min(CLUSTER_GRID - 1);
    let cy = ((node.y * CLUSTER_GRID as f64) as usize).min(CLUSTER_GRID - 1);
    cy * CLUSTER_GRID + cx
}

/// Generate an instance with the default schedule (10 intervals over 720 minutes).
pub fn generate_instance(size: usize, preset: FleetPreset, seed: u64) -> Result<(Instance, FleetConfig)> {
    generate(&GeneratorConfig::new(size, preset), seed)
}

/// Uniform depot/customer placement in the unit square, demands in `1..=9`,
/// Euclidean free-flow times multiplied by a per-cluster two-peak congestion profile.
pub fn generate(config: &GeneratorConfig, seed: u64) -> Result<(Instance, FleetConfig)> {
    if config.size == 0 {
        return Err(Error::InvalidArgument("instance size must be at least 1".into()));
    }
    let (vehicles, capacity) = config.preset.fleet();
    if vehicles == 0 {
        return Err(Error::InvalidArgument("fleet needs at least one vehicle".into()));
    }
    let schedule = TimeIntervalSchedule::equal(config.intervals, config.max_hours)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut nodes = Vec::with_capacity(config.size + 1);
    nodes.push(Node {
        x: rng.gen(),
        y: rng.gen(),
        demand: 0,
    });
    for _ in 0..config.size {
        nodes.push(Node {
            x: rng.gen(),
            y: rng.gen(),
            demand: rng.gen_range(1..=9),
        });
    }

    let cells = CLUSTER_GRID * CLUSTER_GRID;
    let intervals = config.intervals;
    let mut profile = vec![0.0; cells * cells * intervals];
    for cluster in 0..cells * cells {
        let (morning, evening) = RUSH_PROFILES[rng.gen_range(0..RUSH_PROFILES.len())];
        for p in 0..intervals {
            let mid = (p as f64 + 0.5) / intervals as f64;
            let jitter = rng.gen_range(1.0 - JITTER..=1.0 + JITTER);
            profile[cluster * intervals + p] = rush_template(mid, morning, evening) * jitter;
        }
    }

    let cost = CostTensor::from_fn(nodes.len(), intervals, |i, j, p| {
        if i == j {
            return 0.0;
        }
        let (a, b) = (&nodes[i], &nodes[j]);
        let free_flow = (a.x - b.x).hypot(a.y - b.y) * config.minutes_per_unit;
        let cluster = cell_of(a) * cells + cell_of(b);
        free_flow * profile[cluster * intervals + p - 1]
    });

    let meta = InstanceMeta {
        seed: Some(seed),
        preset: config.preset.name(),
    };
    let instance = Instance::new(nodes, cost, schedule, meta)?;
    let fleet = FleetConfig {
        vehicles,
        capacity,
        max_hours: config.max_hours,
    };
    Ok((instance, fleet))
}

/// All invariant violations of `instance` under `fleet`; empty means valid.
pub fn validate_instance(instance: &Instance, fleet: &FleetConfig) -> Vec<String> {
    let mut out = schedule_violations(instance.schedule.boundaries());
    if !out.is_empty() {
        return out;
    }
    let schedule = &instance.schedule;
    let intervals = schedule.interval_count();
    if fleet.vehicles == 0 {
        out.push("fleet needs at least one vehicle".into());
    }
    if fleet.max_hours != schedule.t_max() {
        out.push(format!(
            "T_max {} differs from schedule end {}",
            fleet.max_hours,
            schedule.t_max()
        ));
    }
    let depot = instance.node(0);
    if depot.demand != 0 {
        out.push(format!("depot demand must be 0, found {}", depot.demand));
    }
    for (i, node) in instance.nodes.iter().enumerate() {
        if !(node.x.is_finite() && node.y.is_finite()) {
            out.push(format!("node {i}: non-finite coordinates"));
        }
    }
    let nodes = instance.node_count();
    let mut bad_costs = false;
    for i in 0..nodes {
        for j in 0..nodes {
            for p in 1..=intervals {
                let c = instance.cost(i, j, p);
                if !c.is_finite() || c < 0.0 {
                    out.push(format!("cost[{i}][{j}][{p}] = {c} is negative or non-finite"));
                    bad_costs = true;
                } else if i == j && c != 0.0 {
                    out.push(format!("cost[{i}][{i}][{p}] = {c} must be 0"));
                }
            }
        }
    }
    let t_max = schedule.t_max();
    for i in 1..nodes {
        let demand = instance.demand(i);
        if demand == 0 {
            out.push(format!("customer {i}: demand must be at least 1"));
        }
        if demand > fleet.capacity {
            out.push(format!(
                "customer {i}: demand exceeds capacity ({demand} > {})",
                fleet.capacity
            ));
        }
        if bad_costs {
            continue;
        }
        let reachable = (1..=intervals).any(|p| {
            let depart = schedule.boundaries()[p - 1];
            let arrive = depart + instance.cost(0, i, p);
            if arrive > t_max {
                return false;
            }
            let back = schedule
                .interval_of(arrive)
                .map(|q| arrive + instance.cost(i, 0, q))
                .unwrap_or(f64::INFINITY);
            back <= t_max + TIME_EPS
        });
        if !reachable {
            out.push(format!("customer {i}: unreachable customer within T_max"));
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct MetaSection {
    n: usize,
    seed: Option<u64>,
    preset: String,
}

#[derive(Serialize, Deserialize)]
struct ScheduleSection {
    boundaries: Vec<f64>,
}

#[derive(Deserialize)]
struct InstanceDocument {
    meta: MetaSection,
    schedule: ScheduleSection,
    fleet: FleetConfig,
    nodes: Vec<Node>,
    cost: Vec<Vec<Vec<f64>>>,
}

const SECTIONS: [&str; 5] = ["meta", "schedule", "fleet", "nodes", "cost"];

/// Render the instance document. Numbers use shortest round-trip formatting.
pub fn write_instance(instance: &Instance, fleet: &FleetConfig) -> String {
    let meta = MetaSection {
        n: instance.n(),
        seed: instance.meta.seed,
        preset: instance.meta.preset.clone(),
    };
    let schedule = ScheduleSection {
        boundaries: instance.schedule.boundaries.clone(),
    };
    let mut out = String::new();
    out.push_str("{\n");
    out.push_str(&format!("  \"meta\": {},\n", json(&meta)));
    out.push_str(&format!("  \"schedule\": {},\n", json(&schedule)));
    out.push_str(&format!("  \"fleet\": {},\n", json(fleet)));
    out.push_str("  \"nodes\": [\n");
    for (i, node) in instance.nodes.iter().enumerate() {
        let sep = if i + 1 == instance.nodes.len() { "" } else { "," };
        out.push_str(&format!("    {}{sep}\n", json(node)));
    }
    out.push_str("  ],\n");
    out.push_str("  \"cost\": [\n");
    let nodes = instance.node_count();
    let intervals = instance.interval_count();
    for i in 0..nodes {
        let row: Vec<Vec<f64>> = (0..nodes)
            .map(|j| (1..=intervals).map(|p| instance.cost(i, j, p)).collect())
            .collect();
        let sep = if i + 1 == nodes { "" } else { "," };
        out.push_str(&format!("    {}{sep}\n", json(&row)));
    }
    out.push_str("  ]\n}\n");
    out
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

fn parse_error(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        location: location.into(),
        message: message.into(),
    }
}

/// Parse an instance document produced by [`write_instance`].
pub fn parse_instance(text: &str) -> Result<(Instance, FleetConfig)> {
    let doc: InstanceDocument = match serde_json::from_str(text) {
        Ok(doc) => doc,
        Err(e) => {
            let location = format!("line {}, column {}", e.line(), e.column());
            if e.is_eof() {
                let missing = SECTIONS
                    .iter()
                    .find(|s| !text.contains(&format!("\"{s}\"")))
                    .map(|s| format!("document truncated: missing section `{s}`"))
                    .unwrap_or_else(|| "document truncated inside section `cost`".into());
                return Err(parse_error(location, missing));
            }
            return Err(parse_error(location, e.to_string()));
        }
    };

    let n = doc.meta.n;
    if doc.nodes.len() != n + 1 {
        return Err(parse_error(
            "nodes",
            format!("expected {} nodes (depot + n), found {}", n + 1, doc.nodes.len()),
        ));
    }
    let schedule = TimeIntervalSchedule::new(doc.schedule.boundaries)
        .map_err(|e| parse_error("schedule.boundaries", e.to_string()))?;
    let intervals = schedule.interval_count();
    if doc.cost.len() != n + 1 {
        return Err(parse_error(
            "cost",
            format!("expected {} rows, found {}", n + 1, doc.cost.len()),
        ));
    }
    let mut cost = CostTensor::zeros(n + 1, intervals);
    for (i, row) in doc.cost.iter().enumerate() {
        if row.len() != n + 1 {
            return Err(parse_error(
                format!("cost[{i}]"),
                format!("expected {} columns, found {}", n + 1, row.len()),
            ));
        }
        for (j, cell) in row.iter().enumerate() {
            if cell.len() != intervals {
                return Err(parse_error(
                    format!("cost[{i}][{j}]"),
                    format!("expected {intervals} intervals, found {}", cell.len()),
                ));
            }
            for (k, &c) in cell.iter().enumerate() {
                if c < 0.0 {
                    return Err(parse_error(format!("cost[{i}][{j}][{k}]"), format!("negative cost {c}")));
                }
                cost.set(i, j, k + 1, c);
            }
        }
    }
    let meta = InstanceMeta {
        seed: doc.meta.seed,
        preset: doc.meta.preset,
    };
    let instance = Instance::new(doc.nodes, cost, schedule, meta)?;
    Ok((instance, doc.fleet))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_interval_instance() -> (Instance, FleetConfig) {
        let schedule = TimeIntervalSchedule::new(vec![0.0, 60.0, 120.0]).unwrap();
        let nodes = vec![
            Node { x: 0.0, y: 0.0, demand: 0 },
            Node { x: 1.0, y: 0.0, demand: 4 },
        ];
        let mut cost = CostTensor::zeros(2, 2);
        cost.set(0, 1, 1, 10.0);
        cost.set(0, 1, 2, 20.0);
        cost.set(1, 0, 1, 12.0);
        cost.set(1, 0, 2, 14.0);
        let meta = InstanceMeta { seed: None, preset: "custom".into() };
        let inst = Instance::new(nodes, cost, schedule, meta).unwrap();
        let fleet = FleetConfig { vehicles: 1, capacity: 10, max_hours: 120.0 };
        (inst, fleet)
    }

    #[test]
    fn preset_fleets_match_problem_sets() {
        let (_, fleet) = generate_instance(20, FleetPreset::Mttdvrp20, 1).unwrap();
        assert_eq!((fleet.capacity, fleet.vehicles), (30, 3));
        let (_, fleet) = generate_instance(100, FleetPreset::Mttdvrp100, 1).unwrap();
        assert_eq!((fleet.capacity, fleet.vehicles), (50, 5));
        assert_eq!(FleetPreset::Mttdvrp10.fleet(), (2, 20));
        assert_eq!(FleetPreset::Mttdvrp50.fleet(), (3, 40));
    }

    #[test]
    fn single_customer_instance() {
        for seed in 0..20 {
            let (inst, fleet) = generate_instance(1, FleetPreset::Mttdvrp10, seed).unwrap();
            assert_eq!(inst.n(), 1);
            assert!((1..=9).contains(&inst.demand(1)));
            assert!(validate_instance(&inst, &fleet).is_empty());
        }
    }

    #[test]
    fn generator_rejects_bad_arguments() {
        assert!(generate_instance(0, FleetPreset::Mttdvrp10, 0).is_err());
        assert!("7".parse::<FleetPreset>().is_err());
        assert!("custom:z=1".parse::<FleetPreset>().is_err());
        assert_eq!(
            "custom:f=4,Q=25".parse::<FleetPreset>().unwrap(),
            FleetPreset::Custom { vehicles: 4, capacity: 25 }
        );
    }

    #[test]
    fn generated_costs_vary_over_time() {
        let (inst, _) = generate_instance(10, FleetPreset::Mttdvrp10, 3).unwrap();
        let varies = (1..=10).any(|j| inst.cost(0, j, 1) != inst.cost(0, j, 5));
        assert!(varies);
        let asymmetric = (1..=10).any(|j| inst.cost(0, j, 1) != inst.cost(j, 0, 1));
        assert!(asymmetric);
    }

    #[test]
    fn travel_cost_lookup_and_bounds() {
        let (inst, _) = two_interval_instance();
        assert_eq!(inst.travel_cost(0, 1, 1).unwrap(), 10.0);
        assert_eq!(inst.travel_cost(0, 1, 2).unwrap(), 20.0);
        assert_eq!(inst.travel_cost(1, 1, 2).unwrap(), 0.0);
        assert!(inst.travel_cost(0, 1, 3).is_err());
        assert!(inst.travel_cost(0, 1, 0).is_err());
        assert!(inst.travel_cost(0, 2, 1).is_err());
    }

    #[test]
    fn interval_of_edges() {
        let s = TimeIntervalSchedule::new(vec![0.0, 60.0, 120.0]).unwrap();
        assert_eq!(s.interval_of(0.0).unwrap(), 1);
        assert_eq!(s.interval_of(59.999).unwrap(), 1);
        assert_eq!(s.interval_of(60.0).unwrap(), 2);
        assert_eq!(s.interval_of(120.0).unwrap(), 2);
        assert!(s.interval_of(-1.0).is_err());
        assert!(s.interval_of(120.5).is_err());
    }

    #[test]
    fn schedule_rejects_bad_boundaries() {
        assert!(TimeIntervalSchedule::new(vec![0.0]).is_err());
        assert!(TimeIntervalSchedule::new(vec![1.0, 2.0]).is_err());
        assert!(TimeIntervalSchedule::new(vec![0.0, 5.0, 5.0]).is_err());
        assert!(TimeIntervalSchedule::equal(0, 10.0).is_err());
    }

    #[test]
    fn validation_flags_capacity_and_reachability() {
        let (inst, fleet) = two_interval_instance();
        assert!(validate_instance(&inst, &fleet).is_empty());

        let small = FleetConfig { capacity: 3, ..fleet };
        let v = validate_instance(&inst, &small);
        assert!(v.iter().any(|m| m.contains("demand exceeds capacity")), "{v:?}");

        let mut far = inst.clone();
        for p in 1..=2 {
            far.cost.set(0, 1, p, 70.0);
            far.cost.set(1, 0, p, 70.0);
        }
        let v = validate_instance(&far, &fleet);
        assert!(v.iter().any(|m| m.contains("unreachable customer")), "{v:?}");

        let mut neg = inst.clone();
        neg.cost.set(1, 0, 1, -1.0);
        assert!(!validate_instance(&neg, &fleet).is_empty());

        let wrong_tmax = FleetConfig { max_hours: 100.0, ..fleet };
        assert!(!validate_instance(&inst, &wrong_tmax).is_empty());
    }

    #[test]
    fn document_round_trip() {
        let (inst, fleet) = generate_instance(7, FleetPreset::Mttdvrp10, 11).unwrap();
        let text = write_instance(&inst, &fleet);
        let (back, back_fleet) = parse_instance(&text).unwrap();
        assert_eq!(back, inst);
        assert_eq!(back_fleet, fleet);
    }

    #[test]
    fn truncated_document_names_missing_section() {
        let (inst, fleet) = generate_instance(3, FleetPreset::Mttdvrp10, 2).unwrap();
        let text = write_instance(&inst, &fleet);
        let cut = text.find("\"nodes\"").unwrap();
        let err = parse_instance(&text[..cut]).unwrap_err().to_string();
        assert!(err.contains("missing section `nodes`"), "{err}");
    }

    #[test]
    fn negative_cost_is_rejected_with_location() {
        let (inst, fleet) = two_interval_instance();
        let text = write_instance(&inst, &fleet).replace("[10.0,20.0]", "[-10.0,20.0]");
        let err = parse_instance(&text).unwrap_err().to_string();
        assert!(err.contains("negative cost"), "{err}");
        assert!(err.contains("cost[0][1][0]"), "{err}");
    }

    #[test]
    fn flattened_costs_are_interval_means() {
        let (inst, _) = two_interval_instance();
        let flat = inst.time_flattened();
        assert_eq!(flat.interval_count(), 1);
        assert_eq!(flat.cost(0, 1, 1), 15.0);
        assert_eq!(flat.cost(1, 0, 1), 13.0);
    }

    #[test]
    fn permuted_instance_relabels_costs() {
        let (inst, _) = generate_instance(4, FleetPreset::Mttdvrp10, 5).unwrap();
        let perm = [3, 1, 4, 2];
        let p = inst.permuted(&perm).unwrap();
        assert_eq!(p.node(1), inst.node(3));
        assert_eq!(p.cost(1, 2, 4), inst.cost(3, 1, 4));
        assert_eq!(p.cost(0, 3, 2), inst.cost(0, 4, 2));
        assert!(inst.permuted(&[1, 1, 2, 3]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn round_trip_is_identity(seed in any::<u64>(), size in 1usize..12, intervals in 1usize..6) {
                let cfg = GeneratorConfig::new(size, FleetPreset::Mttdvrp10).with_intervals(intervals);
                let (inst, fleet) = generate(&cfg, seed).unwrap();
                let (back, back_fleet) = parse_instance(&write_instance(&inst, &fleet)).unwrap();
                prop_assert_eq!(back, inst);
                prop_assert_eq!(back_fleet, fleet);
            }

            #[test]
            fn generation_is_deterministic_and_valid(seed in any::<u64>(), size in 1usize..25) {
                let (a, fa) = generate_instance(size, FleetPreset::Mttdvrp20, seed).unwrap();
                let (b, _) = generate_instance(size, FleetPreset::Mttdvrp20, seed).unwrap();
                prop_assert!(a.costs().as_slice().iter().zip(b.costs().as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
                prop_assert_eq!(&a, &b);
                prop_assert!(validate_instance(&a, &fa).is_empty());
            }

            #[test]
            fn interval_of_inverts_schedule(intervals in 1usize..12, t_max in 10.0f64..2000.0, frac in 0.0f64..1.0) {
                let s = TimeIntervalSchedule::equal(intervals, t_max).unwrap();
                for p in 1..=intervals {
                    let (lo, hi) = s.bounds(p);
                    let t = lo + frac * (hi - lo);
                    if t < hi {
                        prop_assert_eq!(s.interval_of(t).unwrap(), p);
                    }
                }
            }
        }
    }
}
