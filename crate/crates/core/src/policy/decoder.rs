use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{masked_softmax, Graph, Tensor, Var};
use crate::env::{self, Action, Solution, State, DEPOT};
use crate::error::{Error, Result};
use crate::instance::{FleetConfig, Instance};

use super::encoder::{encode_batch, lin, BnMode, Encoded};
use super::params::{Lin, PolicyParams, VEHICLE_SCALARS};

/// Linear, linear, ReLU.
fn ff_out_relu(g: &mut Graph, vars: &[Var], x: Var, (a, b): (Lin, Lin)) -> Var {
    let h = lin(g, vars, x, a);
    let h = lin(g, vars, h, b);
    g.relu(h)
}

/// Scalar scorer with the nonlinearity on the hidden layer, so scores can go negative.
fn scorer(g: &mut Graph, vars: &[Var], x: Var, (a, b): (Lin, Lin)) -> Var {
    let h = lin(g, vars, x, a);
    let h = g.relu(h);
    lin(g, vars, h, b)
}

struct IntervalKeys {
    glimpse_k: Vec<Var>,
    glimpse_v: Vec<Var>,
    final_k: Var,
}

/// Encoded batch plus decoder-side precomputation, all in one graph.
pub(crate) struct Session<'a> {
    pub graph: Graph,
    pub params: &'a PolicyParams,
    pub vars: Vec<Var>,
    pub enc: Encoded,
    keys: Vec<IntervalKeys>,
    depot: Var,
    mark: usize,
}

/// How the next vehicle and node are chosen.
pub(crate) enum Picker<'r, R: Rng> {
    Greedy,
    Sample(&'r mut R),
}

/// Index of the largest probability; ties go to the lowest index.
pub(crate) fn argmax(probs: &[f64], mask: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (i, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if !m && best.map_or(true, |b| p > probs[b]) {
            best = Some(i);
        }
    }
    best.expect("at least one unmasked entry")
}

impl<R: Rng> Picker<'_, R> {
    fn pick(&mut self, probs: &[f64], mask: &[bool]) -> usize {
        match self {
            Picker::Greedy => argmax(probs, mask),
            Picker::Sample(rng) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut last = None;
                for (i, (&p, &m)) in probs.iter().zip(mask).enumerate() {
                    if m || p <= 0.0 {
                        continue;
                    }
                    acc += p;
                    last = Some(i);
                    if u < acc {
                        return i;
                    }
                }
                last.unwrap_or_else(|| argmax(probs, mask))
            }
        }
    }
}

/// One decoding step as recorded for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub vehicle_probabilities: Vec<f64>,
    pub node_probabilities: Vec<f64>,
    /// `(node, probability)` of the five most likely nodes, unmasked first.
    pub top_nodes: Vec<(usize, f64)>,
    pub action: Action,
    pub depart_minute: f64,
    pub interval: usize,
}

pub(crate) struct RolloutOutput {
    pub solution: Solution,
    pub log_probability: Var,
}

/// How an episode ended.
pub(crate) enum Episode {
    Done(RolloutOutput),
    /// Customers remain but no vehicle can act.
    Stuck { state: State, log_probability: Var },
}

impl<'a> Session<'a> {
    pub fn new(
        params: &'a PolicyParams,
        batch: &[(&Instance, &FleetConfig)],
        track: bool,
        mode: BnMode,
    ) -> Result<Self> {
        let mut graph = Graph::new();
        let vars = params.bind(&mut graph, track);
        let enc = encode_batch(&mut graph, &vars, params, batch, mode)?;
        let layout = params.layout();
        let dims = &params.dims;
        let (dk, heads) = (dims.key_dim(), dims.heads);
        let kc = graph.matmul(enc.all, vars[layout.glimpse_k]);
        let vc = graph.matmul(enc.all, vars[layout.glimpse_v]);
        let fk = graph.matmul(enc.all, vars[layout.final_k]);
        let mut keys = Vec::with_capacity(enc.groups * enc.intervals);
        for g in 0..enc.groups {
            for p in 1..=enc.intervals {
                let rows: Vec<usize> = (0..enc.nodes).map(|i| enc.row(g, p, i)).collect();
                let k = graph.gather(kc, &rows);
                let v = graph.gather(vc, &rows);
                let final_k = graph.gather(fk, &rows);
                let glimpse_k = (0..heads).map(|m| graph.slice_cols(k, m * dk, dk)).collect();
                let glimpse_v = (0..heads).map(|m| graph.slice_cols(v, m * dk, dk)).collect();
                keys.push(IntervalKeys {
                    glimpse_k,
                    glimpse_v,
                    final_k,
                });
            }
        }
        let depot_rows: Vec<usize> = (0..enc.groups).map(|g| g * enc.nodes + DEPOT).collect();
        let depot_h = graph.gather(enc.indep, &depot_rows);
        let depot = lin(&mut graph, &vars, depot_h, layout.depot);
        let mark = graph.len();
        Ok(Self {
            graph,
            params,
            vars,
            enc,
            keys,
            depot,
            mark,
        })
    }

    /// Forget everything recorded after construction.
    pub fn rewind(&mut self) {
        self.graph.truncate(self.mark);
    }

    /// Encoder interval used for an environment interval.
    fn enc_interval(&self, p: usize) -> usize {
        if self.enc.intervals == 1 {
            1
        } else {
            p
        }
    }

    fn pool(&mut self, source: Var, rows: &[usize]) -> Var {
        let x = self.graph.gather(source, rows);
        let mx = self.graph.max_rows(x);
        let mean = self.graph.mean_rows(x);
        self.graph.concat_cols(&[mx, mean])
    }

    /// Vehicle state rows `[rc/Q, tau/Tmax, p/|TI|, rt/width, h_loc]`.
    fn status(&mut self, g: usize, state: &State, vehicles: &[usize], inst: &Instance, fleet: &FleetConfig) -> Var {
        let schedule = inst.schedule();
        let mut scalars = Tensor::zeros(vehicles.len(), VEHICLE_SCALARS);
        let mut loc_rows = Vec::with_capacity(vehicles.len());
        for (r, &k) in vehicles.iter().enumerate() {
            let v = state.vehicle(k);
            scalars.data[r * VEHICLE_SCALARS..(r + 1) * VEHICLE_SCALARS].copy_from_slice(&[
                f64::from(v.remaining_capacity) / f64::from(fleet.capacity),
                v.remaining_hours / fleet.max_hours,
                v.interval as f64 / inst.interval_count() as f64,
                v.interval_residue / schedule.width(v.interval),
            ]);
            loc_rows.push(self.enc.row(g, self.enc_interval(v.interval), v.location));
        }
        let scalars = self.graph.constant(scalars);
        let loc = self.graph.gather(self.enc.all, &loc_rows);
        self.graph.concat_cols(&[scalars, loc])
    }

    fn broadcast(&mut self, x: Var, rows: usize) -> Var {
        self.graph.gather(x, &vec![0; rows])
    }

    /// Vehicle logits, one row per vehicle.
    pub fn vehicle_logits(&mut self, g: usize, state: &State, inst: &Instance, fleet: &FleetConfig) -> Var {
        let layout = self.params.layout();
        let d = self.params.dims.embed_dim;
        let f = state.vehicles().len();
        let visited: Vec<usize> = state
            .visited()
            .map(|c| self.enc.row(g, self.enc_interval(state.served_interval(c).expect("served")), c))
            .collect();
        let pooled = if visited.is_empty() {
            self.graph.constant(Tensor::zeros(1, 2 * d))
        } else {
            self.pool(self.enc.all, &visited)
        };
        let e_visited = ff_out_relu(&mut self.graph, &self.vars, pooled, layout.visited_ff);

        let remaining: Vec<usize> = state.to_visit().collect();
        let mut by_interval: HashMap<usize, Var> = HashMap::new();
        let mut per_vehicle = Vec::with_capacity(f);
        for k in 0..f {
            let p = self.enc_interval(state.vehicle(k).interval);
            let pooled = match by_interval.get(&p) {
                Some(&v) => v,
                None => {
                    let rows: Vec<usize> = remaining.iter().map(|&c| self.enc.row(g, p, c)).collect();
                    let v = self.pool(self.enc.all, &rows);
                    by_interval.insert(p, v);
                    v
                }
            };
            per_vehicle.push(pooled);
        }
        let pooled = self.graph.concat_rows(&per_vehicle);
        let e_to_visit = ff_out_relu(&mut self.graph, &self.vars, pooled, layout.to_visit_ff);

        let rows: Vec<usize> = remaining.iter().map(|&c| g * self.enc.nodes + c).collect();
        let pooled = self.pool(self.enc.indep, &rows);
        let e_indep = ff_out_relu(&mut self.graph, &self.vars, pooled, layout.indep_ff);
        let e_depot = self.graph.gather(self.depot, &[g]);

        let all: Vec<usize> = (0..f).collect();
        let s = self.status(g, state, &all, inst, fleet);
        let e_status = ff_out_relu(&mut self.graph, &self.vars, s, layout.status_ff);
        let fleet_mean = self.graph.mean_rows(e_status);

        let parts = [
            self.broadcast(e_visited, f),
            e_to_visit,
            self.broadcast(e_indep, f),
            self.broadcast(e_depot, f),
            self.broadcast(fleet_mean, f),
            e_status,
        ];
        let x = self.graph.concat_cols(&parts);
        scorer(&mut self.graph, &self.vars, x, layout.vehicle_ff)
    }

    /// Clipped node logits for `vehicle`, one column per node.
    pub fn node_logits(&mut self, g: usize, state: &State, vehicle: usize, inst: &Instance, fleet: &FleetConfig) -> Var {
        let layout = self.params.layout();
        let dims = self.params.dims;
        let (heads, dk) = (dims.heads, dims.key_dim());
        let scale = 1.0 / (dk as f64).sqrt();
        let p = self.enc_interval(state.vehicle(vehicle).interval);
        let rows: Vec<usize> = state.to_visit().map(|c| self.enc.row(g, p, c)).collect();
        let pooled = self.pool(self.enc.all, &rows);
        let e_pool = lin(&mut self.graph, &self.vars, pooled, layout.ctx_pool);
        let s = self.status(g, state, &[vehicle], inst, fleet);
        let e_state = lin(&mut self.graph, &self.vars, s, layout.ctx_state);
        let graph_emb = self.graph.gather(self.enc.graph, &[g]);
        let ctx = self.graph.concat_cols(&[graph_emb, e_pool, e_state]);

        let q = self.graph.matmul(ctx, self.vars[layout.glimpse_q]);
        let key_index = g * self.enc.intervals + p - 1;
        let mut heads_out = Vec::with_capacity(heads);
        for m in 0..heads {
            let (k, v) = (self.keys[key_index].glimpse_k[m], self.keys[key_index].glimpse_v[m]);
            let qm = self.graph.slice_cols(q, m * dk, dk);
            let s = self.graph.matmul_nt(qm, k);
            let s = self.graph.scale(s, scale);
            let a = self.graph.softmax_rows(s);
            heads_out.push(self.graph.matmul(a, v));
        }
        let glimpse = self.graph.concat_cols(&heads_out);
        let glimpse = self.graph.matmul(glimpse, self.vars[layout.glimpse_o]);
        let fq = self.graph.matmul(glimpse, self.vars[layout.final_q]);
        let alpha = self.graph.matmul_nt(fq, self.keys[key_index].final_k);
        let alpha = self.graph.scale(alpha, scale);
        let squashed = self.graph.scale(alpha, scale);
        let t = self.graph.tanh(squashed);
        self.graph.scale(t, dims.clip)
    }

    /// Run one episode for group `g`.
    pub fn rollout<R: Rng>(
        &mut self,
        g: usize,
        inst: &Instance,
        fleet: &FleetConfig,
        picker: &mut Picker<'_, R>,
        trace: Option<&mut Vec<TraceStep>>,
        forced: Option<&[Action]>,
    ) -> Result<RolloutOutput> {
        match self.episode(g, inst, fleet, picker, trace, forced)? {
            Episode::Done(out) => Ok(out),
            Episode::Stuck { state, .. } => Err(Error::InfeasibleEpisode {
                remaining: state.remaining(),
                step: state.step_index(),
            }),
        }
    }

    /// Like `rollout`, but a dead end is returned instead of raised.
    pub fn episode<R: Rng>(
        &mut self,
        g: usize,
        inst: &Instance,
        fleet: &FleetConfig,
        picker: &mut Picker<'_, R>,
        mut trace: Option<&mut Vec<TraceStep>>,
        forced: Option<&[Action]>,
    ) -> Result<Episode> {
        let mut state = env::reset_unchecked(inst, fleet);
        let mut terms = Vec::new();
        let mut total = 0.0;
        let mut stuck = false;
        while !env::is_terminal(&state) {
            let vehicle_mask: Vec<bool> = env::feasible_vehicles(&state, inst, fleet).iter().map(|f| !f).collect();
            if vehicle_mask.iter().all(|&m| m) {
                stuck = true;
                break;
            }
            let vl = self.vehicle_logits(g, &state, inst, fleet);
            let vprobs = masked_softmax(&self.graph.value(vl).data, &vehicle_mask);
            let forced_action = forced.map(|a| a[state.step_index()]);
            let k = match forced_action {
                Some(a) => a.vehicle,
                None => picker.pick(&vprobs, &vehicle_mask),
            };
            if vehicle_mask[k] {
                return Err(Error::MaskedAction {
                    action: Action::new(k, DEPOT),
                });
            }
            let lv = self.graph.log_softmax_pick(vl, &vehicle_mask, k);

            let node_mask = env::action_mask(&state, k, inst, fleet);
            let nl = self.node_logits(g, &state, k, inst, fleet);
            let nprobs = masked_softmax(&self.graph.value(nl).data, &node_mask);
            let node = match forced_action {
                Some(a) => a.node,
                None => picker.pick(&nprobs, &node_mask),
            };
            let action = Action::new(k, node);
            if node_mask[node] {
                return Err(Error::MaskedAction { action });
            }
            let ln = self.graph.log_softmax_pick(nl, &node_mask, node);
            total += vprobs[k].ln() + nprobs[node].ln();
            terms.push((lv, 1.0));
            terms.push((ln, 1.0));
            if let Some(t) = trace.as_deref_mut() {
                let v = state.vehicle(k);
                t.push(TraceStep {
                    step: state.step_index(),
                    top_nodes: top_nodes(&nprobs, &node_mask, 5),
                    vehicle_probabilities: vprobs,
                    node_probabilities: nprobs,
                    action,
                    depart_minute: v.elapsed(fleet),
                    interval: v.interval,
                });
            }
            env::step_mut(&mut state, action, inst, fleet)?;
        }
        let log_probability = if terms.is_empty() {
            self.graph.constant(Tensor::row_vector(vec![0.0]))
        } else {
            self.graph.weighted_sum(&terms)
        };
        if stuck {
            return Ok(Episode::Stuck { state, log_probability });
        }
        let mut solution = env::finalize(&state, inst, fleet)?;
        solution.log_probability = Some(total);
        Ok(Episode::Done(RolloutOutput {
            solution,
            log_probability,
        }))
    }
}

/// The `count` most likely nodes; masked nodes only fill remaining places.
pub fn top_nodes(probs: &[f64], mask: &[bool], count: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        mask[a]
            .cmp(&mask[b])
            .then(probs[b].total_cmp(&probs[a]))
            .then(a.cmp(&b))
    });
    order.into_iter().take(count).map(|i| (i, probs[i])).collect()
}
