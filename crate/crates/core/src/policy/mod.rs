//! Attention policy: a per-interval graph encoder, a vehicle selection decoder
//! and a trip construction decoder.

mod decoder;
mod encoder;
mod params;

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::masked_softmax;
use crate::env::{self, Solution, State};
use crate::error::{Error, Result};
use crate::instance::{FleetConfig, Instance};
use crate::report::{stream_rng, SolverReport};

pub use decoder::{top_nodes, TraceStep};
pub use encoder::{encode, BnMode, Embeddings};
pub use params::{
    init_params, load_params, params_from_json, save_params, NamedTensor, PolicyDims, PolicyParams, RunningStats,
    BN_MOMENTUM, CHECKPOINT_VERSION,
};

pub(crate) use decoder::{Episode, Picker, Session};

/// Default number of samples for best-of-k decoding.
pub const DEFAULT_SAMPLES: usize = 1280;

/// Decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Sample { seed: u64 },
}

/// Frozen-statistics view of the policy on one instance, for inspecting distributions.
pub struct Policy<'a> {
    session: Session<'a>,
    instance: &'a Instance,
    fleet: &'a FleetConfig,
}

impl<'a> Policy<'a> {
    pub fn new(params: &'a PolicyParams, instance: &'a Instance, fleet: &'a FleetConfig) -> Result<Self> {
        let session = Session::new(params, &[(instance, fleet)], false, BnMode::Eval)?;
        Ok(Self {
            session,
            instance,
            fleet,
        })
    }

    /// Distribution over vehicles; vehicles without a feasible move get 0.
    pub fn vehicle_probabilities(&mut self, state: &State) -> Result<Vec<f64>> {
        if env::is_terminal(state) {
            return Err(Error::InvalidArgument("terminal state has no decision".into()));
        }
        let mask: Vec<bool> = env::feasible_vehicles(state, self.instance, self.fleet)
            .iter()
            .map(|f| !f)
            .collect();
        if mask.iter().all(|&m| m) {
            return Err(Error::InfeasibleEpisode {
                remaining: state.remaining(),
                step: state.step_index(),
            });
        }
        self.session.rewind();
        let logits = self.session.vehicle_logits(0, state, self.instance, self.fleet);
        Ok(masked_softmax(&self.session.graph.value(logits).data, &mask))
    }

    /// Raw clipped node scores before masking.
    pub fn node_logits(&mut self, state: &State, vehicle: usize) -> Result<Vec<f64>> {
        if vehicle >= state.vehicles().len() {
            return Err(Error::OutOfRange(format!("vehicle {vehicle}")));
        }
        self.session.rewind();
        let logits = self.session.node_logits(0, state, vehicle, self.instance, self.fleet);
        Ok(self.session.graph.value(logits).data.clone())
    }

    /// Distribution over nodes `0..=n` for `vehicle`; masked nodes get exactly 0.
    pub fn node_probabilities(&mut self, state: &State, vehicle: usize) -> Result<Vec<f64>> {
        let logits = self.node_logits(state, vehicle)?;
        let mask = env::action_mask(state, vehicle, self.instance, self.fleet);
        if mask.iter().all(|&m| m) {
            return Err(Error::InvalidArgument(format!("vehicle {vehicle} has no unmasked node")));
        }
        Ok(masked_softmax(&logits, &mask))
    }

    /// One episode; the solution carries its log-probability.
    pub fn rollout(&mut self, mode: DecodeMode) -> Result<Solution> {
        self.run(mode, None)
    }

    /// One episode with a per-step record.
    pub fn trace(&mut self, mode: DecodeMode) -> Result<(Solution, Vec<TraceStep>)> {
        let mut steps = Vec::new();
        let solution = self.run(mode, Some(&mut steps))?;
        Ok((solution, steps))
    }

    fn run(&mut self, mode: DecodeMode, trace: Option<&mut Vec<TraceStep>>) -> Result<Solution> {
        self.session.rewind();
        let out = match mode {
            DecodeMode::Greedy => {
                self.session
                    .rollout(0, self.instance, self.fleet, &mut Picker::<ChaCha8Rng>::Greedy, trace, None)?
            }
            DecodeMode::Sample { seed } => {
                let mut rng = stream_rng(seed, 0);
                self.session
                    .rollout(0, self.instance, self.fleet, &mut Picker::Sample(&mut rng), trace, None)?
            }
        };
        Ok(out.solution)
    }

    /// One sampled episode; `None` if it dead-ends.
    fn sample_stream(&mut self, seed: u64, stream: u64) -> Result<Option<Solution>> {
        self.session.rewind();
        let mut rng = stream_rng(seed, stream);
        let episode = self
            .session
            .episode(0, self.instance, self.fleet, &mut Picker::Sample(&mut rng), None, None)?;
        Ok(match episode {
            Episode::Done(out) => Some(out.solution),
            Episode::Stuck { .. } => None,
        })
    }
}

/// Single rollout with frozen statistics.
pub fn rollout(instance: &Instance, fleet: &FleetConfig, params: &PolicyParams, mode: DecodeMode) -> Result<Solution> {
    Policy::new(params, instance, fleet)?.rollout(mode)
}

/// Every one of `k` sampled rollouts in stream order; `None` marks a dead end.
pub fn sample_costs(
    instance: &Instance,
    fleet: &FleetConfig,
    params: &PolicyParams,
    k: usize,
    seed: u64,
) -> Result<Vec<Option<Solution>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let threads = rayon::current_num_threads().max(1);
    let chunk = k.div_ceil(threads);
    let chunks: Vec<Vec<Option<Solution>>> = (0..k)
        .step_by(chunk)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let mut policy = Policy::new(params, instance, fleet)?;
            (start..(start + chunk).min(k))
                .map(|i| policy.sample_stream(seed, i as u64))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Best of `k` independent sampled rollouts; ties keep the earliest sample.
pub fn sample_best(
    instance: &Instance,
    fleet: &FleetConfig,
    params: &PolicyParams,
    k: usize,
    seed: u64,
) -> Result<SolverReport> {
    let start = Instant::now();
    let samples = sample_costs(instance, fleet, params, k, seed)?;
    let stuck = samples.iter().filter(|s| s.is_none()).count();
    let best = samples
        .into_iter()
        .flatten()
        .reduce(|a, b| if b.total_minutes < a.total_minutes { b } else { a })
        .ok_or_else(|| Error::Infeasible(format!("all {k} samples reached a dead end")))?;
    let wall = start.elapsed().as_secs_f64();
    #[derive(Serialize)]
    struct Params {
        k: usize,
        dims: PolicyDims,
    }
    Ok(SolverReport::new(
        "policy-sample",
        &Params { k, dims: params.dims },
        instance,
        fleet,
        best,
        wall,
        Some(seed),
    )
    .with_note("k", k)
    .with_note("dead_ends", stuck))
}
