//! REINFORCE with a greedy rollout baseline.

use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autodiff::{Graph, Tensor};
use crate::env::{Action, Solution};
use crate::error::{Error, Result};
use crate::instance::{generate, FleetConfig, FleetPreset, GeneratorConfig, Instance};
use crate::env::{State, DEPOT};
use crate::policy::{BnMode, Episode, PolicyDims, PolicyParams, Picker, Session};
use crate::report::stream_rng;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dims: PolicyDims,
    pub customers: usize,
    pub preset: FleetPreset,
    pub intervals: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub instances_per_epoch: usize,
    pub initial_lr: f64,
    /// Multiplicative decay applied after every iteration.
    pub lr_decay: f64,
    /// Significance level of the baseline swap test.
    pub alpha: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Instances in the validation / baseline-test set.
    pub eval_instances: usize,
    /// Global gradient norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Stop before the total number of policy rollouts would exceed this.
    pub rollout_budget: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dims: PolicyDims::desk(),
            customers: 8,
            preset: FleetPreset::DESK,
            intervals: 3,
            batch_size: 32,
            max_epochs: 100,
            instances_per_epoch: 512,
            initial_lr: 1e-3,
            lr_decay: 0.999,
            alpha: 0.05,
            patience: 10,
            eval_instances: 64,
            grad_clip: 1.0,
            rollout_budget: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(self.initial_lr > 0.0) {
            return bad("initial_lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.customers == 0 || self.eval_instances == 0 || self.instances_per_epoch == 0 {
            return bad("customers, eval_instances and instances_per_epoch must be positive");
        }
        if !self.dims.flatten_time && self.dims.intervals != self.intervals {
            return bad("dims.intervals must equal intervals");
        }
        Ok(())
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig::new(self.customers, self.preset).with_intervals(self.intervals)
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.instances_per_epoch.div_ceil(self.batch_size)
    }

    /// Learning rate after `iteration` updates.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.initial_lr * self.lr_decay.powi(iteration as i32)
    }

    /// Deterministic validation set.
    pub fn eval_set(&self) -> Result<Vec<(Instance, FleetConfig)>> {
        instance_set(&self.generator(), self.seed, 0, self.eval_instances)
    }
}

/// `count` generated instances whose seeds come from stream `stream` of `seed`.
pub fn instance_set(cfg: &GeneratorConfig, seed: u64, stream: u64, count: usize) -> Result<Vec<(Instance, FleetConfig)>> {
    let mut rng = stream_rng(seed, stream);
    (0..count).map(|_| generate(cfg, rng.gen())).collect()
}

/// First-order adaptive moment estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &PolicyParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.tensor.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (t, g)) in params.tensors.iter_mut().zip(grads).enumerate() {
            for (i, (w, &gi)) in t.tensor.data.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Summary of one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean_sample_cost: f64,
    pub mean_baseline_cost: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

fn batch_refs(batch: &[(Instance, FleetConfig)]) -> Vec<(&Instance, &FleetConfig)> {
    batch.iter().map(|(i, f)| (i, f)).collect()
}

/// Cost charged for an episode that ends with customers left and no vehicle able to move:
/// the distance travelled, the way home for vehicles still out, and twice each unserved
/// customer's worst depot round trip.
pub fn dead_end_cost(state: &State, instance: &Instance) -> f64 {
    let home: f64 = state
        .vehicles()
        .iter()
        .filter(|v| v.location != DEPOT)
        .map(|v| instance.cost(v.location, DEPOT, v.interval))
        .sum();
    let unserved: f64 = state
        .to_visit()
        .map(|i| {
            (1..=instance.interval_count())
                .map(|p| instance.cost(DEPOT, i, p) + instance.cost(i, DEPOT, p))
                .fold(0.0, f64::max)
        })
        .sum();
    state.travelled() + home + 2.0 * unserved
}

fn episode_cost(episode: &Episode, instance: &Instance) -> (f64, crate::autodiff::Var) {
    match episode {
        Episode::Done(out) => (out.solution.total_minutes, out.log_probability),
        Episode::Stuck { state, log_probability } => (dead_end_cost(state, instance), *log_probability),
    }
}

/// Greedy costs under frozen statistics; dead ends are charged `dead_end_cost`.
pub fn greedy_costs(params: &PolicyParams, instances: &[(Instance, FleetConfig)]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(64) {
        let refs = batch_refs(chunk);
        let mut session = Session::new(params, &refs, false, BnMode::Eval)?;
        for (g, (inst, fleet)) in chunk.iter().enumerate() {
            session.rewind();
            let episode = session.episode(g, inst, fleet, &mut Picker::<ChaCha8Rng>::Greedy, None, None)?;
            out.push(episode_cost(&episode, inst).0);
        }
    }
    Ok(out)
}

pub fn greedy_solutions(params: &PolicyParams, instances: &[(Instance, FleetConfig)]) -> Result<Vec<Solution>> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(64) {
        let refs = batch_refs(chunk);
        let mut session = Session::new(params, &refs, false, BnMode::Eval)?;
        for (g, (inst, fleet)) in chunk.iter().enumerate() {
            session.rewind();
            let r = session.rollout(g, inst, fleet, &mut Picker::<ChaCha8Rng>::Greedy, None, None)?;
            out.push(r.solution);
        }
    }
    Ok(out)
}

/// Gradient of the REINFORCE loss `mean_g (c_s - c_b) * log p(sample_g)`.
///
/// Samples are drawn in train-mode normalization; the returned statistics feed the running averages.
/// A sample that dead-ends is charged `dead_end_cost` with the log-probability of the moves it made.
pub fn policy_gradient(
    params: &PolicyParams,
    batch: &[(Instance, FleetConfig)],
    baseline_costs: &[f64],
    seed: u64,
) -> Result<(Vec<Tensor>, StepStats, Vec<(usize, Vec<f64>, Vec<f64>)>)> {
    let refs = batch_refs(batch);
    let mut session = Session::new(params, &refs, true, BnMode::Train)?;
    let b = batch.len() as f64;
    let mut terms = Vec::with_capacity(batch.len());
    let mut sample_total = 0.0;
    let mut loss = 0.0;
    for (g, (inst, fleet)) in batch.iter().enumerate() {
        let mut rng = stream_rng(seed, g as u64);
        let episode = session.episode(g, inst, fleet, &mut Picker::Sample(&mut rng), None, None)?;
        let (cost, log_probability) = episode_cost(&episode, inst);
        let advantage = cost - baseline_costs[g];
        sample_total += cost;
        loss += advantage * session.graph.scalar(log_probability) / b;
        terms.push((log_probability, advantage / b));
    }
    let root = session.graph.weighted_sum(&terms);
    let grads = gradients(&session.graph, root, &session.vars, params);
    let norm = grads.iter().flat_map(|t| &t.data).map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("policy gradient; step rejected".into()));
    }
    let stats = StepStats {
        mean_sample_cost: sample_total / b,
        mean_baseline_cost: baseline_costs.iter().sum::<f64>() / b,
        loss,
        grad_norm: norm,
    };
    Ok((grads, stats, session.enc.stats))
}

fn gradients(graph: &Graph, root: crate::autodiff::Var, vars: &[crate::autodiff::Var], params: &PolicyParams) -> Vec<Tensor> {
    let g = graph.backward(root);
    vars.iter()
        .zip(&params.tensors)
        .map(|(&v, t)| {
            g.get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.tensor.rows, t.tensor.cols))
        })
        .collect()
}

/// One REINFORCE update with greedy baseline costs from `baseline`.
pub fn reinforce_step(
    batch: &[(Instance, FleetConfig)],
    params: &mut PolicyParams,
    baseline: &PolicyParams,
    adam: &mut Adam,
    lr: f64,
    grad_clip: f64,
    seed: u64,
) -> Result<StepStats> {
    let baseline_costs = greedy_costs(baseline, batch)?;
    let (mut grads, stats, bn) = policy_gradient(params, batch, &baseline_costs, seed)?;
    if grad_clip > 0.0 && stats.grad_norm > grad_clip {
        let s = grad_clip / stats.grad_norm;
        grads.iter_mut().for_each(|t| t.data.iter_mut().for_each(|x| *x *= s));
    }
    adam.step(params, &grads, lr);
    for (slot, mean, var) in bn {
        params.update_running(slot, &mean, &var);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(stats)
}

/// Outcome of the paired one-sided baseline test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineTest {
    pub candidate_mean: f64,
    pub baseline_mean: f64,
    pub p_value: f64,
    pub updated: bool,
}

/// Paired one-sided t-test that `candidate` costs are lower than `baseline` costs.
pub fn paired_test(candidate: &[f64], baseline: &[f64], alpha: f64) -> BaselineTest {
    let n = candidate.len();
    let diffs: Vec<f64> = candidate.iter().zip(baseline).map(|(c, b)| c - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let p_value = if n < 2 {
        if mean < 0.0 {
            0.0
        } else {
            1.0
        }
    } else {
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        if var == 0.0 {
            if mean < 0.0 {
                0.0
            } else {
                1.0
            }
        } else {
            let t = mean / (var / n as f64).sqrt();
            StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid t distribution").cdf(t)
        }
    };
    BaselineTest {
        candidate_mean: candidate.iter().sum::<f64>() / n as f64,
        baseline_mean: baseline.iter().sum::<f64>() / n as f64,
        p_value,
        updated: p_value < alpha,
    }
}

/// Replace the baseline with `params` when its greedy costs are significantly lower.
pub fn baseline_update(
    params: &PolicyParams,
    baseline: &PolicyParams,
    eval: &[(Instance, FleetConfig)],
    alpha: f64,
) -> Result<(PolicyParams, BaselineTest)> {
    if eval.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let test = paired_test(&greedy_costs(params, eval)?, &greedy_costs(baseline, eval)?, alpha);
    let next = if test.updated { params.clone() } else { baseline.clone() };
    Ok((next, test))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub iter: u64,
    pub lr: f64,
    pub mean_sample_cost: f64,
    pub mean_greedy_cost: f64,
    pub baseline_swapped: bool,
    pub wall_sec: f64,
}

impl TrainLogRow {
    pub const CSV_HEADER: &'static str = "epoch,iter,lr,mean_sample_cost,mean_greedy_cost,baseline_swapped,wall_sec";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch, self.iter, self.lr, self.mean_sample_cost, self.mean_greedy_cost, self.baseline_swapped, self.wall_sec
        )
    }
}

pub const TRAIN_CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub version: u32,
    pub config: TrainConfig,
    pub params: PolicyParams,
    pub baseline: PolicyParams,
    pub best: PolicyParams,
    pub adam: Adam,
    pub iteration: u64,
    pub epoch: usize,
    pub rollouts: u64,
    pub initial_validation: f64,
    pub best_validation: f64,
    pub stale_epochs: usize,
    /// Greedy costs of the baseline on the validation set.
    pub baseline_costs: Vec<f64>,
    pub log: Vec<TrainLogRow>,
    pub finished: bool,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s: TrainState = serde_json::from_slice(&std::fs::read(path)?)?;
        if s.version != TRAIN_CHECKPOINT_VERSION {
            return Err(Error::Parse {
                location: path.display().to_string(),
                message: format!("unsupported checkpoint version {}", s.version),
            });
        }
        s.params = s.params.revalidate()?;
        s.baseline = s.baseline.revalidate()?;
        s.best = s.best.revalidate()?;
        Ok(s)
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.iteration)
    }
}

/// Resumable training loop.
pub struct Trainer {
    pub state: TrainState,
    eval: Vec<(Instance, FleetConfig)>,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = crate::policy::init_params(config.dims, config.seed)?;
        let eval = config.eval_set()?;
        let state = TrainState {
            version: TRAIN_CHECKPOINT_VERSION,
            adam: Adam::new(&params),
            baseline: params.clone(),
            best: params.clone(),
            params,
            iteration: 0,
            epoch: 0,
            rollouts: 0,
            initial_validation: f64::NAN,
            best_validation: f64::INFINITY,
            stale_epochs: 0,
            baseline_costs: Vec::new(),
            log: Vec::new(),
            finished: config.max_epochs == 0,
            config,
        };
        Ok(Self {
            state,
            eval,
            started: Instant::now(),
        })
    }

    pub fn resume(state: TrainState) -> Result<Self> {
        state.config.validate()?;
        let eval = state.config.eval_set()?;
        Ok(Self {
            state,
            eval,
            started: Instant::now(),
        })
    }

    fn budget_allows(&self, extra: u64) -> bool {
        self.state.config.rollout_budget.map_or(true, |b| self.state.rollouts + extra <= b)
    }

    /// Train until done; `on_epoch` sees the state after each epoch (for checkpoints and logs).
    pub fn run(&mut self, mut on_epoch: impl FnMut(&TrainState) -> Result<()>) -> Result<()> {
        let cfg = self.state.config.clone();
        let e = self.eval.len() as u64;
        if self.state.baseline_costs.is_empty() && !self.state.finished {
            if !self.budget_allows(e) {
                self.state.finished = true;
                return Ok(());
            }
            self.state.baseline_costs = greedy_costs(&self.state.baseline, &self.eval)?;
            self.state.rollouts += e;
            let v = mean(&self.state.baseline_costs);
            self.state.initial_validation = v;
            self.state.best_validation = v;
        }
        let iters = cfg.iterations_per_epoch();
        let train_gen = cfg.generator();
        while !self.state.finished && self.state.epoch < cfg.max_epochs {
            let epoch = self.state.epoch;
            let mut sample_costs = Vec::new();
            let mut rng = stream_rng(cfg.seed, 1 + epoch as u64);
            for it in 0..iters {
                let b = cfg.batch_size.min(cfg.instances_per_epoch - it * cfg.batch_size) as u64;
                if !self.budget_allows(2 * b + e) {
                    self.state.finished = true;
                    break;
                }
                let batch: Vec<(Instance, FleetConfig)> =
                    (0..b).map(|_| generate(&train_gen, rng.gen())).collect::<Result<_>>()?;
                let lr = self.state.lr();
                let seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;
                let step_seed = stream_rng(seed, self.state.iteration).gen();
                let stats = reinforce_step(
                    &batch,
                    &mut self.state.params,
                    &self.state.baseline,
                    &mut self.state.adam,
                    lr,
                    cfg.grad_clip,
                    step_seed,
                )?;
                self.state.iteration += 1;
                self.state.rollouts += 2 * b;
                sample_costs.push(stats.mean_sample_cost);
            }
            if sample_costs.is_empty() {
                break;
            }
            let candidate = greedy_costs(&self.state.params, &self.eval)?;
            self.state.rollouts += e;
            let test = paired_test(&candidate, &self.state.baseline_costs, cfg.alpha);
            if test.updated {
                self.state.baseline = self.state.params.clone();
                self.state.baseline_costs = candidate.clone();
            }
            let validation = mean(&candidate);
            if validation > 10.0 * self.state.initial_validation {
                return Err(Error::Diverged(format!(
                    "validation cost {validation:.2} exceeds ten times the initial {:.2} at epoch {epoch}",
                    self.state.initial_validation
                )));
            }
            if validation < self.state.best_validation - 1e-9 {
                self.state.best_validation = validation;
                self.state.best = self.state.params.clone();
                self.state.stale_epochs = 0;
            } else {
                self.state.stale_epochs += 1;
            }
            self.state.log.push(TrainLogRow {
                epoch,
                iter: self.state.iteration,
                lr: self.state.lr(),
                mean_sample_cost: mean(&sample_costs),
                mean_greedy_cost: validation,
                baseline_swapped: test.updated,
                wall_sec: self.started.elapsed().as_secs_f64(),
            });
            self.state.epoch += 1;
            if self.state.stale_epochs >= cfg.patience.max(1) || self.state.epoch >= cfg.max_epochs {
                self.state.finished = true;
            }
            on_epoch(&self.state)?;
        }
        self.state.finished = true;
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Train from scratch; returns the best-validation parameters and the log.
pub fn train(config: TrainConfig) -> Result<(PolicyParams, Vec<TrainLogRow>)> {
    let mut trainer = Trainer::new(config)?;
    trainer.run(|_| Ok(()))?;
    let s = trainer.state;
    Ok((s.best, s.log))
}

/// Log-probability of a fixed action sequence and its analytic gradient (train-mode normalization).
pub fn log_prob_gradient(
    params: &PolicyParams,
    instance: &Instance,
    fleet: &FleetConfig,
    actions: &[Action],
) -> Result<(f64, Vec<Tensor>)> {
    let mut session = Session::new(params, &[(instance, fleet)], true, BnMode::Train)?;
    let r = session.rollout(0, instance, fleet, &mut Picker::<ChaCha8Rng>::Greedy, None, Some(actions))?;
    let value = session.graph.scalar(r.log_probability);
    let grads = gradients(&session.graph, r.log_probability, &session.vars, params);
    Ok((value, grads))
}

/// Log-probability plus the ReLU activation pattern it was computed under.
fn log_prob(
    params: &PolicyParams,
    instance: &Instance,
    fleet: &FleetConfig,
    actions: &[Action],
) -> Result<(f64, Vec<bool>)> {
    let mut session = Session::new(params, &[(instance, fleet)], false, BnMode::Train)?;
    let r = session.rollout(0, instance, fleet, &mut Picker::<ChaCha8Rng>::Greedy, None, Some(actions))?;
    Ok((session.graph.scalar(r.log_probability), session.graph.relu_pattern()))
}

/// Step reduction applied when a central difference straddles a ReLU kink.
const KINK_SHRINK: f64 = 0.1;

/// Magnitude below which derivatives are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compare `analytic` against central differences on up to `coords` random entries per tensor.
///
/// When a ReLU changes sign inside the stencil the step is shrunk tenfold, at most three times.
pub fn compare_gradients(
    params: &PolicyParams,
    instance: &Instance,
    fleet: &FleetConfig,
    actions: &[Action],
    analytic: &[Tensor],
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream_rng(seed, 0);
    let mut probe = params.clone();
    let (_, kinks) = log_prob(params, instance, fleet, actions)?;
    let mut worst: f64 = 0.0;
    for k in 0..params.tensors.len() {
        let len = params.tensors[k].tensor.len();
        for i in sample(&mut rng, len, coords.min(len)) {
            let orig = params.tensors[k].tensor.data[i];
            let mut step = epsilon;
            let numeric = loop {
                probe.tensors[k].tensor.data[i] = orig + step;
                let (up, up_kinks) = log_prob(&probe, instance, fleet, actions)?;
                probe.tensors[k].tensor.data[i] = orig - step;
                let (down, down_kinks) = log_prob(&probe, instance, fleet, actions)?;
                probe.tensors[k].tensor.data[i] = orig;
                // A ReLU switching sides inside the stencil makes the difference meaningless.
                if (up_kinks == kinks && down_kinks == kinks) || step < epsilon * KINK_SHRINK.powi(3) {
                    break (up - down) / (2.0 * step);
                }
                step *= KINK_SHRINK;
            };
            let a = analytic[k].data[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.tensors[k].name)));
            }
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Worst relative gradient error along the greedy action sequence of `instance`.
pub fn grad_check(
    params: &PolicyParams,
    instance: &Instance,
    fleet: &FleetConfig,
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> Result<f64> {
    let actions = crate::policy::rollout(instance, fleet, params, crate::policy::DecodeMode::Greedy)?.actions;
    let (_, analytic) = log_prob_gradient(params, instance, fleet, &actions)?;
    compare_gradients(params, instance, fleet, &actions, &analytic, epsilon, coords, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::GeneratorConfig;
    use crate::policy::init_params;

    fn grad_case() -> (PolicyParams, Instance, FleetConfig) {
        let cfg = GeneratorConfig::new(4, FleetPreset::Custom { vehicles: 2, capacity: 15 }).with_intervals(2);
        let (inst, fleet) = generate(&cfg, 21).unwrap();
        let params = init_params(PolicyDims::new(8, 2, 2, 2), 5).unwrap();
        (params, inst, fleet)
    }

    #[test]
    fn dead_ends_are_charged_instead_of_aborting() {
        let mut cfg = GeneratorConfig::desk();
        cfg.minutes_per_unit = 150.0;
        let params = init_params(PolicyDims::new(8, 2, 1, 3), 3).unwrap();
        let mut found = None;
        'search: for inst_seed in 0..50 {
            let (inst, fleet) = generate(&cfg, inst_seed).unwrap();
            for seed in 0..20 {
                let mut session = Session::new(&params, &[(&inst, &fleet)], false, BnMode::Train).unwrap();
                let mut rng = stream_rng(seed, 0);
                let episode = session.episode(0, &inst, &fleet, &mut Picker::Sample(&mut rng), None, None).unwrap();
                if let Episode::Stuck { state, .. } = episode {
                    found = Some((inst, fleet, seed, state));
                    break 'search;
                }
            }
        }
        let (inst, fleet, seed, state) = found.expect("a dead end among the tight instances");
        let charged = dead_end_cost(&state, &inst);
        assert!(state.remaining() > 0);
        assert!(charged > state.travelled());
        let batch = vec![(inst, fleet)];
        let (grads, stats, _) = policy_gradient(&params, &batch, &[0.0], seed).unwrap();
        assert_eq!(stats.mean_sample_cost, charged);
        assert!(stats.grad_norm > 0.0 && grads.iter().all(Tensor::is_finite));
        assert!(greedy_costs(&params, &batch).unwrap()[0].is_finite());
    }

    #[test]
    fn gradients_match_central_differences() {
        let (params, inst, fleet) = grad_case();
        let err = grad_check(&params, &inst, &fleet, 1e-5, 20, 1).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let (params, inst, fleet) = grad_case();
        let actions = crate::policy::rollout(&inst, &fleet, &params, crate::policy::DecodeMode::Greedy)
            .unwrap()
            .actions;
        let (_, mut analytic) = log_prob_gradient(&params, &inst, &fleet, &actions).unwrap();
        let k = params.tensors.iter().position(|t| t.name == "enc.l0.w0.wq").unwrap();
        analytic[k].data.iter_mut().for_each(|x| *x = *x * 1.5 + 0.01);
        let err = compare_gradients(&params, &inst, &fleet, &actions, &analytic, 1e-5, 10, 2).unwrap();
        assert!(err > 1e-2, "relative error {err}");
    }

    #[test]
    fn empty_subset_has_zero_error() {
        let (params, inst, fleet) = grad_case();
        assert_eq!(grad_check(&params, &inst, &fleet, 1e-5, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn zero_advantage_leaves_parameters_unchanged() {
        let (params, inst, fleet) = grad_case();
        let batch = vec![(inst, fleet)];
        let (_, stats, _) = policy_gradient(&params, &batch, &[0.0], 3).unwrap();
        let cost = stats.mean_sample_cost;
        let (grads, stats, _) = policy_gradient(&params, &batch, &[cost], 3).unwrap();
        assert_eq!(stats.grad_norm, 0.0);
        let mut p = params.clone();
        Adam::new(&params).step(&mut p, &grads, 1e-3);
        assert_eq!(p.tensors, params.tensors);
    }

    #[test]
    fn positive_advantage_descends_on_log_probability() {
        let (params, inst, fleet) = grad_case();
        let batch = vec![(inst.clone(), fleet)];
        let (_, stats, _) = policy_gradient(&params, &batch, &[0.0], 4).unwrap();
        let baseline = stats.mean_sample_cost - 5.0;
        let (grads, _, _) = policy_gradient(&params, &batch, &[baseline], 4).unwrap();
        let mut rng = stream_rng(4, 0);
        let mut replay = Session::new(&params, &[(&inst, &fleet)], false, BnMode::Train).unwrap();
        let actions = replay
            .rollout(0, &inst, &fleet, &mut Picker::Sample(&mut rng), None, None)
            .unwrap()
            .solution
            .actions;
        let (_, dl) = log_prob_gradient(&params, &inst, &fleet, &actions).unwrap();
        for (g, d) in grads.iter().zip(&dl) {
            for (a, b) in g.data.iter().zip(&d.data) {
                assert!((a - 5.0 * b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }
        let mut p = params.clone();
        Adam::new(&params).step(&mut p, &grads, 1e-3);
        for ((new, old), d) in p.tensors.iter().zip(&params.tensors).zip(&dl) {
            for ((x, y), g) in new.tensor.data.iter().zip(&old.tensor.data).zip(&d.data) {
                if g.abs() > 1e-12 {
                    assert_eq!((x - y).signum(), -g.signum());
                }
            }
        }
    }

    #[test]
    fn paired_test_cases() {
        let base = [100.0, 120.0, 90.0, 110.0];
        let better = [50.0, 61.0, 44.0, 57.0];
        assert!(paired_test(&better, &base, 0.05).updated);
        assert!(!paired_test(&base, &base, 0.05).updated);
        assert!(!paired_test(&better, &base, 0.0).updated);
        assert!(!paired_test(&base, &better, 0.05).updated);
    }

    #[test]
    fn identical_params_do_not_swap() {
        let (params, inst, fleet) = grad_case();
        let eval = vec![(inst, fleet)];
        let (_, test) = baseline_update(&params, &params, &eval, 0.05).unwrap();
        assert!(!test.updated);
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            dims: PolicyDims::new(8, 2, 1, 3),
            customers: 5,
            batch_size: 4,
            max_epochs: 2,
            instances_per_epoch: 8,
            eval_instances: 4,
            seed: 17,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_return_initial_params() {
        let cfg = TrainConfig {
            max_epochs: 0,
            ..tiny_config()
        };
        let (params, log) = train(cfg.clone()).unwrap();
        assert!(log.is_empty());
        assert_eq!(params, init_params(cfg.dims, cfg.seed).unwrap());
    }

    #[test]
    fn training_is_reproducible() {
        let strip = |log: Vec<TrainLogRow>| {
            log.into_iter()
                .map(|r| TrainLogRow { wall_sec: 0.0, ..r })
                .collect::<Vec<_>>()
        };
        let (a, la) = train(tiny_config()).unwrap();
        let (b, lb) = train(tiny_config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.len(), 2);
        assert_eq!(strip(la), strip(lb));
    }

    #[test]
    fn lr_follows_the_decay_schedule() {
        let cfg = tiny_config();
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        trainer.run(|_| Ok(())).unwrap();
        assert_eq!(trainer.state.iteration, 4);
        assert_eq!(trainer.state.lr(), cfg.initial_lr * cfg.lr_decay.powi(4));
        assert_eq!(trainer.state.log[0].lr, cfg.initial_lr * cfg.lr_decay.powi(2));
    }

    #[test]
    fn budget_caps_rollouts() {
        let cfg = TrainConfig {
            rollout_budget: Some(30),
            max_epochs: 50,
            ..tiny_config()
        };
        let mut trainer = Trainer::new(cfg).unwrap();
        trainer.run(|_| Ok(())).unwrap();
        assert!(trainer.state.rollouts <= 30);
        assert!(trainer.state.iteration >= 1);
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = TrainConfig {
            lr_decay: 1.5,
            ..tiny_config()
        };
        assert!(matches!(Trainer::new(cfg), Err(Error::InvalidArgument(_))));
    }
}
