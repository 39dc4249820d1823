use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnShape, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::instance::{FleetConfig, Instance};

use super::params::{Bn, Lin, PolicyParams, NODE_FEATURES};

/// Minutes per unit of the edge feature.
pub(crate) const EDGE_SCALE: f64 = 60.0;

/// Normalization statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics, reported back for the running averages.
    Train,
    /// Frozen running averages.
    Eval,
}

/// Batch statistics observed in train mode: `(slot, mean, var)`.
pub(crate) type BatchStats = Vec<(usize, Vec<f64>, Vec<f64>)>;

/// Encoder output living inside a graph.
pub(crate) struct Encoded {
    pub groups: usize,
    pub nodes: usize,
    pub intervals: usize,
    /// Node embeddings; row `((p-1)*groups + g)*nodes + i`.
    pub all: Var,
    /// Interval-averaged node embeddings; row `g*nodes + i`.
    pub indep: Var,
    /// Graph embeddings; row `g`.
    pub graph: Var,
    pub stats: BatchStats,
}

impl Encoded {
    pub fn row(&self, g: usize, p: usize, i: usize) -> usize {
        ((p - 1) * self.groups + g) * self.nodes + i
    }
}

/// Final embeddings of one instance as plain tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    /// One `(n+1) x d` tensor per interval.
    pub node: Vec<Tensor>,
    pub graph: Vec<f64>,
    pub time_independent: Tensor,
}

/// The instance the encoder reads: the original or its time-flattened copy.
pub(crate) fn encoder_view(instance: &Instance, params: &PolicyParams) -> Result<Option<Instance>> {
    let dims = &params.dims;
    if dims.flatten_time {
        return Ok(Some(instance.time_flattened()));
    }
    if instance.interval_count() != dims.intervals {
        return Err(Error::Shape(format!(
            "parameters expect {} intervals, instance has {}",
            dims.intervals,
            instance.interval_count()
        )));
    }
    Ok(None)
}

pub(crate) fn lin(g: &mut Graph, vars: &[Var], x: Var, l: Lin) -> Var {
    g.linear(x, vars[l.w], vars[l.b])
}

/// Linear, ReLU, linear.
fn ff_relu(g: &mut Graph, vars: &[Var], x: Var, (a, b): (Lin, Lin)) -> Var {
    let h = lin(g, vars, x, a);
    let h = g.relu(h);
    lin(g, vars, h, b)
}

struct Norm<'a> {
    params: &'a PolicyParams,
    vars: &'a [Var],
    mode: BnMode,
    stats: BatchStats,
}

impl Norm<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var, bn: Bn, p: usize) -> Var {
        let slot = bn.stats + p - 1;
        let (gamma, beta) = (self.vars[bn.gamma], self.vars[bn.beta]);
        match self.mode {
            BnMode::Train => {
                let (y, mean, var) = g.batch_norm(x, gamma, beta);
                self.stats.push((slot, mean, var));
                y
            }
            BnMode::Eval => {
                let r = &self.params.running[slot];
                g.normalize(x, gamma, beta, &r.mean, &r.var)
            }
        }
    }
}

fn check(g: &Graph, v: Var, what: &str, layer: usize, p: usize) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} at layer {layer}, interval {p}")))
    }
}

/// Encode a batch of same-size instances into `g`.
pub(crate) fn encode_batch(
    g: &mut Graph,
    vars: &[Var],
    params: &PolicyParams,
    batch: &[(&Instance, &FleetConfig)],
    mode: BnMode,
) -> Result<Encoded> {
    let dims = &params.dims;
    let layout = params.layout();
    let groups = batch.len();
    if groups == 0 {
        return Err(Error::InvalidArgument("empty encoder batch".into()));
    }
    let nodes = batch[0].0.node_count();
    let views: Vec<Option<Instance>> = batch
        .iter()
        .map(|(inst, _)| {
            if inst.node_count() != nodes {
                return Err(Error::Shape("instances in a batch must have equal size".into()));
            }
            encoder_view(inst, params)
        })
        .collect::<Result<_>>()?;
    let seen: Vec<&Instance> = views.iter().zip(batch).map(|(v, (i, _))| v.as_ref().unwrap_or(i)).collect();

    let heads = dims.heads;
    let intervals = dims.intervals;
    let shape = AttnShape { groups, nodes, heads };
    let scale = 1.0 / (dims.key_dim() as f64).sqrt();

    let mut features = Tensor::zeros(groups * nodes, NODE_FEATURES);
    for (gi, ((inst, fleet), view)) in batch.iter().zip(&seen).enumerate() {
        for i in 0..nodes {
            let node = view.node(i);
            let r = gi * nodes + i;
            features.data[r * NODE_FEATURES..(r + 1) * NODE_FEATURES].copy_from_slice(&[
                node.x,
                node.y,
                f64::from(inst.demand(i)) / f64::from(fleet.capacity),
            ]);
        }
    }
    let features = g.constant(features);
    let transpose: Vec<usize> = (0..groups)
        .flat_map(|gi| (0..nodes).flat_map(move |i| (0..nodes).map(move |j| (gi * nodes + j) * nodes + i)))
        .collect();

    let mut norm = Norm {
        params,
        vars,
        mode,
        stats: Vec::new(),
    };
    let mut per_interval = Vec::with_capacity(intervals);
    for p in 1..=intervals {
        let mut edges = Tensor::zeros(groups * nodes * nodes, 1);
        for (gi, view) in seen.iter().enumerate() {
            for i in 0..nodes {
                for j in 0..nodes {
                    edges.data[(gi * nodes + i) * nodes + j] = view.cost(i, j, p) / EDGE_SCALE;
                }
            }
        }
        let edges = g.constant(edges);
        let mut h = lin(g, vars, features, layout.node_in);
        let mut he = lin(g, vars, edges, layout.edge_in);
        let set = if dims.separate_interval_weights { p - 1 } else { 0 };
        for (l, sets) in layout.layers.iter().enumerate() {
            let layer = &sets[set];
            let hb = norm.apply(g, h, layer.bn_node, p);
            let eb = norm.apply(g, he, layer.bn_edge, p);
            let q = g.matmul(hb, vars[layer.wq]);
            let k = g.matmul(hb, vars[layer.wk]);
            let v = g.matmul(hb, vars[layer.wv]);
            let e = g.matmul(eb, vars[layer.we]);
            let u = g.compat(q, k, e, shape, scale);
            let uv = g.value(u);
            for m in 0..heads {
                if (0..uv.rows).any(|r| !uv.get(r, m).is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "compatibility at layer {l}, head {m}, interval {p}"
                    )));
                }
            }
            let att = g.attend(u, e, v, shape);
            let mha = g.matmul(att, vars[layer.wo]);
            let zv = lin(g, vars, h, layer.node_gate);
            let zv = g.sigmoid(zv);
            let gated = g.mul(mha, zv);
            let gv = g.add(gated, h);

            let next_edges = match &layer.edge {
                Some(up) => {
                    let ue = g.concat_cols(&[u, e]);
                    let mix = lin(g, vars, ue, up.mix);
                    let he_t = g.gather(he, &transpose);
                    let ze = lin(g, vars, he_t, up.gate);
                    let ze = g.sigmoid(ze);
                    let gated = g.mul(mix, ze);
                    let ge = g.add(gated, he);
                    let nb = norm.apply(g, ge, up.bn, p);
                    let f = ff_relu(g, vars, nb, up.ff);
                    let z = lin(g, vars, ge, up.ff_gate);
                    let z = g.sigmoid(z);
                    let f = g.mul(f, z);
                    Some(g.add(f, ge))
                }
                None => None,
            };

            let nb = norm.apply(g, gv, layer.bn_ff, p);
            let f = ff_relu(g, vars, nb, layer.ff);
            let z = lin(g, vars, gv, layer.ff_gate);
            let z = g.sigmoid(z);
            let f = g.mul(f, z);
            h = g.add(f, gv);
            check(g, h, "node embedding", l, p)?;
            if let Some(ne) = next_edges {
                check(g, ne, "edge embedding", l, p)?;
                he = ne;
            }
        }
        per_interval.push(h);
    }
    let all = g.concat_rows(&per_interval);
    let mut sum = per_interval[0];
    for &h in &per_interval[1..] {
        sum = g.add(sum, h);
    }
    let indep = g.scale(sum, 1.0 / intervals as f64);
    let rows: Vec<Var> = (0..groups)
        .map(|gi| {
            let idx: Vec<usize> = (gi * nodes..(gi + 1) * nodes).collect();
            let x = g.gather(indep, &idx);
            g.mean_rows(x)
        })
        .collect();
    let graph = g.concat_rows(&rows);
    Ok(Encoded {
        groups,
        nodes,
        intervals,
        all,
        indep,
        graph,
        stats: norm.stats,
    })
}

/// Encode one instance with frozen statistics.
pub fn encode(instance: &Instance, fleet: &FleetConfig, params: &PolicyParams) -> Result<Embeddings> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let enc = encode_batch(&mut g, &vars, params, &[(instance, fleet)], BnMode::Eval)?;
    let all = g.value(enc.all);
    let n = enc.nodes;
    let d = all.cols;
    let node = (0..enc.intervals)
        .map(|p| Tensor {
            rows: n,
            cols: d,
            data: all.data[p * n * d..(p + 1) * n * d].to_vec(),
        })
        .collect();
    Ok(Embeddings {
        node,
        graph: g.value(enc.graph).data.clone(),
        time_independent: g.value(enc.indep).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{generate, generate_instance, FleetPreset, GeneratorConfig};
    use crate::policy::params::{init_params, PolicyDims};

    fn small() -> (Instance, FleetConfig) {
        let cfg = GeneratorConfig::new(3, FleetPreset::Custom { vehicles: 2, capacity: 15 }).with_intervals(2);
        generate(&cfg, 4).unwrap()
    }

    #[test]
    fn shapes_follow_the_dims() {
        let (inst, fleet) = small();
        let params = init_params(PolicyDims::new(8, 2, 2, 2), 1).unwrap();
        let emb = encode(&inst, &fleet, &params).unwrap();
        assert_eq!(emb.node.len(), 2);
        assert_eq!((emb.node[0].rows, emb.node[0].cols), (4, 8));
        assert_eq!(emb.graph.len(), 8);
        assert_eq!((emb.time_independent.rows, emb.time_independent.cols), (4, 8));
    }

    #[test]
    fn graph_embedding_is_the_mean_over_intervals_and_nodes() {
        let (inst, fleet) = small();
        let params = init_params(PolicyDims::new(8, 2, 2, 2), 1).unwrap();
        let emb = encode(&inst, &fleet, &params).unwrap();
        for c in 0..8 {
            let mut total = 0.0;
            for t in &emb.node {
                total += (0..4).map(|i| t.get(i, c)).sum::<f64>();
            }
            assert!((total / 8.0 - emb.graph[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_count_mismatch_is_a_shape_error() {
        let (inst, fleet) = generate_instance(4, FleetPreset::Mttdvrp10, 1).unwrap();
        let params = init_params(PolicyDims::new(8, 2, 2, 3), 1).unwrap();
        assert!(matches!(encode(&inst, &fleet, &params), Err(Error::Shape(_))));
    }

    #[test]
    fn flattened_encoder_accepts_multi_interval_instances() {
        let (inst, fleet) = small();
        let params = init_params(PolicyDims::new(8, 2, 2, 2).flattened(), 1).unwrap();
        let emb = encode(&inst, &fleet, &params).unwrap();
        assert_eq!(emb.node.len(), 1);
    }

    #[test]
    fn equal_intervals_give_equal_embeddings() {
        let (inst, fleet) = small();
        let cost = crate::instance::CostTensor::from_fn(4, 2, |i, j, _| inst.cost(i, j, 1));
        let same = Instance::new(inst.nodes().to_vec(), cost, inst.schedule().clone(), inst.meta().clone()).unwrap();
        let params = init_params(PolicyDims::new(8, 2, 2, 2), 1).unwrap();
        let emb = encode(&same, &fleet, &params).unwrap();
        assert_eq!(emb.node[0], emb.node[1]);
    }
}
