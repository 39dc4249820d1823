use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Network sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDims {
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub intervals: usize,
    /// Hidden width of the encoder feed-forward sublayers.
    pub ff_hidden: usize,
    /// Logit clipping constant of the trip decoder.
    pub clip: f64,
    /// One weight set per interval instead of one shared set.
    pub separate_interval_weights: bool,
    /// Encode the interval-averaged costs; requires `intervals == 1`.
    #[serde(default)]
    pub flatten_time: bool,
}

impl PolicyDims {
    pub fn new(embed_dim: usize, heads: usize, layers: usize, intervals: usize) -> Self {
        Self {
            embed_dim,
            heads,
            layers,
            intervals,
            ff_hidden: 2 * embed_dim,
            clip: 10.0,
            separate_interval_weights: false,
            flatten_time: false,
        }
    }

    /// Single-interval encoder fed with time-flattened costs.
    pub fn flattened(mut self) -> Self {
        self.intervals = 1;
        self.flatten_time = true;
        self
    }

    /// d=32, M=4, L=2, |TI|=3.
    pub fn desk() -> Self {
        Self::new(32, 4, 2, 3)
    }

    /// d=128, M=8, L=3, |TI|=10.
    pub fn full() -> Self {
        Self::new(128, 8, 3, 10)
    }

    pub fn key_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        if d == 0 || self.heads == 0 || d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {d} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.layers == 0 || self.intervals == 0 || self.ff_hidden == 0 {
            return Err(Error::InvalidArgument("layers, intervals and ff_hidden must be positive".into()));
        }
        if self.flatten_time && self.intervals != 1 {
            return Err(Error::InvalidArgument("a time-flattened encoder has exactly one interval".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::InvalidArgument("clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Lin {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Bn {
    pub gamma: usize,
    pub beta: usize,
    /// First running-statistics slot; one slot per interval follows.
    pub stats: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct EdgeUpdate {
    pub mix: Lin,
    pub gate: Lin,
    pub bn: Bn,
    pub ff: (Lin, Lin),
    pub ff_gate: Lin,
}

#[derive(Debug, Clone)]
pub(crate) struct EncLayer {
    pub bn_node: Bn,
    pub bn_edge: Bn,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub we: usize,
    pub wo: usize,
    pub node_gate: Lin,
    pub bn_ff: Bn,
    pub ff: (Lin, Lin),
    pub ff_gate: Lin,
    /// Absent on the last layer, whose edge output is never read.
    pub edge: Option<EdgeUpdate>,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub node_in: Lin,
    pub edge_in: Lin,
    /// `layers[l][w]` with `w` the interval weight set (always 0 when shared).
    pub layers: Vec<Vec<EncLayer>>,
    pub visited_ff: (Lin, Lin),
    pub to_visit_ff: (Lin, Lin),
    pub indep_ff: (Lin, Lin),
    pub depot: Lin,
    pub status_ff: (Lin, Lin),
    pub vehicle_ff: (Lin, Lin),
    pub ctx_pool: Lin,
    pub ctx_state: Lin,
    pub glimpse_q: usize,
    pub glimpse_k: usize,
    pub glimpse_v: usize,
    pub glimpse_o: usize,
    pub final_q: usize,
    pub final_k: usize,
    pub stat_slots: usize,
}

pub(crate) const NODE_FEATURES: usize = 3;
pub(crate) const VEHICLE_SCALARS: usize = 4;

/// Builder that records names and shapes in creation order.
struct Spec {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    is_bn: Vec<bool>,
    stat_slots: usize,
    intervals: usize,
}

impl Spec {
    fn tensor(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.is_bn.push(false);
        self.names.len() - 1
    }

    fn lin(&mut self, name: &str, i: usize, o: usize) -> Lin {
        Lin {
            w: self.tensor(format!("{name}.w"), i, o),
            b: self.tensor(format!("{name}.b"), 1, o),
        }
    }

    fn ff(&mut self, name: &str, i: usize, h: usize, o: usize) -> (Lin, Lin) {
        (self.lin(&format!("{name}.0"), i, h), self.lin(&format!("{name}.1"), h, o))
    }

    fn bn(&mut self, name: &str, d: usize) -> Bn {
        let gamma = self.tensor(format!("{name}.gamma"), 1, d);
        self.is_bn[gamma] = true;
        let beta = self.tensor(format!("{name}.beta"), 1, d);
        self.is_bn[beta] = true;
        let stats = self.stat_slots;
        self.stat_slots += self.intervals;
        Bn { gamma, beta, stats }
    }
}

fn build(dims: &PolicyDims) -> (Layout, Spec) {
    let d = dims.embed_dim;
    let m = dims.heads;
    let h = dims.ff_hidden;
    let mut s = Spec {
        names: Vec::new(),
        shapes: Vec::new(),
        is_bn: Vec::new(),
        stat_slots: 0,
        intervals: dims.intervals,
    };
    let node_in = s.lin("enc.node_in", NODE_FEATURES, d);
    let edge_in = s.lin("enc.edge_in", 1, d);
    let sets = if dims.separate_interval_weights { dims.intervals } else { 1 };
    let mut layers = Vec::with_capacity(dims.layers);
    for l in 0..dims.layers {
        let mut per_set = Vec::with_capacity(sets);
        for w in 0..sets {
            let p = format!("enc.l{l}.w{w}");
            let last = l + 1 == dims.layers;
            let bn_node = s.bn(&format!("{p}.bn_node"), d);
            let bn_edge = s.bn(&format!("{p}.bn_edge"), d);
            let wq = s.tensor(format!("{p}.wq"), d, d);
            let wk = s.tensor(format!("{p}.wk"), d, d);
            let wv = s.tensor(format!("{p}.wv"), d, d);
            let we = s.tensor(format!("{p}.we"), d, m);
            let wo = s.tensor(format!("{p}.wo"), d, d);
            let node_gate = s.lin(&format!("{p}.gate_v"), d, d);
            let bn_ff = s.bn(&format!("{p}.bn_ff_v"), d);
            let ff = s.ff(&format!("{p}.ff_v"), d, h, d);
            let ff_gate = s.lin(&format!("{p}.gate_hv"), d, d);
            let edge = (!last).then(|| EdgeUpdate {
                mix: s.lin(&format!("{p}.mix_e"), 2 * m, d),
                gate: s.lin(&format!("{p}.gate_e"), d, d),
                bn: s.bn(&format!("{p}.bn_ff_e"), d),
                ff: s.ff(&format!("{p}.ff_e"), d, h, d),
                ff_gate: s.lin(&format!("{p}.gate_he"), d, d),
            });
            per_set.push(EncLayer {
                bn_node,
                bn_edge,
                wq,
                wk,
                wv,
                we,
                wo,
                node_gate,
                bn_ff,
                ff,
                ff_gate,
                edge,
            });
        }
        layers.push(per_set);
    }
    let status_in = VEHICLE_SCALARS + d;
    let layout = Layout {
        node_in,
        edge_in,
        layers,
        visited_ff: s.ff("veh.visited", 2 * d, 2 * d, d),
        to_visit_ff: s.ff("veh.to_visit", 2 * d, 2 * d, d),
        indep_ff: s.ff("veh.indep", 2 * d, 2 * d, d),
        depot: s.lin("veh.depot", d, d),
        status_ff: s.ff("veh.status", status_in, 2 * d, d),
        vehicle_ff: s.ff("veh.out", 6 * d, 2 * d, 1),
        ctx_pool: s.lin("trip.ctx_pool", 2 * d, d),
        ctx_state: s.lin("trip.ctx_state", status_in, d),
        glimpse_q: s.tensor("trip.glimpse_q".into(), 3 * d, d),
        glimpse_k: s.tensor("trip.glimpse_k".into(), d, d),
        glimpse_v: s.tensor("trip.glimpse_v".into(), d, d),
        glimpse_o: s.tensor("trip.glimpse_o".into(), d, d),
        final_q: s.tensor("trip.final_q".into(), d, d),
        final_k: s.tensor("trip.final_k".into(), d, d),
        stat_slots: 0,
    };
    let stat_slots = s.stat_slots;
    (Layout { stat_slots, ..layout }, s)
}

/// Running batch-normalization statistics for one site and interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Named trainable tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Every trainable tensor of the policy plus the normalization statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub tensors: Vec<NamedTensor>,
    pub running: Vec<RunningStats>,
    #[serde(skip)]
    layout: Option<Box<Layout>>,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.tensors == other.tensors && self.running == other.running
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Weights uniform on `[-1/sqrt(d), 1/sqrt(d)]`; normalization scales 1 and shifts 0.
pub fn init_params(dims: PolicyDims, seed: u64) -> Result<PolicyParams> {
    dims.validate()?;
    let (layout, spec) = build(&dims);
    let bound = 1.0 / (dims.embed_dim as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = spec
        .names
        .into_iter()
        .zip(spec.shapes)
        .zip(spec.is_bn)
        .map(|((name, (rows, cols)), is_bn)| {
            let data = if is_bn {
                let fill = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
                vec![fill; rows * cols]
            } else {
                (0..rows * cols).map(|_| dist.sample(&mut rng)).collect()
            };
            NamedTensor {
                name,
                tensor: Tensor { rows, cols, data },
            }
        })
        .collect();
    let d = dims.embed_dim;
    let running = vec![
        RunningStats {
            mean: vec![0.0; d],
            var: vec![1.0; d],
        };
        layout.stat_slots
    ];
    Ok(PolicyParams {
        dims,
        tensors,
        running,
        layout: Some(Box::new(layout)),
    })
}

impl PolicyParams {
    pub(crate) fn layout(&self) -> &Layout {
        self.layout.as_deref().expect("layout is built on construction")
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name).map(|t| &mut t.tensor)
    }

    /// Bind every tensor into `graph`, tracked or as constants.
    pub(crate) fn bind(&self, graph: &mut Graph, track: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if track {
                    graph.param(t.tensor.clone())
                } else {
                    graph.constant(t.tensor.clone())
                }
            })
            .collect()
    }

    /// Blend batch statistics into the running averages.
    pub fn update_running(&mut self, slot: usize, mean: &[f64], var: &[f64]) {
        let r = &mut self.running[slot];
        for (a, b) in r.mean.iter_mut().zip(mean) {
            *a = (1.0 - BN_MOMENTUM) * *a + BN_MOMENTUM * b;
        }
        for (a, b) in r.var.iter_mut().zip(var) {
            *a = (1.0 - BN_MOMENTUM) * *a + BN_MOMENTUM * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.tensor.is_finite())
            && self.running.iter().all(|r| r.mean.iter().chain(&r.var).all(|x| x.is_finite()))
    }

    /// Rebuild the layout after deserialization and check every shape against it.
    pub fn revalidate(mut self) -> Result<Self> {
        self.dims.validate()?;
        let (layout, spec) = build(&self.dims);
        if spec.names.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                spec.names.len(),
                self.tensors.len()
            )));
        }
        for ((name, (rows, cols)), t) in spec.names.iter().zip(&spec.shapes).zip(&self.tensors) {
            if &t.name != name || t.tensor.rows != *rows || t.tensor.cols != *cols || t.tensor.len() != rows * cols {
                return Err(Error::Shape(format!(
                    "tensor {} is {}x{}, expected {name} {rows}x{cols}",
                    t.name, t.tensor.rows, t.tensor.cols
                )));
            }
        }
        let d = self.dims.embed_dim;
        if self.running.len() != layout.stat_slots || self.running.iter().any(|r| r.mean.len() != d || r.var.len() != d) {
            return Err(Error::Shape("running statistics do not match the dims".into()));
        }
        self.layout = Some(Box::new(layout));
        Ok(self)
    }
}

/// Versioned checkpoint document.
#[derive(Debug, Serialize, Deserialize)]
struct PolicyFile {
    version: u32,
    params: PolicyParams,
}

pub fn save_params(params: &PolicyParams, path: &Path) -> Result<()> {
    let doc = PolicyFile {
        version: CHECKPOINT_VERSION,
        params: params.clone(),
    };
    std::fs::write(path, serde_json::to_vec(&doc)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<PolicyParams> {
    let bytes = std::fs::read(path)?;
    params_from_json(&bytes)
}

pub fn params_from_json(bytes: &[u8]) -> Result<PolicyParams> {
    let doc: PolicyFile = serde_json::from_slice(bytes)?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            location: "checkpoint".into(),
            message: format!("unsupported version {}", doc.version),
        });
    }
    doc.params.revalidate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_dims_give_sixteen_dim_heads() {
        let dims = PolicyDims::full();
        assert_eq!(dims.key_dim(), 16);
        assert!(dims.validate().is_ok());
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let dims = PolicyDims::new(6, 4, 2, 3);
        assert!(matches!(init_params(dims, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_params(PolicyDims::desk(), 7).unwrap();
        let b = init_params(PolicyDims::desk(), 7).unwrap();
        let c = init_params(PolicyDims::desk(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn weights_respect_the_init_range() {
        let p = init_params(PolicyDims::desk(), 1).unwrap();
        let bound = 1.0 / 32f64.sqrt();
        for t in &p.tensors {
            if t.name.contains(".bn") {
                continue;
            }
            assert!(t.tensor.data.iter().all(|x| x.abs() <= bound), "{}", t.name);
        }
        assert!(p.tensor("enc.l0.w0.bn_node.gamma").unwrap().data.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn separate_weights_multiply_encoder_sets() {
        let shared = init_params(PolicyDims::desk(), 1).unwrap();
        let mut dims = PolicyDims::desk();
        dims.separate_interval_weights = true;
        let separate = init_params(dims, 1).unwrap();
        assert!(separate.scalar_count() > shared.scalar_count());
        assert!(separate.tensor("enc.l1.w2.wq").is_some());
        assert!(shared.tensor("enc.l1.w2.wq").is_none());
        assert!(shared.tensor("enc.l1.w0.mix_e.w").is_none(), "last layer has no edge update");
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let p = init_params(PolicyDims::new(8, 2, 2, 2), 3).unwrap();
        let dir = tempdir();
        let path = dir.join("p.json");
        save_params(&p, &path).unwrap();
        let q = load_params(&path).unwrap();
        assert_eq!(p, q);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn corrupted_shape_is_rejected() {
        let mut p = init_params(PolicyDims::new(8, 2, 2, 2), 3).unwrap();
        p.tensors[3].tensor.cols += 1;
        let bytes = serde_json::to_vec(&PolicyFile { version: 1, params: p }).unwrap();
        assert!(matches!(params_from_json(&bytes), Err(Error::Shape(_))));
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("tdvrp-params-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
