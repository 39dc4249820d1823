//! Criterion benchmarks for the encoder, one decoding step and the exact oracle.

use tdvrp_core::instance::generate;
use tdvrp_core::policy::{init_params, PolicyDims, PolicyParams};
use tdvrp_core::{FleetConfig, FleetPreset, GeneratorConfig, Instance};

/// Instance with `n` customers, a three-vehicle fleet and `intervals` intervals.
pub fn instance(n: usize, intervals: usize, seed: u64) -> (Instance, FleetConfig) {
    let preset = FleetPreset::Custom {
        vehicles: 3,
        capacity: 30,
    };
    generate(&GeneratorConfig::new(n, preset).with_intervals(intervals), seed).expect("generator accepts the size")
}

/// Untrained desk-sized policy for `intervals` intervals.
pub fn policy(intervals: usize) -> PolicyParams {
    init_params(PolicyDims::new(32, 4, 2, intervals), 1).expect("valid dims")
}
