use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::Solution;
use crate::instance::{FleetConfig, Instance};

/// One solver run: the unit row of comparison tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub solver: String,
    pub params: serde_json::Value,
    pub params_digest: String,
    pub instance_digest: String,
    pub objective: f64,
    pub gap: Option<f64>,
    pub wall_seconds: f64,
    pub seed: Option<u64>,
    /// Solver-specific facts about the run, such as proven optimality.
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub notes: serde_json::Map<String, serde_json::Value>,
    pub solution: Solution,
}

impl SolverReport {
    pub fn new<P: Serialize>(
        solver: &str,
        params: &P,
        instance: &Instance,
        fleet: &FleetConfig,
        solution: Solution,
        wall_seconds: f64,
        seed: Option<u64>,
    ) -> Self {
        let params = serde_json::to_value(params).expect("parameters serialize");
        Self {
            solver: solver.to_string(),
            params_digest: digest(&params),
            params,
            instance_digest: instance.digest(fleet),
            objective: solution.total_minutes,
            gap: None,
            wall_seconds,
            seed,
            notes: serde_json::Map::new(),
            solution,
        }
    }

    pub fn with_note(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.notes.insert(key.to_string(), value.into());
        self
    }
}

/// Short content hash of a serializable value.
pub fn digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Independent RNG stream `stream` under `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn digest_is_stable_and_sensitive() {
        assert_eq!(digest(&[1, 2, 3]), digest(&[1, 2, 3]));
        assert_ne!(digest(&[1, 2, 3]), digest(&[1, 2, 4]));
        assert_eq!(digest(&0u8).len(), 16);
    }

    #[test]
    fn streams_differ() {
        let a: u64 = stream_rng(1, 0).gen();
        let b: u64 = stream_rng(1, 1).gen();
        assert_ne!(a, b);
        assert_eq!(a, stream_rng(1, 0).gen::<u64>());
    }
}
