//! Population baselines that build and cost solutions through the env.

pub mod aco;
pub mod ga;

pub use aco::{solve_aco, AcoParams, Pheromone};
pub use ga::{decode_chromosome, encode_solution, ga_fitness, solve_ga, Chromosome, Decoded, GaParams};
