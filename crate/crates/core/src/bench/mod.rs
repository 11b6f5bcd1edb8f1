//! Synthetic schema-shift benchmark and the evaluation protocols.

pub mod generator;
pub mod probe;
pub mod protocols;
pub mod report;

pub use generator::{generate_pair, label_names, paraphrase, BenchmarkPair, GeneratorConfig, LatentSpec, Paraphrase};
pub use probe::bayes_probe;
pub use protocols::{run_ablations, run_few_shot, run_zero_shot, run_zero_shot_all, BenchConfig};
pub use report::{ArmResult, ProtocolResult};
