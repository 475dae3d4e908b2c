//! Built-in target models, synthetic data generation, and Gibbs reference
//! samplers used as validation oracles.

pub mod mixture;
pub mod mvn;
pub mod semiconjugate;
pub mod synth;
