//! Weight-conditioned neural solvers for multi-objective combinatorial
//! optimization, trained by preference optimization.

pub mod autodiff;
pub mod epo;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod problems;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use epo::{train, LogRow, TrainConfig};
pub use error::{Error, Result};
pub use evaluate::{evaluate_instance, pooled_front, EvalOptions, InstanceEval};
pub use metrics::{das_dennis_weights, hypervolume, Decomposition, HvContext, ParetoArchive, WeightVector};
pub use model::{DecodeMode, DecoderKind, EncoderKind, Model, ModelConfig};
pub use oracle::{exact_pareto, mc_hypervolume, OracleResult};
pub use params::{AdamConfig, ParameterTable};
pub use problems::{generate_instance, Instance, ProblemKind, Solution};
pub use tensor::{Real, Tensor};
