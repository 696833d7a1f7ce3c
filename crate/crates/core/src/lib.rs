//! Intrinsic causal contributions (ICC) of input features to the output of a
//! black-box predictor.
//!
//! The features are modelled by a structural causal model whose exogenous
//! noises are independent. The contribution of feature `j` given a context
//! `I` is the increase in the explained output variance
//! `phi(I) = Var(E[Y | U_I]) / Var(Y)` when `U_j` joins the context. Contexts
//! are aggregated over the topological orderings of the causal graph
//! ([`icc::icc_topological`]) or symmetrized with Shapley weights
//! ([`icc::icc_shapley`]).
//!
//! Every numeric type is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix `f64`.

// `!(x > 0)` style guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod estimator;
pub mod eval;
pub mod expr;
pub mod graph;
pub mod icc;
pub mod predictor;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod scm;
pub mod scm_learn;
pub mod sobol;

pub use estimator::{JansenBlocks, PhiEstimate};
pub use eval::{ComparisonReport, Dataset, Ranking, Task};
pub use graph::{CausalGraph, FeatureSet, Ordering};
pub use icc::{AttributionReport, IccConfig, Method};
pub use predictor::{FnPredictor, LinearPredictor, Mlp, Predictor};
pub use sampler::{PointSource, QmcConfig, Scramble};
pub use scalar::Real;
pub use scm::{Mechanism, NoiseDist, NoiseSpec, Scm};
pub use scm_learn::{fit_anm, AnmFit, FitOptions};
pub use sobol::{HdmrDecomposition, InputDist};

pub type Scm64 = scm::Scm<f64>;
pub type Scm32 = scm::Scm<f32>;
pub type Mlp64 = predictor::Mlp<f64>;
pub type Mlp32 = predictor::Mlp<f32>;
pub type PhiEstimate64 = estimator::PhiEstimate<f64>;
pub type PhiEstimate32 = estimator::PhiEstimate<f32>;
pub type Dataset64 = eval::Dataset<f64>;
pub type AnmFit64 = scm_learn::AnmFit<f64>;
