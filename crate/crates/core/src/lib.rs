//! Simulation and diagnostics for meta-learning (ERM, MAML, iMAML) on
//! overparameterized linear regression.
//!
//! The pipeline is: describe a task environment ([`TaskEnvironment`]), draw a
//! [`MetaDataset`], compute the minimum-norm meta solution with
//! [`min_norm_solve`], and compare it against the population optimum from
//! [`population_solution`].

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod meta_solver;
pub mod quadrature;
pub mod risk;
pub mod rng;
pub mod spectrum;
pub mod stats;
pub mod task_model;

pub use adaptation::{adapt, effective_design, empirical_weight, population_weight, EffectiveDesign, ErmConvention, MetaMethod};
pub use error::{Error, Result};
pub use meta_solver::{
    min_norm_solve, population_solution, Estimator, MinNormSolution, PopulationSolution, SolveOptions,
};
pub use risk::{
    decompose, excess_risk, finite_adaptation_risk, population_risk, theorem_bound, BoundReport, Decomposition,
    McEstimate, McSettings, RiskReport,
};
pub use rng::{StreamKey, StreamTag};
pub use spectrum::{
    benign_scan, effective_dimension, effective_ranks, heterogeneity, hyperparameter_safe, order_preserved,
    BenignDiagnostic, BenignVerdict, SpectrumReport,
};
pub use task_model::{
    sample_meta_dataset, sample_task, CovarianceSpec, MetaDataset, SpectralMatrix, SubGaussianFamily, TaskData,
    TaskEnvironment,
};

/// Library version, written into run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
