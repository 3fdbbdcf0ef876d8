//! Zero-inflated probabilistic PCA for sparse count matrices.
//!
//! A multinomial factor model with per-taxon zero inflation, fit by
//! mean-field variational inference: closed-form classification updates for
//! the zero indicators and bounded quasi-Newton ascent for the remaining
//! blocks. Ships with scenario generators and an RMSE replication harness.

pub mod blocks;
pub mod elbo;
pub mod error;
pub mod eval;
pub mod fit;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod sim;
pub mod special;

pub use elbo::{
    alpha0_hat, elbo_lpnm, elbo_poisson, log_mgf_term, mc_elbo_oracle, pi_hat, ElboBreakdown,
    VariationalParams,
};
pub use error::{Error, Result};
pub use eval::{run_benchmark, Aggregation, BenchConfig, CellRecord, RmseReport};
pub use fit::{
    classify_pi, estimate_eta, fit, initialize, initialize_with, FactorInit, FitOptions, FitResult,
};
pub use model::{
    alr, alr_inv, underlying_compositions, zero_inflated_compositions, CountMatrix, Hyperparams,
    LatentState, ModelParams,
};
pub use numeric::{CountGrid, Mat};
pub use optim::{bounded_quasi_newton, grad_check, BlockProblem, OptimizerReport};
pub use sim::{generate, random_variational_instance, Scenario, ScenarioConfig, SimulatedDataset};
