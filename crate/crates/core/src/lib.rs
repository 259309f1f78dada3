//! Backward-SDE samplers for score-based diffusion models.
//!
//! The forward process is the Ornstein–Uhlenbeck flow `dX = −X/2 dt + dW`.
//! Samplers simulate its time reversal from `N(0, (1 − e^{−T}) I)` using a
//! [`ScoreOracle`] for `∇log p_t`: analytic for Gaussian targets,
//! Monte-Carlo over reference particles otherwise, optionally corrupted by a
//! controlled estimation error.

// `!(x > 0.0)` is the idiom here for checks that must also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod oracles;
pub mod samplers;
pub mod targets;

pub use bounds::{
    convexity_m, lipschitz_l, theorem_bound, BoundInputs, BoundReport, RegularityConstants,
};
pub use error::{Error, Result};
pub use metrics::{
    fit_order, linear_fit, sliced_w2, w2_1d, w2_1d_vs_gaussian, w2_gaussian, OrderFit,
};
pub use numerics::{phi_functions, MatD, SeedSpec, SimRng, TimeGrid, VecD};
pub use oracles::{
    corrupt_oracle, linearization_terms, Capabilities, CorruptedOracle, CorruptionDirection,
    CorruptionSpec, EvalContext, GaussianOracle, Linearization, LowEssPolicy, McOracle,
    McOracleConfig, ScoreOracle,
};
pub use samplers::{gaussian_pushforward_exact, run_batch, ChainResult, GaussianLaw, SchemeKind};
pub use targets::{
    generate_dataset, mala_reference_sampler, Dataset, GaussianTarget, LogDensity,
    LogisticPosterior, MalaConfig,
};
