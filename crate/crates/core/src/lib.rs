//! Farm-state analysis for wind farms.
//!
//! The pipeline runs from a complex velocity field (one `vx + i·vy` series
//! per turbine) and the farm's total power to a lookup table of the
//! truncation order and forecast horizon that maximize the state-conditioned
//! risk-return quotient:
//!
//! 1. [`covariance`]: lagged covariance blocks assembled into a Hermitian,
//!    block-Toeplitz master matrix.
//! 2. [`spectral`]: eigendecomposition ordered by |λ|, explained variance.
//! 3. [`state`]: the scalar farm state `S^(q)(t)`.
//! 4. [`risk`]: conditional densities, expected return and risk per state
//!    bin, the (q, τ) grid and its per-state argmax.
//!
//! [`synthetic`] produces correlated test farms. Data-parallel stages use
//! rayon when the `parallel` feature is enabled (default); results are
//! identical with the feature off or for any thread count.

pub mod binning;
pub mod covariance;
pub mod error;
mod exec;
pub mod export;
pub mod risk;
pub mod spectral;
pub mod state;
pub mod synthetic;
pub mod timeseries;

pub use covariance::{
    assemble_master, assemble_master_direct, compute_block, structure_report, verify_structure,
    CovarianceBlock, LagSet, MasterMatrix, StructureReport,
};
pub use error::{Error, Result};
pub use exec::is_parallel;
pub use risk::{
    build_table, build_table_from_states, conditional_stats, estimate_density, optimize_policy,
    unconditional_stats, BinningConfig, ConditionalDensity, OptimalPolicy, RiskReturnTable,
};
pub use spectral::{decompose, explained_variance, mode_profile, Modes, SpectralBasis};
pub use state::{compute_state, compute_states, state_summary, StateSeries};
pub use synthetic::{generate, FarmScenario, PowerCurve};
pub use timeseries::{compute_returns, PowerSeries, ReturnSeries, VelocityField};

pub use num_complex::Complex64;
