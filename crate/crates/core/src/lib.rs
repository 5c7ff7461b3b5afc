//! Structural credit risk under the classical KMV model and a CEV-extended
//! KMV model.
//!
//! The crate covers the full chain from observed equity data to
//! group-separation tests:
//!
//! - [`market_model`]: Black-Scholes-Merton pricing and the KMV inversion
//!   of equity data into asset value and asset volatility.
//! - [`cev`]: default probabilities under constant elasticity of variance
//!   dynamics by a Crank-Nicolson PDE solver, the quantile distance to
//!   default, and the Hagan-Woodward equivalent volatility.
//! - [`estimation`]: fixed-effects and equivalent-volatility estimators of
//!   the group elasticity and per-firm volatility scales.
//! - [`stats_tests`]: gamma maximum likelihood and the parametric and
//!   rank-sum tests for separating two groups.
//! - [`mc`]: Monte-Carlo simulation used as an independent oracle and as a
//!   synthetic data generator.
//! - [`pipeline`]: ingestion, equity-volatility estimation, quarterly
//!   orchestration and report emission.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cev;
pub mod error;
pub mod estimation;
mod float_serde;
pub mod market_model;
pub mod mc;
pub mod normal;
pub mod pipeline;
pub mod quarter;
pub mod special;

pub use cev::{
    cev_dd, cev_default_probability, hagan_woodward_vol, CevParams, DefaultDistanceRecord,
    GridSettings, ModelTag, PdeGrid,
};
pub use error::{Error, Result};
pub use estimation::{
    dd_panel, fit_equivalent_vol, fit_fixed_effects, AssetPanel, CalibrationSettings, CevGroupFit,
    FitMethod, PanelEntry,
};
pub use market_model::{
    bsm_call, classical_dd, invert_kmv, kmv_equity_vol, AssetSolution, FirmQuarterObservation,
    Group,
};
pub use pipeline::{run_study, RawInputs, RunConfig, StudyBundle};
pub use quarter::Quarter;
pub use stats_tests::{gamma_mle, z1_test, z2_wilcoxon, GammaFit, TestReport};
