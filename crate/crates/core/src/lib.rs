//! Generalized meta-analysis of multivariate regression summaries.
//!
//! Studies that fitted *reduced* regression models on different covariate
//! subsets each report an estimate `θ̂_k` and (ideally) its covariance
//! `S_k`. Given a covariate-only *reference sample*, the conditional
//! expectation of each study's score under a common *maximal* model turns
//! those summaries into stacked moment equations in the maximal
//! coefficients β, which are then solved by generalized method of moments
//! with an iterated optimal weighting.
//!
//! Crate layout:
//! - [`family`], [`glm`] — exponential-family definitions and IRWLS
//!   maximum-likelihood fitting with sandwich covariances (what each study
//!   runs).
//! - [`moments`] — the stacked moment vector, its Jacobians, and the
//!   variance pieces Δ̂ and Λ̂.
//! - [`estimator`] — the weighted quadratic-form minimizer, iterated
//!   optimal weighting, asymptotic covariance and identifiability check.
//! - [`meta`] — fixed-effect multivariate meta-analysis baseline.
//! - [`sim`] — Monte Carlo harness and the named simulation presets.

pub mod error;
pub mod family;
pub mod glm;
pub mod linalg;
pub mod meta;
pub mod moments;
pub mod sim;

pub mod estimator;

pub use error::{GmetaError, Result};
pub use estimator::{
    asymptotic_covariance, dispersion_step, fit_gmeta, identifiability_check, newton_step_beta,
    objective, GmetaConfig, GmetaFit, GmetaVariant, HessianMode, IdentifiabilityReport,
    LambdaSource, WeightingMatrix, WeightingProvenance,
};
pub use family::GlmFamily;
pub use glm::{dispersion_from_standardized, fit_mle, score_contributions, GlmFit, GlmFitConfig};
pub use meta::{fixed_effect_meta, MetaFit};
pub use moments::{CovariateMap, MomentSystem, ReferenceSample, StudySummary};
pub use sim::{
    gen_covariates, gen_outcomes, reference_size_sweep, run_preset, run_scenario,
    run_scenario_sequential, InterceptMode, MonteCarloReport, Preset, PresetOutput, SimScenario,
    StudyArm, SweepReport,
};
