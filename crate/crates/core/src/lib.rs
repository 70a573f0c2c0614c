//! Two-stage estimation of city-specific bivariate mortality risk surfaces
//! that are constrained to be monotone nondecreasing in ozone.
//!
//! Stage 1 fits an overdispersed Poisson regression per city: daily death
//! counts by age group on a local Bernstein tensor-product basis in
//! (ozone, temperature) plus a seasonal/weather confounder design. Stage 2
//! pools the per-city surface coefficients with a Bayesian hierarchical
//! model: a truncated latent Gaussian field with spatially correlated,
//! Kronecker-structured covariance, sampled by Gibbs/Metropolis updates.
//!
//! Downstream modules turn posterior draws into log relative-rate surfaces,
//! interaction surfaces, stratified temperature comparisons, excess-mortality
//! summaries, and a holdout-deviance cross-validation harness over the model
//! variants.

pub mod basis;
pub mod config;
pub mod confounders;
pub mod cv;
pub mod data;
pub mod glm;
pub mod hier;
pub mod math;
pub mod stage1;
pub mod surfaces;

pub use basis::{BernsteinBasis1D, MonotoneCoeffs, SurfaceSpec};
pub use config::{ModelVariant, RunConfig};
pub use cv::{CvReport, VariantCv};
pub use data::{AnalyzedDay, CityData, CityMeta, SynthSpec, SynthTruth, TruthFamily};
pub use glm::GlmFit;
pub use hier::{ChainConfig, HierDraw, Hyperpriors, PosteriorSample};
pub use stage1::{GlobalBases, Stage1Fit, Stage1Output};
pub use surfaces::{GridAxes, ScalarSummary, StratifiedComparison, SurfaceGrid};
