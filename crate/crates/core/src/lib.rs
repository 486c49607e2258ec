//! Joint multi-class estimation of building damage, landslide, and
//! liquefaction from damage-proxy rasters, by variational inference in a
//! causal Bayesian network with quadratic log-sum-exp bounds.
//!
//! The crate is organized around the data flow of a fit:
//!
//! - [`graph`]: network topology, weights, and exact conditional densities;
//! - [`bounds`]: the quadratic variational bounds, posterior moments, and
//!   the assembled evidence lower bound;
//! - [`inference`]: the stochastic EM loop (posterior coordinate ascent,
//!   weight gradients with L1 shrinkage, curvature refresh);
//! - [`priors`]: fragility-curve and ground-failure priors and their
//!   attachment as logit offsets;
//! - [`scene`]: raster ingestion, pruning, ground truth, and outputs;
//! - [`synth`]: a forward sampler producing scenes with known latent truth;
//! - [`eval`]: ROC/AUC, cross-entropy, and confusion metrics;
//! - [`oracle`]: brute-force reference implementations used to verify the
//!   fast paths in tests.

pub mod bounds;
pub mod eval;
pub mod graph;
pub mod inference;
pub mod oracle;
pub mod parallel;
pub mod priors;
pub mod scene;
pub mod synth;

pub use bounds::{LatentWeighting, SiteData, VariationalParams};
pub use graph::{build_network, CausalNetwork, HazardKind, NetworkSpec, WeightSet};
pub use inference::{fit, FitConfig, FitResult, PosteriorField};
pub use scene::{Grid, Scene};
