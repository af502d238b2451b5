//! Joint optical flow estimation and layer separation for pairs of
//! double-layer images (a background seen through a transparent or
//! reflective foreground).
//!
//! The energy couples per-layer brightness constancy with sparse-gradient
//! layer priors and TV / TGV² flow priors, and is minimized by alternating
//! between a layer step ([`layer::solve_layers`]) and a flow step
//! ([`flow::solve_flows`]); see [`alternation::alternate`].

pub mod alternation;
pub mod diff;
pub mod energy;
pub mod error;
pub mod flow;
pub mod image;
pub mod io;
pub mod layer;
pub mod metrics;
pub mod pyramid;
pub mod synth;

pub use alternation::{alternate, Estimate, GroundTruth, InitPolicy, Mode, SolverConfig, Trace};
pub use energy::{EnergyBreakdown, FlowRegularizer, LayerDecomposition, TgvWeights, Weights};
pub use error::{Error, Result};
pub use flow::RelaxConfig;
pub use image::{FlowField, Image};
pub use layer::IrlsConfig;
pub use synth::GroundTruthBundle;
