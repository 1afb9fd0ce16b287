//! Simulation and numerical-verification toolkit for interacting Brownian
//! motions on configuration spaces.
//!
//! The crate is organised around a handful of layers:
//!
//! * [`configuration`]: finite point configurations, labelings, translations
//!   and the tagged-frame map `iota`.
//! * [`pointprocess`]: samplers for Poisson, Gibbs, sine-kernel (Dyson) and
//!   Ginibre point fields together with Palm conditioning.
//! * [`dynamics`]: Euler–Maruyama integration of the labeled SDE with
//!   self and pair potentials.
//! * [`tagged`]: track recovery, tagged particles and the environment process.
//! * [`forms`]: finite-difference carré-du-champ operators and checks of the
//!   algebraic identities between them.
//! * [`analysis`]: correlation-function estimators, factorial-moment checks,
//!   the non-explosion criterion and diffusion diagnostics.
//! * [`persistence`]: text formats for configurations, trajectories, configs
//!   and run manifests.
//! * [`cli`]: the `ibm-sim` entry point and named pipelines.

pub mod analysis;
pub mod cli;
pub mod configuration;
pub mod dynamics;
pub mod error;
pub mod forms;
pub mod par;
pub mod persistence;
pub mod pointprocess;
pub mod rng;
pub mod stats;
pub mod tagged;

pub use configuration::{Configuration, Domain, Geometry, KLabeledState, LabelRule, LabeledState};
pub use error::{Error, Result};
