//! Simulation and design of time-binned sink-network receivers for quantum
//! state discrimination.
//!
//! A single photon walks between two polarization layers of a looped network.
//! Every pass through the intermediate layer a fraction of its amplitude is
//! extracted into one of two sink detectors, so the *arrival time* of a click
//! becomes a classical label carrying information about the input state.
//!
//! The crate is organized bottom-up:
//!
//! * [`quantum`] exact 2x2 complex algebra, canonical state sets and the
//!   Helstrom bound;
//! * [`network`] evolution of the two-layer network with probabilistic
//!   extraction into time-tagged sinks;
//! * [`discrimination`] MAP decisions, single-copy error and Bayesian
//!   multi-copy error scaling over `(sink, bin)` outcome tables;
//! * [`receiver`] receiver synthesis (closed-form binary construction, the
//!   published four-state receivers, simplex search) and QWP-HWP-QWP
//!   waveplate decomposition;
//! * [`experiment`] Monte Carlo photon counting with accidentals, background
//!   subtraction and Poisson post-selection;
//! * [`cli`] the `qsdnet` command-line front end.

pub mod cli;
pub mod discrimination;
pub mod error;
pub mod experiment;
pub mod format;
pub mod network;
pub mod quantum;
pub mod receiver;
pub mod seed;

pub use error::{QsdError, Result};
pub use network::{ExtractionSchedule, NetworkConfig, Sink, TimeBinnedDistribution};
pub use quantum::{Ensemble, Mat2, PureState, Unitary2, C64};

/// Crate version, echoed into every CLI metadata block.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
