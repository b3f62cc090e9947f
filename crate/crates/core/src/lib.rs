//! Identification of diffusively coupled networks from steady-state
//! responses to constant input probes.
//!
//! The hidden network is simulated by [`simulator`], probed through the
//! [`reconstruction::ProbeTarget`] interface and recovered by
//! [`reconstruction::reconstruct`]. [`analysis`] holds the error and
//! robustness checks.

pub mod analysis;
pub mod error;
pub mod graph;
pub mod model;
pub mod ode;
pub mod reconstruction;
pub mod simulator;

pub type DenseMatrix = nalgebra::DMatrix<f64>;

pub use error::{Error, Result, Stage};
pub use graph::{random_graph, WeightedGraph};
pub use model::{AgentModel, Couplings, EdgeCoupling, KnownRelations, NetworkSystem};
