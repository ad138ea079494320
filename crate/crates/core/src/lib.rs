//! Recovery of a Riemannian metric on the flat 2-torus, up to a constant factor,
//! from the first-order displacement fields of optimal transport maps.
//!
//! The crate simulates the internal data `H = g^{-1} grad phi` produced by the
//! linearized transport equation, reconstructs `g` patch by patch, and checks the
//! transport-side identities against entropic optimal transport.

mod cg;
pub mod elliptic;
pub mod error;
pub mod gfld;
pub mod grid;
pub mod linalg;
pub mod measurements;
pub mod ot;
pub mod probes;
pub mod reconstruction;
pub mod scenario;

pub use error::{Error, Result};
pub use grid::{CovectorField, GridSpec, MetricField, ScalarField, VectorField};
pub use linalg::Sym2;
pub use measurements::MeasurementSet;
pub use reconstruction::{ReconConfig, ReconstructionResult};
pub use scenario::{ScenarioConfig, Truth};
