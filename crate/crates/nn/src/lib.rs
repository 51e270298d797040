//! Minimal reverse-mode automatic differentiation over row-major matrices,
//! plus the transformer building blocks and optimizer used by the AuthGuard
//! models.
//!
//! Every value in a [`Graph`] is a 2-D array. Parameters live in a
//! [`ParamStore`] that outlives the graphs built on top of it, so many graphs
//! (one per sample, for instance) can borrow the same parameters concurrently
//! and their [`ParamGrads`] are summed afterwards.

mod checkpoint;
mod error;
mod float;
mod graph;
pub mod layers;
mod optim;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointManifest, ParamEntry};
pub use error::NnError;
pub use float::Float;
pub use graph::{CustomOp, Grads, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamGrads, ParamId, ParamStore};

pub type Result<T> = std::result::Result<T, NnError>;
