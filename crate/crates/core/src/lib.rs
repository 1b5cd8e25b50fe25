//! Joint activity detection and channel estimation for grant-free random
//! access, posed as group-row-sparse matrix recovery.
//!
//! The crate provides the MCP proximal operators, classical iterative
//! solvers, unfolded proximal gradient networks with layer-wise training,
//! the self-tuning LPGM-AT forward pass, a numeric checker for the
//! no-false-positive convergence guarantee, scene generation and the
//! benchmarking harness used by the `jadce` command-line tool.

pub mod adaptive;
pub mod config;
pub mod datagen;
pub mod dictionary;
pub mod error;
pub mod io;
pub mod iterative;
pub mod linalg;
pub mod metrics;
pub mod prox;
pub mod sweep;
pub mod theory;
pub mod training;
pub mod unfolded;

pub use error::{Error, Result};
pub use linalg::{CMatrix, Dims, RMatrix, RealizedSystem};
