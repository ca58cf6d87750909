//! Ptychographic phase retrieval with a plug-and-play ADMM loop for
//! removing reconstruction artifacts with pluggable image editors.
//!
//! The pieces, bottom up: [`types`] and [`optics`] define the data model and
//! the multislice, mixed-state forward model; [`solver`] runs ePIE/rPIE;
//! [`editors`] and [`pnp`] implement the editing operator and the outer
//! loop; [`simulation`], [`metrics`], [`config`] and [`pipeline`] turn it
//! into reproducible experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod editors;
pub mod error;
pub mod metrics;
pub mod npy;
pub mod optics;
mod par;
pub mod pipeline;
pub mod pnp;
pub mod simulation;
pub mod solver;
pub mod types;

pub use editors::{Editor, EditorKind, EditorSpec};
pub use error::{Error, Result};
pub use par::parallel_available;
pub use pnp::{run_pnp, PnpResult};
pub use solver::{reconstruct, Solver, SolverState};
pub use types::{
    AdmmState, Algorithm, ComplexImage, DiffractionDataset, EditRequest, Execution, ObjectModel, PnpConfig, Position,
    ProbeModel, RealImage, ScanGrid, SolverConfig, C64,
};
