//! Ground states of Rydberg atom arrays with an autoregressive GRU
//! wavefunction.
//!
//! The crate covers the full pipeline: the lattice Hamiltonian, an exact
//! diagonalization reference that also produces synthetic measurement data,
//! the recurrent wavefunction with exact backpropagation, local-energy
//! estimation, data-driven / variational / hybrid training, and the
//! convergence metrics used to compare schedules.

pub mod checkpoint;
pub mod cli;
pub mod energy;
pub mod error;
pub mod lattice;
pub mod metrics;
pub mod oracle;
mod rng;
pub mod training;
pub mod wavefunction;

pub use error::{Error, Result};
pub use lattice::{Configuration, HamiltonianSpec};
pub use wavefunction::{LogProb, RnnParams};
