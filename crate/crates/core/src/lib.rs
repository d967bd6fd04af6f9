//! Diffusive quantum trajectories of a decaying qubit monitored by
//! heterodyne detection of its fluorescence.
//!
//! * [`state`]: density matrices, Pauli algebra, parameters.
//! * [`sde`]: record synthesis and filtering (Kraus and Euler schemes).
//! * [`analytics`]: the alpha invariant, spheroid law and record-only
//!   reconstruction of the position on the spheroid.
//! * [`estimation`]: maximum-likelihood detection efficiency.
//! * [`validation`]: simulated tomography, conditional means, occupancy
//!   grids and excitation statistics.
//! * [`io`]: record, trajectory and report file formats.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod error;
pub mod estimation;
pub mod io;
pub mod rng;
pub mod sde;
pub mod state;
pub mod validation;

pub use error::{QsdError, Result};
pub use sde::{
    euler_step, filter, kraus_step, lindblad_solve, synthesize, HeterodyneRecord, Scheme,
    Trajectory,
};
pub use state::{
    bloch_from_density, density_from_bloch, excited_prob, linear_entropy, InitialState,
    PauliOps, QubitState, SimParams,
};
