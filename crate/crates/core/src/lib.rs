//! Bifurcation prediction and branch continuation for two-population,
//! finite-horizon mean-field game systems on the unit interval.
//!
//! The system is solved in rescaled time on the fixed square `(0,1) x (0,1)`,
//! with the horizon `T` entering as a coefficient:
//!
//! ```text
//! -(1/T) du_i/dt - sigma u_i'' + H_i(u_i')            = V_i(m_1, m_2)
//!  (1/T) dm_i/dt - sigma m_i'' - (m_i H_i'(u_i'))'    = 0
//!  m_i(x, 0) = 1,  u_i(x, 1) = 0,  Neumann conditions in x
//! ```
//!
//! [`spectral`] predicts where non-constant solutions branch off the constant
//! state, [`discretization`] and [`solver`] build and solve the discrete
//! space-time system, and [`continuation`] traces branches in `T`.

pub mod continuation;
pub mod discretization;
pub mod model;
pub mod presets;
pub mod solver;
pub mod spectral;

pub use continuation::{
    continue_branch, oscillation_count, seed_branch, Branch, BranchPoint, ContinuationError,
    ContinuationPolicy, Direction, KeepStates, Termination,
};
pub use discretization::{
    assemble_jacobian, assemble_residual, mass_vector, DiscretizationError, Field, Grid,
    SparseOperator, StateVector,
};
pub use model::{
    trivial_jacobian, CouplingSpec, HamiltonianSpec, ModelError, ModelSpec, TrivialJacobian,
};
pub use presets::Experiment;
pub use solver::{newton_solve, NewtonOptions, SolveReport, SolveStatus};
pub use spectral::{
    bifurcation_times, kernel_residual, linearized_bvp_oracle, local_guess, neumann_eigenvalue,
    transversality_check, BifurcationPoint, EigenMode, SpectralError,
};
