//! Finite-element simulator for coupled moisture, solute and heat transport
//! in porous media with a hydration memory term.
//!
//! The time march is a semi-implicit Rothe scheme; the diagnostics module
//! audits the discrete a-priori estimates on every trajectory.

// Index loops mirror the assembly formulas; `!(x > 0.0)` style checks are
// deliberate so that NaN is rejected too.
#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::excessive_precision,
    clippy::result_large_err
)]
#![cfg_attr(test, allow(clippy::field_reassign_with_default))]

pub mod diagnostics;
pub mod discretization;
pub mod error;
pub mod harness;
pub mod io;
pub mod kirchhoff;
pub mod linalg;
pub mod material;
pub mod mesh;
pub mod quadrature;
pub mod stepper;
pub mod verification;

pub use error::{Error, Result};
pub use mesh::{build_structured_mesh, validate_mesh, BoundaryTag, Mesh, SideTags};
pub use material::{default_model, evaluate_transport_coefficient, validate_assumptions, InitialData, MaterialConfig, MaterialModel};
pub use kirchhoff::{build_kirchhoff_map, degiorgi_recurrence, estimate_pressure_lower_bound, theta_s, KirchhoffMap};
pub use discretization::{
    assemble_concentration_system, assemble_pressure_residual, assemble_temperature_system, update_hydration,
    AssembledSystem, Forcing, PressureStep, StateFields, TransportContext,
};
pub use stepper::{advance_one_level, run, solve_pressure_step, LevelSink, RunError, SchemeConfig, StepStats, Stepper, Trajectory};
pub use diagnostics::{build_report, DiagnosticsConfig, DiagnosticsReport};
pub use verification::{brute_force_single_step, run_convergence_study, ManufacturedCase, ManufacturedKind};
