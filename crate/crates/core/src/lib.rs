//! Exact linear-form machinery for counting magic squares with prime entries.

pub mod complexity;
pub mod ehrhart;
pub mod exact_linalg;
pub mod local_factors;
pub mod magic_forms;
pub mod polytope;
pub mod prime_census;
pub mod singular_series;

pub use exact_linalg::{IntMatrix, LinalgError, RatMatrix, Rational};
pub use magic_forms::{
    build_constraint_matrix, build_system, certificate_vectors, complete_skeleton, verify_z_basis, FormSystem,
    FormsError, LinearForm, Square,
};
