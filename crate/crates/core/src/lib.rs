//! Numerical engine for deriving effective Hamiltonians and effective
//! Lindblad master equations from microscopic quantum-optical models via
//! small nonlinear rotations of polynomially deformed su(2) algebras.
//!
//! Every derived closed form is validated against the exact-conjugation
//! oracle and time-domain simulation; see the `acceptance` test target.

pub mod algebra;
pub mod deformed_su2;
pub mod effective;
pub mod error;
pub mod hilbert;
pub mod lindblad;
pub mod models;
pub mod superop;

pub use algebra::{c64, Operator, C64};
pub use error::{Error, Result};
pub use hilbert::{mode_space, spin_space, tensor, CompositeSpace, Factor};
