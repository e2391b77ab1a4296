//! Numerical toolkit for periodic traveling waves of viscous conservation
//! and balance laws: wave families by spectral continuation, Bloch–Floquet
//! stability analysis, Whitham modulation extraction, and desk-scale
//! validation of large-time modulation behavior.

pub mod bloch;
pub mod diffwave;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod profile;
pub mod seeds;
pub mod evolve;
pub mod whitham;

pub use error::CoreError;
