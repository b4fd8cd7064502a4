//! Numerical inverse scattering for the focusing Davey-Stewartson II equation.

pub mod cgo;
pub mod determinant;
pub mod error;
pub mod grid;
pub mod lattice;
pub mod operator;
pub mod perturbation;
pub mod quadrature;
pub mod soliton;
pub mod transforms;

pub use error::{Error, Result};
