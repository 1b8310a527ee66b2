//! Numerical laboratory for generated Jacobian equations.

pub mod ad;
pub mod alexandrov;
pub mod error;
pub mod expmaps;
pub mod expr;
pub mod gconvex;
pub mod genfun;
pub mod geom;
pub mod mtw;
pub mod regularity;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
