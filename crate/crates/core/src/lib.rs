//! Numerical gluing of pseudoholomorphic curves at a node.

pub mod cauchy_ops;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod gluing;
pub mod index;
pub mod linearized;
pub mod numerics;
pub mod par;

pub use error::{GlueError, Result};
pub use numerics::C64;
