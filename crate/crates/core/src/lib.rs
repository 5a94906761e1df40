//! Post-processing of noisy volumetric velocity fields inside a vessel mask:
//! wall-aware divergence-free smoothing, automatic smoothing-strength
//! selection, and wall shear stress estimation from a wall-function fit.

pub mod bench;
pub mod dfs;
pub mod error;
pub mod gcv;
pub mod grid;
pub mod io;
pub mod krylov;
pub mod operators;
pub mod pipeline;
pub mod precond;
pub mod segmentation;
pub mod sparse;
pub mod wss;

pub use error::{Error, Result};
