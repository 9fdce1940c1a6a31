pub mod bench;
pub mod error;
pub mod evidence;
pub mod gateway;
pub mod grid;
pub mod pipeline;
pub mod residual;
pub mod semantics;
pub mod spectral;

pub use error::{Error, Result};
