pub mod decay;
pub mod error;
pub mod floquet;
pub mod linalg;
pub mod ode;
pub mod persistence;
pub mod potentials;
pub mod quadrature;
pub mod spectral;
pub mod spline;

pub use error::{Error, Result};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
