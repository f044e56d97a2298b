pub mod adapt;
pub mod baselines;
pub mod cell;
pub mod error;
pub mod field;
pub mod metrics;
pub mod pde;
pub mod rednet;
pub mod train;
pub mod sim;

pub use error::{Error, Result, Shape};
pub use field::{BoundaryRule, Field, FieldStack};
