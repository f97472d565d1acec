pub mod analysis;
pub mod datasets;
pub mod error;
pub mod graph;
pub mod graphnet;
pub mod presets;
pub mod rvae;
pub mod training;

#[cfg(test)]
pub(crate) mod test_support;

pub use error::{Error, Result};
