pub mod context;
pub mod corpus;
pub mod demo;
pub mod engine;
pub mod encoder;
pub mod error;
pub mod features;
pub mod kg;
pub mod kgpath;
pub mod mar;
pub mod metrics;
pub mod proknow;
pub mod synthetic;
pub mod train;
pub mod types;

pub use error::{Error, Result};
