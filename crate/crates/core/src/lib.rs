pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod datasets;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod models;
pub mod render;
pub mod swap;
pub mod trainer;

pub use error::{Error, Result};
