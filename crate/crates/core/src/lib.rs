pub mod bspline;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod factors;
pub mod fgo;
pub mod geometry;
pub mod imu_preint;
pub mod io;
pub mod pipeline;
pub mod quadrature;
pub mod radar_ego;
pub mod sim;

pub use error::{Error, Result};
