//! RGBD visual odometry that tracks camera motion by aligning a selected
//! subset of Canny edges against distance fields, refined by a sliding-window
//! optimizer.

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod imaging;
pub mod mapping;
pub mod selection;
pub mod synthetic;
pub mod system;
pub mod tracking;

pub use error::{Error, Result};
