//! Visual-inertial initialization: a closed-form linear
//! solver over preintegrated IMU deltas, refined by two rounds of
//! visual-inertial bundle adjustment and guarded by observability and
//! consensus tests.

pub mod ba;
pub mod consensus;
pub mod error;
pub mod geometry;
pub mod imu;
pub mod io;
pub mod map;
pub mod mk;
pub mod observability;
pub mod pipeline;
pub mod sim;
pub mod tracks;

pub use error::{Error, Result};
