//! Multi-observer detection and isolation of sensor attacks on
//! discrete-time nonlinear systems.

pub mod certify;
pub mod design;
pub mod detect;
pub mod error;
pub mod io;
pub mod isolate;
pub mod model;
pub mod observer;
pub mod rng;
pub mod scenario;
pub mod sensors;
pub mod sim;

pub use error::{Error, Result};
