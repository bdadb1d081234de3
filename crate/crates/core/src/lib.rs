pub mod error;
pub mod collective;
pub mod continuum;
pub mod engine;
pub mod flin;
pub mod kf;
pub mod output;
pub mod planner;
pub mod presets;
pub mod quadrotor;
pub mod reference;
pub mod safety;
pub mod scenario;

pub use error::{Error, Result};
