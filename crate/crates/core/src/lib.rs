//! Calibrated ranking: a synthetic click world, an MLP scorer with a
//! query-conditioned piecewise-linear calibrator, ranking and calibration
//! losses, evaluation metrics and a Server/Trainer streaming simulator.

pub mod calibrator;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod math;
pub mod matrix;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod scorer;
pub mod losses;
pub mod world;

pub use error::{Error, Result};
