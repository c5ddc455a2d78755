pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod mceval;
pub mod model;
pub mod objective;
pub mod plot;
pub mod rng;
pub mod run;
pub mod synthetic;
pub mod tensorcore;
pub mod varneuron;

pub use error::{Error, Result};
