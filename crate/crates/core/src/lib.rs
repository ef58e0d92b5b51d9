pub mod ablation;
pub mod checkpoint;
pub mod clustering;
pub mod config;
pub mod data;
pub mod ddl;
pub mod diff;
pub mod ema;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod optim;
pub mod params;
pub mod reporting;
pub mod trainer;

pub use error::{Error, Result};
