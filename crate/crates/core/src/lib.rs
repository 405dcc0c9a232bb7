pub mod calibration;
pub mod error;
pub mod io;
pub mod miner;
pub mod numeric;
pub mod pipeline;
pub mod retrieval;
pub mod seed;
pub mod trainer;
pub mod triplet;
pub mod world;

pub use error::{Error, Result};
pub use triplet::Triplet;
