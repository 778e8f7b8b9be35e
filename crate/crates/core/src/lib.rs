pub mod autoencoder;
pub mod capacity;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod network;
pub mod objective;
pub mod training;

pub use error::{Error, Result};
