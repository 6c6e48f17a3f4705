//! Desk-scale laboratory for studying how cycle-consistent image translation
//! models hide source-image information in their outputs.

pub mod adam;
pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod defense;
pub mod editprobe;
pub mod error;
pub mod kernels;
pub mod nets;
pub mod pngio;
pub mod probes;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
