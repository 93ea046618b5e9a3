// Index loops read closer to the math in the numeric kernels.
#![allow(clippy::needless_range_loop, clippy::large_enum_variant)]

pub mod checkpoint;
pub mod cluster;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::Domain;
pub use tensor::{Matrix, Rng};
