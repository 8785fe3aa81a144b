//! Two-party CNN inference that computes ReLU and the following linear layer
//! jointly over packed homomorphic encryption, with no slot rotations and no
//! multiplexer rounds on the ReLU path.

pub mod blocks;
pub mod compare;
pub mod cost;
pub mod counters;
pub mod error;
pub mod linear;
pub mod model;
pub mod netadapt;
pub mod packing;
pub mod phe;
pub mod ring;
pub mod runtime;
pub mod share;
pub mod transport;
pub mod triplet;

pub use error::{Error, Result};
