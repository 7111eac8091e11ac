//! Coordination layer for multi-stream parallel decoding.
//!
//! Streams decode in parallel, exchange compressed notes over a versioned
//! bus, read sibling notes through a trust-gated cross-attention block and
//! roll back to their last commit when an agreement score drops below a
//! threshold. Decoding is driven by replay artifacts (precomputed logits and
//! scores) so every run is a pure function of its inputs.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analytics;
pub mod balancer;
pub mod bus;
mod canon;
pub mod decode;
pub mod error;
pub mod mem;
pub mod rng;
pub mod snc;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
