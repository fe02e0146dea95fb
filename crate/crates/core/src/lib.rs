//! Desk-scale training kernel for personalized federated learning of
//! CTC-based sequence recognizers under non-IID client data.
//!
//! The crate is `no_std` + `alloc`: every module here is pure computation
//! over owned buffers, so the same code runs anywhere an allocator exists.
//! File IO, the experiment harness and the CLI live in the companion
//! `fedseq-cli` crate.

#![no_std]

extern crate alloc;

pub mod ctc;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod math;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{CoreError, Result};
