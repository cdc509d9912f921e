// SPDX-License-Identifier: Apache-2.0

//! Homogeneous networks, neural correlation functions (NCFs) and the
//! neuron-by-neuron training procedure built on them.
//!
//! The crate is `no_std` + `alloc`; file formats and the command line live in
//! `nplab`.

#![no_std]

extern crate alloc;

pub mod act;
pub mod decomp;
pub mod error;
pub mod mat;
pub mod ncf;
pub mod net;
pub mod pursuit;
pub mod rng;
pub mod saddle;
pub mod tasks;

pub use act::Activation;
pub use error::{Error, Result};
pub use mat::Mat;
pub use ncf::{AscentConfig, KktCandidate, NcfObjective};
pub use net::{Dataset, GradientSet, Net};
