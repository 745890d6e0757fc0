//! Layer-wise robustness probing: which parts of a convolutional network make
//! it robust to adversarial examples?
//!
//! The crate bundles a small autodiff engine ([`tensor`]), segmented model
//! graphs ([`model`]), gradient attacks ([`attack`]), conventional and
//! adversarial training ([`train`]), the cutoff/combination/reinit experiment
//! protocols ([`protocol`]), representation analysis ([`analysis`]) and
//! checkpoint/manifest/report I/O ([`io`]).

pub mod analysis;
pub mod attack;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod protocol;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Architecture, FreezeMask, ModelGraph, Mode};
pub use tensor::{Tape, Tensor, Var};
