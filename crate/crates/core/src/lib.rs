//! Attention-based dynamic graph convolutional recurrent network (ADGCRNN)
//! for multi-step traffic flow forecasting.
//!
//! This crate is `no_std` (it needs `alloc`) and contains every numeric piece
//! of the model:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! - [`graph`]: the static road graph and its row-normalized adjacency.
//! - [`dataset`] and [`synth`]: cleaning, Z-score scaling, three-resolution
//!   windows, chronological splits and a synthetic traffic generator.
//! - [`attention`], [`cell`] and [`seq2seq`]: the network itself.
//! - [`train`]: loss, optimizer, metrics, training loop and evaluation.
//!
//! File formats, checkpoints and the command line live in the `adgcrnn`
//! companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod autodiff;
pub mod cell;
pub mod dataset;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod seq2seq;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{ParamId, ParamStore, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
