//! Plateau-phase activity profiling (PPAP) for continual learning.
//!
//! While a task trains, [`ppap::ActivityAccumulator`] records how much each
//! weight keeps moving along its gradient once the loss has flattened out.
//! The finalised [`ppap::PlateauProfile`] scores weights in `[0, 1]`, and
//! [`ppap::PpapHook`] scales later optimizer updates by those scores.
//!
//! Around that sit a small reverse-mode engine ([`graph`]), MLP/CNN builders
//! ([`models`]), SGD and Adam with an update hook ([`optim`]), the SI and EWC
//! baselines ([`baselines`]), data loading and synthetic tasks ([`data`]) and
//! the sequential and leave-one-out protocols ([`harness`]).

pub mod baselines;
mod codec;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod models;
pub mod optim;
pub mod params;
pub mod ppap;
pub mod tensor;
pub mod verify;

pub use codec::write_atomic;
pub use error::{Error, Result};
pub use params::{GradientStore, ParamStore};
pub use tensor::{Scalar, Tensor};
