//! CoReEcho-style two-stage training framework for video regression.
//!
//! The pipeline learns a continuous embedding space with a ranking-based
//! contrastive loss while a stop-gradient-isolated MLP head regresses the
//! label, then refines the head on the frozen encoder. Everything runs on a
//! small tape-based reverse-mode autodiff engine so the whole stack is
//! verifiable against finite differences and brute-force oracles on one CPU.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod training;
pub mod verify;
pub(crate) mod util;

pub use error::{Error, Result};
