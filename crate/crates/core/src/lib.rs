//! Variational connectionist temporal classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: log-domain arithmetic and the seeded generator.
//! - [`autodiff`]: a small tape-based reverse-mode engine with the layers the
//!   models need (fully-connected, bidirectional GRU).
//! - [`ctc`]: the collapse mapping, the forward/backward lattice, analytic
//!   gradients and a brute-force enumeration oracle.
//! - [`variational`]: diagonal Gaussian latents, reparameterised sampling,
//!   closed-form KL and Monte Carlo expected KL.
//! - [`losses`]: standard CTC, the conditional-independence loss and the
//!   Markovian loss.
//! - [`models`]: linear-CTC, non-reg-CTC, CI, MD and MA architectures.
//! - [`decoding`]: best-path and prefix beam search with n-gram fusion,
//!   plus edit-distance scoring.
//! - [`harness`]: synthetic data, training, evaluation and reporting.

pub mod autodiff;
pub mod ctc;
pub mod decoding;
mod error;
pub mod harness;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod oracles;
pub mod variational;

pub use autodiff::{Gradients, Graph, ParamStore, Tensor, Var};
pub use ctc::{FrameLogProbs, LabelSequence, Path, Vocab};
pub use error::{Error, Result};
pub use losses::LossBreakdown;
pub use models::{Model, ModelConfig, Variant};
pub use numerics::{LogProb, Rng};
pub use variational::DiagGaussian;
