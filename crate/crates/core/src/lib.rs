//! Class-aware knowledge injection for prompt-tuned vision-language classifiers.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense kernels (softmax, cosine, cross-entropy) and AdamW.
//! - [`encoder`]: frozen encoder backends. A seeded synthetic world supports
//!   prompt training through a hand-written vector-Jacobian product; an
//!   offline backend serves precomputed features from disk.
//! - [`prompt`]: class-shared and class-specific prompt training.
//! - [`bank`]: the key-value prompt bank and its on-disk format.
//! - [`qkpm`]: training-free query-key prompt matching at inference time.
//! - [`eval`]: base-to-novel splits, metrics, ablations and sweeps.
//! - [`oracle`]: brute-force reference implementations used by the tests.

pub mod bank;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod oracle;
pub mod prompt;
pub mod qkpm;
pub(crate) mod seed;
pub(crate) mod wire;

pub use error::{CakiError, Result};
