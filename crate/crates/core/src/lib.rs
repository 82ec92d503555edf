//! Decoding engine for paired conditioned/unconditioned next-token distributions.
//!
//! The crate is `no_std` (with `alloc`) so the numerical core can be embedded
//! anywhere; IO, the bridge protocol client and the command-line front end
//! live in the `gdec` crate.
//!
//! Module map:
//!
//! - [`frame`]: log-probability frames and the [`frame::ModelSession`] capability.
//! - [`mock`]: deterministic in-process sessions.
//! - [`decoders`]: M3ID, PMI and contrastive score adjustment, selection and the
//!   generation loop.
//! - [`pdm`]: prompt-dependency measures and the forgetting-rate estimator.
//! - [`metrics`]: CHAIR / Cover / POPE scoring.
//! - [`preference`]: DPO preference pairs, loss and Bradley-Terry probability.
//! - [`simulator`]: synthetic fading-memory model with known ground truth.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose: it rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod decoders;
pub mod error;
pub mod frame;
pub mod math;
pub mod metrics;
pub mod mock;
pub mod pdm;
pub mod preference;
pub mod simulator;

pub use decoders::{
    decode, decode_from, DecodeError, DecoderConfig, DecoderKind, FrameMode, GenerationTrace,
    StepRecord, Termination,
};
pub use error::{Error, Result};
pub use frame::{LogitFrame, ModelSession, SessionDescriptor, TokenId};
