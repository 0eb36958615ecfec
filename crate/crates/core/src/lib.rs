//! Masked-autoencoder pretraining for 12-lead ECG with a conduction/view
//! sparse attention mask, plus a hierarchical lead-group probe head.
//!
//! The crate is organised bottom-up:
//!
//! * [`signal`] loads, repairs, resamples and scales raw records.
//! * [`tokenizer`] detects R peaks and cuts each lead into beat tokens.
//! * [`synth`] generates labelled synthetic records with planted peaks.
//! * [`mask`] builds the token layout, allow sets and attention masks.
//! * [`model`] holds the transformer, the attention kernels, the loss and
//!   the hand-written backward pass.
//! * [`pretrain`] drives AdamW pretraining with a warmup/cosine schedule.
//! * [`hug`] contains the downstream heads and the frozen-encoder probe.
//! * [`eval`] computes AUCs, activation ratios and diagnostic reports.
//! * [`cli`] wires everything behind a single command-line entry point.

pub mod cli;
pub mod error;
pub mod eval;
pub mod hug;
pub mod mask;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
