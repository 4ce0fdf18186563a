//! Fault characterization toolkit for a neural substitution box.
//!
//! A small MLP (8 input bits, one hidden layer, 256 output classes) learns the
//! byte map `SBox(x ^ k)` for a fixed key byte `k`. This crate provides:
//!
//! - [`trainer`]: from-scratch full-batch gradient descent with optional L2
//!   regularization, deterministic for a given seed,
//! - [`quantizer`]: conversion of the trained parameters to fixed-point
//!   integers that provably preserve the argmax decision,
//! - [`fault`]: exhaustive single-location fault injection over every
//!   parameter, corrupted value, and input,
//! - [`margin`]: exact per-parameter safe-perturbation intervals that predict
//!   the brute-force campaign tuple for tuple,
//! - [`datapath`]: a bit-accurate functional and cycle-count emulator of an
//!   iterative hardware implementation,
//! - [`experiments`]: sweep and search orchestration emitting plot-ready
//!   CSV/JSON bundles.
//!
//! All operations are deterministic: reruns with identical configuration
//! produce byte-identical outputs regardless of worker count.

pub mod datapath;
pub mod experiments;
pub mod fault;
pub mod margin;
pub mod model;
pub mod modelfile;
pub mod quantizer;
pub mod rng;
pub mod sbox;
#[cfg(test)]
pub(crate) mod testutil;
pub mod trainer;

pub use model::{
    accuracy_float, accuracy_int, aes_dataset, argmax_decision, encode_input, encode_label,
    forward_float, forward_int, Dataset, FloatParams, FloatTrace, IntTrace, QuantParams, Sample,
    Topology,
};
pub use sbox::aes_sbox;
