//! Neural-network engine with Monte-Carlo dropout at test time.
//!
//! A trained [`network::SplitNetwork`] is partitioned into a deterministic
//! feature part, evaluated once per input, and a stochastic head that is run
//! `T` times with fresh dropout masks. The sampled outputs yield a predictive
//! mean and variance from which confidence intervals and optimistic or
//! pessimistic class scores are derived ([`uncertainty`]). Benchmarks live in
//! [`metrics`] (top-k error, average precision, paired permutation test) and
//! the `opnet` binary wires everything to checkpoints, dataset files and CSV
//! reports.
//!
//! Every random decision in the crate is a pure function of an explicit seed
//! and a set of counters ([`rng`]); reruns with the same seeds are
//! byte-identical.

pub mod checkpoint;
pub mod commands;
pub mod datafile;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod network;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::Tensor;
