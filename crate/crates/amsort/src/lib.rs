//! Parallel integer-sort engines over an in-process active-message transport.
//!
//! The crate implements two engines for the same load-balanced bucket sort:
//!
//! * [`bsp`]: the bulk-synchronous baseline, one single-threaded rank per
//!   simulated core, exchanging keys through collective operations.
//! * [`fabsp`]: the multithreaded fine-grained asynchronous variant, where
//!   worker threads per rank stream keys to their destinations as aggregated
//!   active messages and count arrivals into a shared atomic histogram.
//!
//! Both engines run on [`amnet`], an in-process transport that reproduces the
//! contracts of a zero-copy eager active-message library: pooled fixed-size
//! packets, handler-driven delivery, per-device progress, completion counters
//! and a loopback fast path. [`collectives`] builds the few collective
//! primitives the sorts need on top of it. [`workload`] generates the skewed
//! (Gaussian-sum) key distribution, [`verify`] provides the sequential oracle
//! the outputs are checked against, and [`bench`] is the measurement harness
//! behind the `amsort` CLI.

pub mod amnet;
pub mod bench;
pub mod bsp;
pub mod collectives;
pub mod engine;
pub mod fabsp;
pub mod verify;
pub mod workload;
