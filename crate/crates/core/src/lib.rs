//! Hybrid Int4+BF16 quantized synchronization for tensor-parallel linear layers.
//!
//! A tensor-parallel linear layer `f(x) = xW + b` is split row-wise across `N`
//! logical devices; each device computes a partial output that must be summed
//! across devices at a sync point. This crate implements the full pipeline for
//! compressing that synchronization traffic:
//!
//! * [`layer`] — row-block sharding of a linear layer and per-device partial
//!   forward passes.
//! * [`calibration`] — per-device, per-feature EMA min/max statistics over a
//!   calibration stream, and the symmetric quantization ranges derived from
//!   them.
//! * [`selection`] — choosing the static set of high-precision (BF16)
//!   features, either by aggregated range or uniformly at random.
//! * [`codec`] — the compression/decompression pair: symmetric low-bit
//!   quantization with static per-feature per-device scales, BF16 outlier
//!   passthrough, and a bit-exact wire format.
//! * [`collective`] — a single-process AllGather-then-reduce simulator with
//!   exact byte accounting and error reporting.
//! * [`harness`] — synthetic activation generation with planted outlier
//!   features, activation-dump file I/O, and experiment sweeps.
//!
//! The `tpq` binary wires these together behind `gen`, `calibrate`, `select`,
//! `simulate`, and `sweep` subcommands.

pub mod calibration;
pub mod codec;
pub mod collective;
pub mod error;
pub mod harness;
pub mod layer;
pub mod numeric;
pub mod selection;

pub(crate) mod wire;

pub use error::{Error, Result};
