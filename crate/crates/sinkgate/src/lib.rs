//! Desk-scale laboratory for studying attention-sink tokens in a small
//! vision-language transformer.
//!
//! The crate builds a fully deterministic toy multimodal decoder with
//! *planted* sink structure: a handful of visual tokens carry extreme
//! activations, either written by the vision encoder (vision-emerged sinks)
//! or created inside a decoder layer (decoder-emerged sinks). On top of that
//! backbone it provides:
//!
//! - sink identification and token partitioning from activation statistics,
//! - attention-key coefficient interventions (scale sink vs. ordinary keys),
//! - coefficient sweeps that map which scaling helps which task,
//! - linear probes measuring what information sink tokens aggregate,
//! - a small learned gate that predicts per-input key coefficients,
//! - greedy stacking of gates across layers.
//!
//! Everything computes in f64 and is bitwise reproducible from a run seed.
//! See the `examples/` directory for end-to-end walkthroughs, or the
//! `sinkgate` binary for the command-line pipeline.

pub mod backbone;
pub mod error;
pub mod intervene;
pub mod lsg;
pub mod numerics;
pub mod probes;
pub mod runner;
pub mod scenes;
pub mod sinkid;

pub use error::{Error, Result};
