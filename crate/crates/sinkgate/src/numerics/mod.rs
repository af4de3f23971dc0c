//! Deterministic numerics: dense f64 tensors, a splittable RNG, a
//! reverse-mode autodiff tape, and the SGT1 on-disk tensor format.

pub mod adam;
pub mod rng;
pub mod sgt1;
pub mod tape;
pub mod tensor;
