//! Mechanism-design toolkit: ε-BIC → BIC transformations with bounded
//! revenue loss, and the verification harness that certifies them.
//!
//! The crate is organized around two transformation pipelines plus the
//! machinery they share:
//!
//! * [`transform_dc`] — the replica-surrogate pipeline for downward-closed
//!   outcome spaces. Only sample access to the type distributions and query
//!   access to the input mechanism are needed. Built on the online
//!   entropy-regularized matching of [`matching`] and the exact Gibbs
//!   samplers of [`bernoulli`].
//! * [`transform_general`] — the regularized replica-surrogate fractional
//!   assignment pipeline for general outcome spaces. Requires full (tabular)
//!   access to the type distributions. Built on the quadratic assignment
//!   solver with revenue-safe dual extraction.
//! * [`verify`] — exact and statistical certificates (BIC regret, IR slack,
//!   revenue), the exponential-time reference transform, and the
//!   perfect-matching baseline used in regression scenarios.
//!
//! Everything that consumes randomness takes an explicit [`rng::RngStream`],
//! so every run is bit-reproducible from a 64-bit seed.

pub mod bernoulli;
pub mod domain;
pub mod error;
pub mod instance;
pub mod matching;
pub mod mechanism;
pub mod numeric;
pub mod rng;
pub mod scenarios;
pub mod transform_dc;
pub mod transform_general;
pub mod verify;

pub use error::{Error, Result};
