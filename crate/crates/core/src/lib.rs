//! Post-processing stack for entanglement-based (BBM92) quantum key
//! distribution over a free-space link.
//!
//! The pipeline takes raw detector time-tags from two endpoints to an
//! authenticated, privacy-amplified key held in a key management buffer:
//!
//! 1. [`sync`] recovers the clock offset between the parties and matches
//!    coincidences;
//! 2. [`sifting`] keeps same-basis events and estimates the QBER;
//! 3. [`cascade`] reconciles the keys interactively;
//! 4. [`privacy`] confirms the correction, computes the final length and
//!    compresses the key with Toeplitz hashing;
//! 5. [`auth`] authenticates every classical message after the fact with a
//!    one-time-padded polynomial MAC;
//! 6. [`session`] runs the two-party dialogue and [`kms`] serves the keys.
//!
//! [`simulator`] and [`linkmodel`] provide synthetic detection streams and
//! the link-budget arithmetic.

pub mod auth;
pub mod bits;
pub mod cascade;
pub mod kms;
pub mod linkmodel;
pub mod privacy;
pub mod rng;
pub mod session;
pub mod sifting;
pub mod simulator;
pub mod sync;
pub mod tags;
pub mod ttag;

pub use bits::BitBlock;
pub use tags::{channel_map, merge_sorted, Basis, DetectorChannel, Party, TagStream, TimeTag};
