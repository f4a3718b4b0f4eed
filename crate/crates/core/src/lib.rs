//! Indoor/outdoor positioning from MIMO-OFDM channel state information with a
//! feature-extraction trunk shared across environments and a small
//! regression head per environment.
//!
//! The pipeline runs from a synthetic street-canyon channel simulator
//! ([`channel_sim`]) through fingerprint construction ([`fingerprint`]) and a
//! residual CNN built on a small reverse-mode autodiff engine ([`autodiff`],
//! [`model`]) to joint training over source environments ([`metatrain`]) and
//! transfer to an unseen target ([`transfer`]). [`experiment`] and [`report`]
//! drive it from JSON configs and turn results into tables and plots.

pub mod autodiff;
pub mod channel_sim;
pub mod error;
pub mod experiment;
pub mod fingerprint;
pub mod metatrain;
pub mod model;
pub mod report;
pub mod rng;
pub mod transfer;

pub use error::{Error, Result};
