//! Instance-aware model ensemble with distillation for unsupervised domain
//! adaptation, at desk scale.
//!
//! The crate trains several small UDA component models, fuses their features
//! per instance through a hypernetwork-predicted fusion sub-network built
//! from shuffle linear layers, aligns domains with a conditional adversarial
//! discriminator (plus class-confusion and sharpness-aware objectives), and
//! distills the resulting teacher into a compact student.

pub mod checkpoint;
pub mod component;
pub mod conditioning;
pub mod data;
pub mod distill;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod shuffle;
pub mod tape;

pub use error::{ImedError, Result};
