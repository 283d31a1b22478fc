//! Interest-dynamics neural process for few-shot sequential recommendation.
//!
//! A user's history is cut into short windows. Each window is encoded into an
//! interest feature; a set of context windows conditions both a
//! query-specific attention summary and a global Gaussian latent, and the
//! decoder scores the whole catalog for the next basket.

pub mod config;
pub mod corpus;
pub mod decoder;
pub mod dynamics;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod trainer;
pub mod verify;

pub use config::{RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Idnp;
