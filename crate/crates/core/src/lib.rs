//! One-class anomaly detection by mutual-information maximization with an
//! entropy penalty on the latent code.
//!
//! Modules build on each other in this order: [`infotheory`] checks the
//! discrete identities behind the objective, [`estimators`] implements the
//! sample losses, [`models`] the encoders, [`augment`] and [`data`] the
//! inputs, [`trainer`] the optimization loop and [`evaluate`] the scores.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod estimators;
pub mod evaluate;
pub mod infotheory;
pub mod models;
pub mod rng;
pub mod trainer;

pub use error::{CoreError, Result};
