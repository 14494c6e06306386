//! AdverISF: adversarial information separation for tabular regression.
//!
//! The library splits an input into a task-relevant latent and a noise latent
//! with dual variational encoders, enforces statistical independence between
//! them with a shuffle-based critic (Wasserstein-GP or JSD), and cascades
//! separation blocks so that each layer re-examines the previous layer's noise
//! for subtle predictive signal. MLP and VIB baselines plus a configuration
//! driven experiment runner round out the crate.

pub mod adversarial;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod latent;
pub mod nn;
pub mod pipeline;
pub mod record;
pub mod report;
pub mod rng;
pub mod separation;

pub use error::AdvError;
