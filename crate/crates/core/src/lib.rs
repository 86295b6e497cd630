//! Bayesian dense deformable template models.
//!
//! Observed images are modelled as a smooth template, warped by a random
//! deformation field and corrupted by white Gaussian noise:
//!
//! ```text
//! beta_i ~ N(0, Gamma_g)
//! y_i | beta_i ~ N(K_p^{beta_i} alpha, sigma^2 Id)
//! ```
//!
//! Template and deformations are kernel expansions over fixed control points
//! ([`kernel`]). The parameters `theta = (alpha, sigma^2, Gamma_g)` get
//! conjugate priors and are estimated by a stochastic approximation EM
//! algorithm ([`saem`]) whose simulation step is a hybrid Gibbs sampler over
//! the hidden deformations ([`gibbs`]), stabilised by truncation on random
//! boundaries. Fitted models can be sampled from ([`synthesis`]).

pub mod cli;
pub mod config;
pub mod data_io;
pub mod error;
pub mod gibbs;
pub mod kernel;
pub mod model;
pub mod rng;
pub mod saem;
pub mod synthesis;

pub use error::{Error, Result};
