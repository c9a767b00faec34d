//! Random-effects compound Poisson ("law of leaks") models for zero-inflated
//! survey data.
//!
//! Two model families are supported:
//!
//! * continuous biomass (`RLOL`): a Poisson number of clumps per tow, each clump
//!   carrying an exponential mass, with gamma random effects on the clump
//!   intensity `mu_s` and on the exponential rate `rho_s` of every stratum;
//! * discrete counts (`RDLOL`): the same construction with positive geometric
//!   marks whose success probability `p_s` carries a beta random effect.
//!
//! Hyperparameters `theta = (a, b, c, d)` are estimated by Monte-Carlo EM, with the
//! E-step evaluated by importance sampling over the latent clump counts. The
//! [`inference`] module also assembles the empirical Fisher information, Wald
//! confidence regions and random-effect predictors, and [`studies`] hosts the
//! simulation-study harness driven by the `zicp` binary.

pub mod error;
pub mod estep;
pub mod inference;
pub mod model;
pub mod mstep;
pub mod rng;
pub mod specfun;
pub mod studies;

pub use error::{Error, Result};
pub use model::{Dataset, Kind, Observation, Stratum, Theta};
pub use rng::RngStream;
