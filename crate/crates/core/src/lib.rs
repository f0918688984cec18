//! Evidence synthesis for event rates and overdispersion from aggregate count data.
//!
//! Studies may report an arm's rate with a standard error, its total event count,
//! its number of event-free patients, or both counts. All of these are linked to
//! a common negative-binomial model and combined in a hierarchical Bayesian model
//! sampled with a self-contained Metropolis engine.

pub mod error;
pub mod evidence;
pub mod hiermodel;
pub mod metaclassic;
pub mod nbcore;
pub mod sampler;

pub use error::{Error, Result};
