//! Safe offline reinforcement learning with epigraph value functions and
//! weighted flow-matching policies.
//!
//! The crate is organised bottom-up:
//!
//! * [`env`]: the boat-in-a-river environment and the budget update.
//! * [`dataset`]: offline data generation, storage and minibatches.
//! * [`nn`]: dense networks, Adam, target copies and the expectile loss.
//! * [`values`]: the epigraph value bundle and its training loop.
//! * [`oracle`]: tabular ground truth for small deterministic MDPs.
//! * [`threshold`]: per-state budget search on a learned `V̂`.
//! * [`flow`]: weighted flow-matching policy training and sampling.
//! * [`eval`]: rollouts, sweeps and reports.

pub mod dataset;
pub mod env;
pub mod error;
pub mod eval;
pub mod flow;
pub mod format;
pub mod nn;
pub mod oracle;
pub mod threshold;
pub mod values;

pub use dataset::{Batch, OfflineDataset, Transition};
pub use env::{Action, AugmentedState, EnvConfig, State};
pub use error::{Error, Result};
pub use values::{ValueBundle, ValueTrainConfig};
