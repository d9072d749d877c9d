//! Small dense networks with hand-written reverse-mode gradients.
//!
//! Everything is 64-bit. Batches are row-major `(batch, features)` matrices.

mod adam;
mod checkpoint;
mod expectile;
mod mlp;
mod target;

pub use adam::{AdamConfig, OptimizerState};
pub use checkpoint::{read_mlp, write_mlp, MlpCheckpoint};
pub use expectile::{expectile_loss, expectile_loss_unchecked};
pub use mlp::{Mlp, Tape};
pub use target::TargetCopy;
