//! Child face prediction from parent faces via domain-specific disentangled
//! latent factors.
//!
//! Parent faces are encoded into genetic factors by `E_X`, mapped to four
//! candidate child genetic factors by `T`, and decoded by the child generator
//! `G_Y` together with external (attribute) and variety factors.

pub mod arch;
pub mod batch;
pub mod checkpoint;
pub mod child;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod factors;
pub mod losses;
pub mod mapper;
pub mod nn;
pub mod parent;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use error::{Error, Result};
pub use train::{predict_children, run_all, run_step, ExternalMode, LossEntry, NetworkBundle};
