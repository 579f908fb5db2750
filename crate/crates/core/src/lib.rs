//! Short-video ranking with implicit negative feedback.
//!
//! Watch times become three feedback bits per view (engaged, focused,
//! glance). A self-attention encoder reads the user's recent items with
//! their bits, a context layer gates user/item/platform features, and a
//! multi-gate mixture of experts predicts all three outcomes. Serving
//! fuses the predictions into one score with a negative weight on the
//! glance task. A synthetic world and A/B harness exercise the whole loop.

pub mod config;
pub mod context;
pub mod encoder;
pub mod error;
pub mod feedback;
pub mod model;
pub mod multitask;
pub mod numerics;
pub mod serving;
pub mod simulator;
pub mod training;

pub use config::Config;
pub use error::{Error, Result};
