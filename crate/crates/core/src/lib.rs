//! Two-timescale independent Q-learning for two-player zero-sum stochastic
//! games with linear features, plus the model-based oracles and Lyapunov
//! machinery used to audit it.

pub mod chain;
pub mod dynamics;
pub mod error;
pub mod features;
pub mod game;
pub mod learner;
pub mod lp;
pub mod oracles;
pub mod policy;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
