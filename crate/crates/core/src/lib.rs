//! Deep Q-learning on synthetic time-series trading games.
//!
//! * [`games`] generates Univariate and Bivariate episodes and runs the
//!   trading rules (actions, validity masks, rewards, observations).
//! * [`nnkit`] is a small double-precision network library with dense,
//!   conv1d, max-pool, GRU and LSTM layers and hand-written backward passes.
//! * [`qnets`] turns names such as `GRU-8x3` into networks.
//! * [`dqn`] is the replay-memory Q-learning agent.
//! * [`evalkit`] scores agents against a perfect-foresight optimum.

pub mod dqn;
pub mod error;
pub mod evalkit;
pub mod games;
pub mod nnkit;
pub mod qnets;

pub use error::{Error, Result};
pub use games::{Action, ActionSet, EpisodeData, GameConfig, GameKind};
pub use nnkit::Tensor2;
pub use qnets::{Family, NetSpec, QNetwork};
