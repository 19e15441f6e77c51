//! Multi-head Q-learning with diversity through exclusion (DTE).
//!
//! The crate bundles everything needed to reproduce niche identification at
//! desk scale:
//!
//! * [`env`]: the environment contract, episode runner and trajectory record.
//! * [`gridworld`]: map parsing, movement, observation windows and sprites.
//! * [`chemistry`]: reaction graphs and their stochastic in-world dynamics.
//! * [`tasks`]: the maze, simple chemistry and metabolic cycles tasks.
//! * [`valuenet`]: the shared-trunk multi-head value network with exact gradients.
//! * [`learner`]: head sampling, replay, lambda returns and the DTE update.
//! * [`tabular`]: a tabular corridor world used as a fast end-to-end oracle.
//! * [`harness`]: seeded experiment runs, CSV logs, reports and plots.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod chemistry;
pub mod env;
pub mod error;
pub mod gridworld;
pub mod harness;
pub mod learner;
pub mod par;
pub mod tabular;
pub mod tasks;
pub mod valuenet;

pub use error::{Error, Result};
