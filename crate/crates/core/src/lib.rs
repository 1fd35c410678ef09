//! Few-shot Boolean concept learning testbed.
//!
//! The pipeline: [`grammar`] samples Boolean concepts from a probabilistic
//! context-free grammar with controlled feature count and recursion depth;
//! [`episodes`] turns concepts into balanced support/query tasks; [`net`] is
//! the fixed MLP with exact reverse-mode gradients and Hessian-vector
//! products; [`optim`] implements the learning regimes (per-task Adam from
//! scratch, first- and second-order Meta-SGD); [`metrics`] reduces run traces
//! to efficiency numbers; [`landscape`] measures loss-surface geometry
//! (roughness, curvature, slice grids, trajectory length).
//!
//! Everything is deterministic per seed: one logical stream per consumer,
//! derived through [`seeding`], and no global RNG state.

pub mod episodes;
pub mod grammar;
pub mod landscape;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod seeding;
