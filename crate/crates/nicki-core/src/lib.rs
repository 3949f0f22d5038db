//! Class-specific node-injection poisoning of graph node classifiers.
//!
//! The crate trains a surrogate two-layer GCN, generates attacker-node edges
//! and features through a differentiable scoring + relaxed top-m pipeline,
//! optionally camouflages the attacker nodes as a chosen base class, and
//! evaluates poisoned graphs with fresh classifiers, homophily defenses, and
//! network unnoticeability statistics.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
