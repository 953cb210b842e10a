//! Head-level KV cache compression.
//!
//! Heads are scored by how much they contribute to retrieving and
//! reasoning over planted needles, budgets are shared across heads in
//! proportion to those scores, and each head keeps its best-scoring cache
//! entries plus a protected observation window.

pub mod allocation;
pub mod cli;
pub mod error;
pub mod harness;
pub mod heads;
pub mod importance;
pub mod kvstore;
pub mod numkit;
pub mod probes;
pub mod selection;
pub mod toymodel;

pub use error::{Error, Result};
