//! Dual-branch conformer speech enhancement with channel-aware fusion.

pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod signal;
pub mod trainer;

pub use error::{Error, Result};
