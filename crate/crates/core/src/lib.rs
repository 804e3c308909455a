pub mod cli;
pub mod compaction;
pub mod config;
pub mod context;
pub mod engine;
pub mod error;
pub mod hooks;
pub mod model;
pub mod permissions;
pub mod persistence;
pub mod subagent;
pub mod tools;
pub mod types;

pub use error::{Error, Result};
