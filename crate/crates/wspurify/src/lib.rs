//! Checkpoint files, pipeline orchestration and the `wspurify` command line
//! on top of [`wspurify_core`].

pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod resolver;
pub mod simgen;

pub use config::{PipelineConfig, ResolvedConfig, Source};
pub use error::{exit, Error, Result};
pub use resolver::{AddressRule, RegexResolver};
pub use wspurify_core as core;
