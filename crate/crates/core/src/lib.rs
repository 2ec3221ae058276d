//! Fast-slow mixture-of-transformers driving policy.
//!
//! A frozen understanding expert encodes multi-frame scene tokens on a slow clock and publishes
//! its per-layer keys and values. A trained action expert reads the latest snapshot on every
//! fast tick through joint attention and decodes meta-action tokens, timed waypoints and route
//! points. An optional diffusion refiner polishes the trajectories.

pub mod action;
pub mod checkpoint;
pub mod closed_loop;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod kv_cache;
pub mod masking;
pub mod metrics;
pub mod numeric;
pub mod plan;
pub mod policy;
pub mod refiner;
pub mod scene;
pub mod scheduler;
pub mod train;
pub mod understanding;

pub use error::{Error, Result};
