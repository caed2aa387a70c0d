pub mod config;
pub mod deliberation;
pub mod error;
pub mod evidence;
pub mod gateway;
pub mod guideline;
pub mod hypothesis;
pub mod kg;
pub mod metrics;
pub mod params;
pub mod runner;
pub mod text;
pub mod trace;

pub use error::{Error, Result};
