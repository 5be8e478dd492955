//! File formats, experiment configuration and orchestration around
//! [`motion_mae_core`]: scenario JSON, binary checkpoints, CSV reports, SVG
//! rendering, and the training / evaluation / sweep runs behind the
//! `motion-mae` command.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod render;
pub mod report;
pub mod scenario_json;

pub use error::{Error, Result};
