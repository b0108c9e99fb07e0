//! Library side of the command-line pipeline: run configuration, the text
//! checkpoint format, and the train/eval/predict orchestration.

pub mod checkpoint;
pub mod config;
pub mod pipeline;
