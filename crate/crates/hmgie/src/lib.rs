pub use hmgie_core as core;

pub mod gateway;
pub mod image;
pub mod pipeline;
pub mod forge;
pub mod config;
pub mod cli;
