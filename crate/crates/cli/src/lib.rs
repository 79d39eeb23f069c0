pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod experiments;
pub mod formats;
pub mod verify;
