pub mod data;
pub mod error;
pub mod nn;
pub mod schedule;
pub mod unet;
pub mod loss;
pub mod config;
pub mod checkpoint;
pub mod train;
pub mod sample;
pub mod eval;
