//! 2D-to-3D human pose lifting with a dual-stream Transformer-GCN backbone.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod rng;
