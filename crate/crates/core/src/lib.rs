pub mod batch;
pub mod collectives;
pub mod data;
pub mod error;
pub mod exec;
pub mod math;
pub mod optim;
pub mod store;
pub mod baseline;
pub mod metrics;
pub mod model;
pub mod cost;
pub mod verify;
pub mod bench;
pub mod config;
pub mod train;
