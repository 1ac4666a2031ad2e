pub mod bench;
pub mod data;
pub mod error;
pub mod fedrun;
pub mod kernels;
pub mod objective;
pub mod optim;
pub mod params;
pub mod predict;
