pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod select;
pub mod tensor;
pub mod train;
