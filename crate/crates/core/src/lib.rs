pub mod autodiff;
pub mod binfmt;
pub mod config;
pub mod data;
pub mod model;
pub mod profiler;
pub mod train;
pub mod viz;
