pub mod autodiff;
pub mod cache;
pub mod config;
pub mod error;
pub mod eval;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod semantics;
pub mod structural;
pub mod synth;
pub mod temporal;
pub mod train;
