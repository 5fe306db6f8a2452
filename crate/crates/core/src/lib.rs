//! Few-shot image classification with learnable class proxies and a learned
//! 3D-convolutional relation metric, trained episodically.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod episode;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod proxy;
pub mod relation;
pub mod train;
