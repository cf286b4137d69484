pub mod error;
pub mod numeric;
pub mod rng;
pub mod tensor_file;
pub mod types;
pub mod physics;
pub mod autodiff;
pub mod nn;
pub mod model;
pub mod fsutil;
pub mod train;
pub mod artifact;
pub mod metrics;
pub mod baselines;
pub mod mnist;
pub mod imageio;
pub mod dataset;
pub mod synth;
pub mod eval;
pub mod cli;
