pub mod flow;
pub mod hitl;
pub mod mamba;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pose;
pub mod sampling;
pub mod service;
pub mod synth;
pub mod tensor;
