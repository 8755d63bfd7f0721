//! Miniature motion-leakage testbed: a synthetic identity/motion world, a
//! small reverse-mode autodiff engine, two indicator modules that suppress
//! motion leakage in an encoder/generator pipeline, and linear probes that
//! measure how much motion reaches the generated identity.

pub mod checkpoint;
pub mod config;
pub mod edi;
pub mod emi;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod math;
pub mod nn;
pub mod pipeline;
pub mod probe;
pub mod tensor;
pub mod train;
pub mod world;

pub use config::{Ablation, EvalConfig, LossWeights, ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use pipeline::Model;
pub use tensor::Tensor;
pub use world::{World, WorldConfig};
