//! Value-driven transport: discrete-time dynamic optimal transport between two
//! point distributions, learned by alternating particle descent on a transport
//! plan and stochastic ascent on a neural value function.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

#![allow(clippy::needless_range_loop)]

pub mod adam;
pub mod assignment;
pub mod datasets;
pub mod error;
pub mod io;
pub mod metrics;
pub mod particles;
pub mod points;
pub mod sampler;
pub mod scalar;
pub mod trainer;
pub mod valuenet;

pub use adam::{adam_step, OptimizerState};
pub use assignment::{brute_force_assign, empirical_w2, hungarian_assign, Assignment, CostMatrix};
pub use datasets::{make_batch, Batch, CouplingMode, DatasetSpec};
pub use error::{Result, VdtError};
pub use metrics::{evaluate, MetricsReport};
pub use particles::{empirical_lagrangian, init_particles, primal_step, transport_cost, ParticleCloud};
pub use points::{Points, Sample};
pub use sampler::{generate, generate_from, generate_reverse, vdt_step, Direction, GenerationConfig};
pub use scalar::Scalar;
pub use trainer::{
    dual_gradient, load_checkpoint, save_checkpoint, train, train_with, Checkpoint, TrainConfig, TrainLog, TrainRecord,
};
pub use valuenet::{time_embed, Activation, NetworkConfig, ValueNetwork};

pub type ValueNetwork64 = ValueNetwork<f64>;
pub type ValueNetwork32 = ValueNetwork<f32>;
pub type Points64 = Points<f64>;
pub type Points32 = Points<f32>;
pub type ParticleCloud64 = ParticleCloud<f64>;
pub type ParticleCloud32 = ParticleCloud<f32>;
pub type OptimizerState64 = OptimizerState<f64>;
pub type OptimizerState32 = OptimizerState<f32>;
