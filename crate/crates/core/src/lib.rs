//! ML-VAMP inference for multi-layer stochastic generative networks.
//!
//! A network ([`NetworkSpec`]) alternates linear stages, held in SVD form,
//! with componentwise activations. [`run`] estimates every hidden layer from
//! the output, [`run_se`] predicts the per-layer error of that estimate, and
//! [`experiment`] ties both to the synthetic-network experiments together
//! with MAP and Langevin baselines.

pub mod baselines;
pub mod denoise;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod network;
pub mod quadrature;
pub mod se;
pub mod special;

pub use baselines::{HamiltonianContext, MapOptions, SgldOptions};
pub use engine::{run, EngineOptions, HalfIteration, IterationRecord, MlVamp};
pub use error::{Error, Result};
pub use experiment::{nmse_db, ExperimentConfig, ExperimentResult, Method};
pub use network::{
    build_synthetic_network, sample_trajectory, Activation, ChannelNoise, LinearStage, NetworkSpec, NonlinearStage,
    Stage, SyntheticConfig, Trajectory,
};
pub use se::{run_se, statistics_from_network, SeOptions, SeState};
