//! Joint CFO/DOA estimation, multi-branch beamforming and user grouping for
//! multiuser OFDM uplink with a large uniform linear array.

pub mod analysis;
pub mod beamform;
pub mod channel;
pub mod cli;
pub mod estimator;
pub mod grouping;
pub mod harness;
pub mod numerics;
pub mod signal;

pub use channel::{DistanceRule, SystemConfig, UserChannel};
pub use estimator::{CfoDoaEstimate, DoaGrid, FsBeam};
pub use harness::{run_monte_carlo, DoaMode, Engine, MetricsTable, Scenario, Scheme, SnrMode, TrialResult};

/// Top-level error for callers that drive several stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Channel(#[from] channel::ChannelError),
    #[error(transparent)]
    Estimator(#[from] estimator::EstimatorError),
    #[error(transparent)]
    Grouping(#[from] grouping::GroupingError),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
}
