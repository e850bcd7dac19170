//! Active voltage control on radial distribution networks: network model,
//! power flow, load/PV profiles, voltage barriers, a multi-agent environment,
//! baseline controllers and evaluation metrics.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;

pub mod barrier;
pub mod control;
pub mod env;
pub mod eval;
pub mod network;
pub mod powerflow;
pub mod profiles;

pub use barrier::{BarrierShape, BarrierSpec, BowlParams, RewardSpec};
pub use control::{Command, DroopParams, OpfSettings, OpfSolution, Policy};
pub use env::{EnvConfig, Environment, Observation, StepResult};
pub use error::{Error, Result, TopologyError};
pub use eval::{EpisodeRecord, EvalConfig, MetricsReport};
pub use network::{BusId, NetworkCase};
pub use powerflow::{solve_power_flow, GridState, InjectionSet};
pub use profiles::{Profile, ProfileKind, ProfileStore};
