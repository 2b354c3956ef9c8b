//! Elastic GPU-cluster scheduling: capacity loaning between an inference and a
//! training cluster, preemption-aware reclaiming, two-phase allocation,
//! best-fit-decreasing placement and a discrete-event simulator to compare
//! them.

pub mod alloc;
pub mod cluster;
pub mod error;
pub mod harness;
pub mod loaning;
pub mod oracle;
pub mod place;
pub mod reclaim;
pub mod sim;

pub use cluster::{Cluster, GpuKind, JobId, JobSpec, JobState, Phase, Role, Server, ServerGroup, ServerId};
pub use error::{Error, Result};
