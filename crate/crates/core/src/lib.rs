//! Deterministic simulator for a replicated tiled on-board computer.
//!
//! Replicas of critical threads run on isolated tiles and vote on checksums
//! at every checkpoint. Disagreement is corrected by state synchronization,
//! faulty tiles are repaired through modeled reconfiguration, and tiles that
//! cannot be repaired are replaced by reallocating work according to a
//! performance profile.

pub mod allocator;
pub mod energy;
pub mod error;
pub mod faultsim;
pub mod lockstep;
pub mod mapping;
pub mod metrics;
pub mod model;
pub mod recovery;
pub mod time;
pub mod trace;

pub use error::{Error, Result};
