//! Discrete-event fault injection and simulation.

mod engine;
mod fault;
mod scenario;

pub use engine::{run, Engine, RunError, RunOutput};
pub use fault::{FaultDisposition, FaultEvent, FaultKind, MemoryRegion};
pub use scenario::{
    FaultRates, FieldError, Latencies, ProfileChange, ProfileSpec, ScenarioConfig, ScenarioError,
    TileConfig, TilesSpec, SCHEMA_VERSION,
};
