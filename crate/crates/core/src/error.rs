use crate::mapping::MappingViolation;
use crate::model::{ThreadId, TileId, WriteViolation};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("unknown thread {0}")]
    UnknownThread(ThreadId),
    #[error("unknown {0}")]
    UnknownTile(TileId),
    #[error("{0} is permanently defective")]
    AlreadyDefective(TileId),
    #[error("report for epoch {report} does not match state epoch {state}")]
    EpochMismatch { report: u64, state: u64 },
    #[error("instance too large for exhaustive search: {tiles} tiles, {threads} threads (limit 8 and 6)")]
    OracleTooLarge { tiles: usize, threads: usize },
    #[error(transparent)]
    Mapping(#[from] MappingViolation),
    #[error(transparent)]
    ValidationWrite(#[from] WriteViolation),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
