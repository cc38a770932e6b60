use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::TileId;
use crate::time::SimDuration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MemoryRegion {
    /// Shared main memory; syndromes go to the supervisor.
    MainMemory,
    /// Tile-local memory; corrected and counted inside the tile.
    TileLocal,
    /// A tile's validation memory; logged once the checkpoint completes.
    ValidationMemory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum FaultKind {
    /// Corrupts the state of every replica on the tile once.
    TransientState,
    /// Upsets the tile's configuration; corrupts replicas at every checkpoint
    /// until the tile is reconfigured.
    TransientConfig,
    /// Defective logic. Only the listed variants route through it; by default
    /// all of them do.
    PermanentLogic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        variants: Option<BTreeSet<u32>>,
    },
    /// Defective tile-local memory; the self-test always fails.
    PermanentMemory,
    /// Configuration upset hitting several adjacent tiles at once.
    #[serde(rename = "MBU")]
    Mbu {
        span: BTreeSet<TileId>,
    },
    EccSyndrome {
        region: MemoryRegion,
    },
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::TransientState => "TransientState",
            FaultKind::TransientConfig => "TransientConfig",
            FaultKind::PermanentLogic { .. } => "PermanentLogic",
            FaultKind::PermanentMemory => "PermanentMemory",
            FaultKind::Mbu { .. } => "MBU",
            FaultKind::EccSyndrome { .. } => "EccSyndrome",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A fault scheduled at an offset from the start of the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub at: SimDuration,
    /// Target tile. MBUs name their tiles in `span`; main-memory syndromes
    /// have no tile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile: Option<TileId>,
    #[serde(flatten)]
    pub kind: FaultKind,
    /// Drawn from the stochastic rates rather than listed explicitly.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub seed_derived: bool,
}

impl FaultEvent {
    pub fn new(at: SimDuration, tile: u32, kind: FaultKind) -> Self {
        FaultEvent {
            at,
            tile: Some(TileId(tile)),
            kind,
            seed_derived: false,
        }
    }

    /// Tiles the fault lands on.
    pub fn tiles(&self) -> Vec<TileId> {
        match &self.kind {
            FaultKind::Mbu { span } => span.iter().copied().collect(),
            _ => self.tile.into_iter().collect(),
        }
    }
}

/// Terminal classification of an injected fault, least severe first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FaultDisposition {
    /// Nothing observable was affected.
    NoEffect,
    /// State was affected but overwritten before any vote flagged it.
    Masked,
    CorrectedStage1,
    RepairedStage2,
    PermanentStage3,
    /// Corrupted a replica no vote can flag, such as a Separate thread.
    Undetected,
    /// Still open when the run ended.
    Unresolved,
}

impl fmt::Display for FaultDisposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}
