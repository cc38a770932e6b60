//! Trace records emitted by the engine, one JSON object per line.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::allocator::StrategyKind;
use crate::energy::{Energy, Power};
use crate::faultsim::{FaultDisposition, MemoryRegion};
use crate::lockstep::Digest;
use crate::mapping::{MappingEdit, SystemMapping};
use crate::model::{ExecutionMode, FreqLevel, ThreadId, TileId, TimeShare};
use crate::recovery::{CheckResult, QueueReason};
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: SimTime,
    pub epoch: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum TraceEvent {
    RunStarted {
        scenario: String,
        seed: u64,
        profile: String,
        tiles: usize,
        threads: usize,
    },
    RunEnded {
        duration: SimDuration,
    },
    CheckpointStarted {
        induced: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    ChecksumWritten {
        thread: ThreadId,
        tile: TileId,
        digest: Digest,
    },
    DisagreementDetected {
        thread: ThreadId,
        dissenters: BTreeSet<TileId>,
        majority: bool,
    },
    StateSynchronized {
        thread: ThreadId,
        tile: TileId,
        source: TileId,
        counted: bool,
    },
    EscalationRaised {
        thread: ThreadId,
        tiles: BTreeSet<TileId>,
    },
    TileSuspect {
        tile: TileId,
    },
    TileHealthy {
        tile: TileId,
    },
    RepairQueued {
        tile: TileId,
        reason: QueueReason,
    },
    RepairStarted {
        tile: TileId,
        variant: u32,
        attempt: u32,
        until: SimTime,
    },
    ValidationResult {
        tile: TileId,
        variant: u32,
        check: CheckResult,
    },
    VariantSwitched {
        tile: TileId,
        variant: u32,
    },
    FullRebootStarted {
        trigger: TileId,
        until: SimTime,
    },
    FullRebootEnded {
        failed: BTreeSet<TileId>,
    },
    TilePermanentlyDefective {
        tile: TileId,
        lost: Vec<ThreadId>,
    },
    MappingComputed {
        profile: String,
        mapping: SystemMapping,
    },
    ModeReduced {
        thread: ThreadId,
        from: ExecutionMode,
        to: ExecutionMode,
    },
    ThreadDescheduled {
        thread: ThreadId,
    },
    StrategyPrecomputed {
        strategies: BTreeMap<TileId, StrategyKind>,
        infeasible: BTreeSet<TileId>,
    },
    StrategyApplied {
        tile: TileId,
        kind: StrategyKind,
        precomputed: bool,
        infeasible: bool,
        edits: Vec<MappingEdit>,
    },
    ProfileChanged {
        from: String,
        to: String,
    },
    TileGated {
        tile: TileId,
    },
    TileUngated {
        tile: TileId,
    },
    TileIdleGating {
        tile: TileId,
        enabled: bool,
    },
    FrequencyChanged {
        tile: TileId,
        level: FreqLevel,
    },
    TimeShareChanged {
        thread: ThreadId,
        share: TimeShare,
    },
    /// Power drawn by `tile` from now on, in microwatts.
    TilePower {
        tile: TileId,
        #[serde(with = "crate::energy::ratio_str")]
        power: Power,
    },
    /// Extra energy spent copying state to a synchronized replica.
    SyncCharged {
        thread: ThreadId,
        tile: TileId,
        #[serde(with = "crate::energy::ratio_str")]
        energy: Energy,
    },
    FaultInjected {
        fault: u64,
        kind: String,
        tiles: BTreeSet<TileId>,
    },
    FaultDisposition {
        fault: u64,
        disposition: FaultDisposition,
    },
    EccSyndromeReported {
        fault: u64,
        region: MemoryRegion,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tile: Option<TileId>,
    },
    ExposureStarted {
        thread: ThreadId,
        tile: TileId,
    },
    ExposureEnded {
        thread: ThreadId,
        tile: TileId,
    },
    ThreadDown {
        thread: ThreadId,
    },
    ThreadUp {
        thread: ThreadId,
    },
    ReplicationChanged {
        thread: ThreadId,
        replicas: usize,
    },
    ActiveTilesChanged {
        count: usize,
    },
}

impl TraceEvent {
    pub fn type_name(&self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.get("type").and_then(|t| t.as_str()).map(str::to_string))
            .unwrap_or_default()
    }
}

/// Writes `records` as newline-delimited JSON.
pub fn write_ndjson<W: Write>(mut out: W, records: &[TraceRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_ndjson(records: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_ndjson(&mut buf, records).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn read_ndjson<R: BufRead>(input: R) -> io::Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(io::Error::other)?);
    }
    Ok(out)
}
