use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ThreadId, ThreadSpec, Tile, TileHealth, TileId, ValidationMemory};
use crate::energy::{Energy, Power};
use crate::error::{Error, Result};
use crate::faultsim::FaultDisposition;
use crate::lockstep::Digest;
use crate::mapping::SystemMapping;
use crate::time::{SimDuration, SimTime};

/// Running accumulators updated by the engine as events are processed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub checkpoints: u64,
    pub dissents: u64,
    pub synchronizations: u64,
    pub escalations: u64,
    pub faults_injected: u64,
    pub dispositions: BTreeMap<FaultDisposition, u64>,
    pub downtime: BTreeMap<ThreadId, SimDuration>,
    pub exposure: BTreeMap<ThreadId, SimDuration>,
    /// Picojoules (microwatt-microseconds).
    pub energy: Energy,
    /// Microwatts.
    pub peak_power: Power,
    pub replication_timeline: BTreeMap<ThreadId, Vec<(SimTime, usize)>>,
    pub active_tiles_timeline: Vec<(SimTime, usize)>,
    /// Syndromes corrected inside a tile and only counted.
    pub ecc_tile_local: u64,
    /// Syndromes from shared main memory, forwarded to the supervisor.
    pub ecc_main_memory: u64,
    /// Syndromes in validation memories, logged after the checkpoint.
    pub ecc_validation: u64,
    pub sync_cost_units: u64,
}

/// The global snapshot every module operates on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub time: SimTime,
    pub epoch: u64,
    pub tiles: Vec<Tile>,
    pub threads: Vec<ThreadSpec>,
    pub mapping: SystemMapping,
    pub validation: BTreeMap<TileId, ValidationMemory>,
    pub metrics: Metrics,
    /// How far each replica's state has drifted from the correct state.
    /// Replicas without an entry are consistent.
    pub divergence: BTreeMap<ThreadId, BTreeMap<TileId, u64>>,
    /// Replicas on a freshly repaired tile, waiting to adopt the majority.
    pub rejoining: BTreeSet<(ThreadId, TileId)>,
    /// Threads stopped after a vote without majority.
    pub halted: BTreeSet<ThreadId>,
    /// Last agreed digest per thread, kept across descheduling.
    pub last_majority: BTreeMap<ThreadId, Digest>,
}

impl SystemState {
    pub fn new(tiles: Vec<Tile>, threads: Vec<ThreadSpec>, mapping: SystemMapping) -> Self {
        let validation = tiles
            .iter()
            .map(|t| (t.id, ValidationMemory::new(t.id)))
            .collect();
        SystemState {
            time: SimTime::ZERO,
            epoch: 0,
            tiles,
            threads,
            mapping,
            validation,
            metrics: Metrics::default(),
            divergence: BTreeMap::new(),
            rejoining: BTreeSet::new(),
            halted: BTreeSet::new(),
            last_majority: BTreeMap::new(),
        }
    }

    pub fn tile(&self, id: TileId) -> Result<&Tile> {
        self.tiles
            .iter()
            .find(|t| t.id == id)
            .ok_or(Error::UnknownTile(id))
    }

    pub fn tile_mut(&mut self, id: TileId) -> Result<&mut Tile> {
        self.tiles
            .iter_mut()
            .find(|t| t.id == id)
            .ok_or(Error::UnknownTile(id))
    }

    pub fn thread(&self, id: &ThreadId) -> Result<&ThreadSpec> {
        self.threads
            .iter()
            .find(|t| &t.id == id)
            .ok_or_else(|| Error::UnknownThread(id.clone()))
    }

    pub fn divergence_of(&self, thread: &ThreadId, tile: TileId) -> u64 {
        self.divergence
            .get(thread)
            .and_then(|m| m.get(&tile))
            .copied()
            .unwrap_or(0)
    }

    pub fn set_divergence(&mut self, thread: &ThreadId, tile: TileId, value: u64) {
        if value == 0 {
            if let Some(m) = self.divergence.get_mut(thread) {
                m.remove(&tile);
                if m.is_empty() {
                    self.divergence.remove(thread);
                }
            }
        } else {
            self.divergence
                .entry(thread.clone())
                .or_default()
                .insert(tile, value);
        }
    }

    /// Removes every trace of a replica that no longer exists.
    pub fn forget_replica(&mut self, thread: &ThreadId, tile: TileId) {
        self.set_divergence(thread, tile, 0);
        self.rejoining.remove(&(thread.clone(), tile));
    }
}

/// Number of distinct non-defective tiles hosting a replica of `thread`.
pub fn replication_level(
    thread: &ThreadId,
    mapping: &SystemMapping,
    tiles: &[Tile],
) -> Result<usize> {
    let a = mapping
        .assignment(thread)
        .ok_or_else(|| Error::UnknownThread(thread.clone()))?;
    Ok(a.tiles
        .iter()
        .filter(|id| {
            tiles
                .iter()
                .find(|t| t.id == **id)
                .is_some_and(|t| t.health != TileHealth::PermanentlyDefective)
        })
        .count())
}
