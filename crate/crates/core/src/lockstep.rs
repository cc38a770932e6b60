//! Checkpoint voting between sibling replicas.
//!
//! At every checkpoint each running tile writes a digest of every replica it
//! hosts into its own validation memory, reads its siblings' memories and
//! records whom it disagrees with. The per-thread outcome is then a pure
//! function of the validation memories.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SystemState, ThreadId, TileHealth, TileId};
use crate::time::{SimDuration, SimTime};

/// Opaque 64-bit checksum over a replica's state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Digest(pub u64);

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines two words into a well-spread 64-bit value.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.rotate_left(29))
}

/// FNV-1a over the thread id.
pub fn thread_key(thread: &ThreadId) -> u64 {
    thread
        .as_str()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        })
}

/// Digest of an uncorrupted replica of `thread` at `epoch`.
pub fn correct_digest(thread: &ThreadId, epoch: u64) -> Digest {
    Digest(mix(thread_key(thread), epoch))
}

/// Digest of a replica whose state has drifted by `divergence`.
pub fn replica_digest(thread: &ThreadId, epoch: u64, divergence: u64) -> Digest {
    let c = correct_digest(thread, epoch);
    if divergence == 0 {
        c
    } else {
        Digest(mix(c.0, divergence))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Majority {
    Agreed(Digest),
    NoMajority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerKind {
    TimeTriggered,
    SupervisorInduced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointTrigger {
    pub kind: TriggerKind,
    pub reason: Option<String>,
}

impl CheckpointTrigger {
    pub fn timed() -> Self {
        CheckpointTrigger {
            kind: TriggerKind::TimeTriggered,
            reason: None,
        }
    }

    pub fn induced(reason: impl Into<String>) -> Self {
        CheckpointTrigger {
            kind: TriggerKind::SupervisorInduced,
            reason: Some(reason.into()),
        }
    }
}

/// Vote of one sibling group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadVote {
    pub checksums: BTreeMap<TileId, Digest>,
    pub majority: Majority,
    pub dissenters: BTreeSet<TileId>,
    /// Replicas that deferred their checksum to reach a viable state.
    pub delayed: BTreeSet<TileId>,
    /// Replicas that did not reach a viable state in time.
    pub timed_out: BTreeSet<TileId>,
    /// Hosting tiles that did not take part (reconfiguring or rejoining).
    pub absent: BTreeSet<TileId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub epoch: u64,
    pub trigger: CheckpointTrigger,
    pub per_thread: BTreeMap<ThreadId, ThreadVote>,
}

/// The digest carried by strictly more than half of `reporting` replicas.
pub fn majority<'a>(checksums: impl IntoIterator<Item = &'a Digest>, reporting: usize) -> Majority {
    let mut counts: BTreeMap<Digest, usize> = BTreeMap::new();
    for d in checksums {
        *counts.entry(*d).or_default() += 1;
    }
    counts
        .into_iter()
        .find(|(_, n)| n * 2 > reporting)
        .map_or(Majority::NoMajority, |(d, _)| Majority::Agreed(d))
}

/// Time the replica of `thread` on `tile` needs to reach a viable state.
fn viable_delay(
    state: &SystemState,
    thread: &ThreadId,
    tile: TileId,
) -> Result<(SimDuration, SimDuration)> {
    let spec = state.thread(thread)?;
    let freq = state.tile(tile)?.freq_level.permille().max(1);
    let delay = SimDuration(spec.viable_delay.as_micros() * 1_000 / freq);
    Ok((delay, spec.checkpoint_delay_max))
}

enum Participation {
    Absent,
    TimedOut,
    Writes { delayed: bool },
}

fn participation(state: &SystemState, thread: &ThreadId, tile: TileId) -> Result<Participation> {
    let t = state.tile(tile)?;
    if !t.health.is_running() || state.rejoining.contains(&(thread.clone(), tile)) {
        return Ok(Participation::Absent);
    }
    let (delay, max) = viable_delay(state, thread, tile)?;
    if delay > max {
        Ok(Participation::TimedOut)
    } else {
        Ok(Participation::Writes {
            delayed: delay > SimDuration::ZERO,
        })
    }
}

/// Checksum and comparison phases followed by report assembly.
pub fn run_checkpoint(
    state: &mut SystemState,
    trigger: CheckpointTrigger,
) -> Result<CheckpointReport> {
    let order: Vec<TileId> = state.tiles.iter().map(|t| t.id).collect();
    run_checkpoint_in_order(state, trigger, &order)
}

/// As [`run_checkpoint`], visiting tiles in the given order.
pub fn run_checkpoint_in_order(
    state: &mut SystemState,
    trigger: CheckpointTrigger,
    order: &[TileId],
) -> Result<CheckpointReport> {
    state.epoch += 1;
    state.metrics.checkpoints += 1;
    let epoch = state.epoch;

    // Checksum phase.
    for &tile in order {
        let hosted: Vec<ThreadId> = state
            .mapping
            .threads_on(tile)
            .filter(|t| !state.halted.contains(*t))
            .cloned()
            .collect();
        for thread in hosted {
            if let Participation::Writes { .. } = participation(state, &thread, tile)? {
                let digest = replica_digest(&thread, epoch, state.divergence_of(&thread, tile));
                let vm = state
                    .validation
                    .get_mut(&tile)
                    .ok_or(Error::UnknownTile(tile))?;
                vm.write_checksum(tile, &thread, digest, epoch)?;
            }
        }
        let keep: BTreeSet<ThreadId> = state.mapping.threads_on(tile).cloned().collect();
        if let Some(vm) = state.validation.get_mut(&tile) {
            vm.retain(tile, |t| keep.contains(t))?;
        }
    }

    // Comparison phase: every tile reads its siblings and flags disagreement.
    for &tile in order {
        let hosted: Vec<ThreadId> = state.mapping.threads_on(tile).cloned().collect();
        for thread in hosted {
            let Some(own) = state.validation[&tile]
                .read(&thread)
                .filter(|e| e.epoch == epoch)
                .map(|e| e.checksum)
            else {
                continue;
            };
            let mut flags = BTreeSet::new();
            for sibling in state.mapping.hosts(&thread).filter(|s| *s != tile) {
                match participation(state, &thread, sibling)? {
                    Participation::Absent => {}
                    Participation::TimedOut => {
                        flags.insert(sibling);
                    }
                    Participation::Writes { .. } => {
                        let theirs = state.validation[&sibling].read(&thread).map(|e| e.checksum);
                        if theirs != Some(own) {
                            flags.insert(sibling);
                        }
                    }
                }
            }
            state
                .validation
                .get_mut(&tile)
                .ok_or(Error::UnknownTile(tile))?
                .write_disagreement(tile, &thread, flags)?;
        }
    }

    assemble_report(state, trigger)
}

/// Reads the current epoch's outcome out of the validation memories without
/// mutating anything.
pub fn assemble_report(
    state: &SystemState,
    trigger: CheckpointTrigger,
) -> Result<CheckpointReport> {
    let epoch = state.epoch;
    let mut per_thread = BTreeMap::new();
    for (thread, a) in &state.mapping.assignments {
        if a.tiles.is_empty() || state.halted.contains(thread) {
            continue;
        }
        let mut vote = ThreadVote {
            checksums: BTreeMap::new(),
            majority: Majority::NoMajority,
            dissenters: BTreeSet::new(),
            delayed: BTreeSet::new(),
            timed_out: BTreeSet::new(),
            absent: BTreeSet::new(),
        };
        for &tile in &a.tiles {
            match participation(state, thread, tile)? {
                Participation::Absent => {
                    vote.absent.insert(tile);
                }
                Participation::TimedOut => {
                    vote.timed_out.insert(tile);
                }
                Participation::Writes { delayed } => {
                    let entry = state
                        .validation
                        .get(&tile)
                        .and_then(|vm| vm.read(thread))
                        .filter(|e| e.epoch == epoch);
                    match entry {
                        Some(e) => {
                            vote.checksums.insert(tile, e.checksum);
                        }
                        None => {
                            vote.timed_out.insert(tile);
                        }
                    }
                    if delayed {
                        vote.delayed.insert(tile);
                    }
                }
            }
        }
        let reporting = vote.checksums.len() + vote.timed_out.len();
        if reporting == 0 {
            continue;
        }
        vote.majority = majority(vote.checksums.values(), reporting);
        vote.dissenters = match vote.majority {
            Majority::Agreed(d) => vote
                .checksums
                .iter()
                .filter(|(_, c)| **c != d)
                .map(|(t, _)| *t)
                .chain(vote.timed_out.iter().copied())
                .collect(),
            Majority::NoMajority => vote
                .checksums
                .keys()
                .chain(vote.timed_out.iter())
                .copied()
                .collect(),
        };
        per_thread.insert(thread.clone(), vote);
    }
    Ok(CheckpointReport {
        epoch,
        trigger,
        per_thread,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecoveryAction {
    /// `tile` adopted the majority state read from `source`. Adoption by a
    /// rejoining replica is not `counted` as a fault.
    Synchronize {
        thread: ThreadId,
        tile: TileId,
        source: TileId,
        digest: Digest,
        counted: bool,
    },
    /// No majority: the thread halts and every voting host needs repair.
    Escalate {
        thread: ThreadId,
        tiles: BTreeSet<TileId>,
    },
}

/// Applies the Stage 1 response to `report`.
pub fn resolve_disagreement(
    state: &mut SystemState,
    report: &CheckpointReport,
) -> Result<Vec<RecoveryAction>> {
    if report.epoch != state.epoch {
        return Err(Error::EpochMismatch {
            report: report.epoch,
            state: state.epoch,
        });
    }
    let mut actions = Vec::new();
    for (thread, vote) in &report.per_thread {
        match vote.majority {
            Majority::Agreed(digest) => {
                state.last_majority.insert(thread.clone(), digest);
                let Some(source) = vote
                    .checksums
                    .iter()
                    .find(|(_, d)| **d == digest)
                    .map(|(t, _)| *t)
                else {
                    continue;
                };
                let agreed = state.divergence_of(thread, source);
                for &tile in &vote.dissenters {
                    adopt(state, thread, tile, digest, agreed)?;
                    let t = state.tile_mut(tile)?;
                    t.fault_counter += 1;
                    if t.health == TileHealth::Healthy {
                        t.set_health(TileHealth::Suspect);
                    }
                    state.metrics.dissents += 1;
                    state.metrics.synchronizations += 1;
                    actions.push(RecoveryAction::Synchronize {
                        thread: thread.clone(),
                        tile,
                        source,
                        digest,
                        counted: true,
                    });
                }
                for &tile in &vote.absent {
                    let key = (thread.clone(), tile);
                    if state.rejoining.contains(&key) && state.tile(tile)?.health.is_running() {
                        state.rejoining.remove(&key);
                        adopt(state, thread, tile, digest, agreed)?;
                        state.metrics.synchronizations += 1;
                        actions.push(RecoveryAction::Synchronize {
                            thread: thread.clone(),
                            tile,
                            source,
                            digest,
                            counted: false,
                        });
                    }
                }
            }
            Majority::NoMajority => {
                state.halted.insert(thread.clone());
                for &tile in &vote.dissenters {
                    let t = state.tile_mut(tile)?;
                    t.fault_counter += 1;
                    if t.health == TileHealth::Healthy {
                        t.set_health(TileHealth::Suspect);
                    }
                    state.metrics.dissents += 1;
                }
                state.metrics.escalations += 1;
                actions.push(RecoveryAction::Escalate {
                    thread: thread.clone(),
                    tiles: vote.dissenters.clone(),
                });
            }
        }
    }
    Ok(actions)
}

fn adopt(
    state: &mut SystemState,
    thread: &ThreadId,
    tile: TileId,
    digest: Digest,
    divergence: u64,
) -> Result<()> {
    state.set_divergence(thread, tile, divergence);
    let epoch = state.epoch;
    let vm = state
        .validation
        .get_mut(&tile)
        .ok_or(Error::UnknownTile(tile))?;
    if vm.read(thread).is_some_and(|e| e.epoch == epoch) {
        vm.write_synchronized(tile, thread, digest)?;
    } else {
        vm.write_checksum(tile, thread, digest, epoch)?;
    }
    Ok(())
}

/// Adds the incorrect-output window of one corrupted replica of `thread`.
pub fn record_exposure(
    state: &mut SystemState,
    thread: &ThreadId,
    fault_time: SimTime,
    resolution_time: SimTime,
) {
    let span = resolution_time.since(fault_time);
    *state.metrics.exposure.entry(thread.clone()).or_default() += span;
}

/// Adds the window between a fault on `tile` and its resolution to the
/// exposure of every thread hosted there. Returns the per-thread window, zero
/// when the tile hosts nothing.
pub fn io_exposure(
    state: &mut SystemState,
    tile: TileId,
    fault_time: SimTime,
    resolution_time: SimTime,
) -> SimDuration {
    let hosted: Vec<ThreadId> = state.mapping.threads_on(tile).cloned().collect();
    for thread in &hosted {
        record_exposure(state, thread, fault_time, resolution_time);
    }
    if hosted.is_empty() {
        SimDuration::ZERO
    } else {
        resolution_time.since(fault_time)
    }
}
