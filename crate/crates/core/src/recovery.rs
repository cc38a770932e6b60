//! Tile repair ladder run by the supervisor.
//!
//! A tile that keeps disagreeing is reconfigured in the background, its
//! partitions validated and self-tested, retried with differently routed
//! configuration variants, and finally subjected to a full reboot of all
//! tiles. A tile that still fails is declared permanently defective.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lockstep::{CheckpointReport, Majority};
use crate::model::{SystemState, ThreadId, TileHealth, TileId};
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FaultNature {
    TransientConfig,
    TransientState,
    PermanentLogic,
    PermanentMemory,
}

impl FaultNature {
    pub fn is_transient(self) -> bool {
        matches!(
            self,
            FaultNature::TransientConfig | FaultNature::TransientState
        )
    }
}

/// Hidden truth about a fault, visible only to the injection engine and to
/// the validation step's outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultGroundTruth {
    pub tile: TileId,
    pub nature: FaultNature,
    /// Variants whose routing cannot avoid the defect.
    pub affected_variants: BTreeSet<u32>,
}

impl FaultGroundTruth {
    /// Whether the partition check passes with `variant` loaded.
    pub fn partitions_pass(&self, variant: u32) -> bool {
        match self.nature {
            FaultNature::PermanentLogic => !self.affected_variants.contains(&variant),
            _ => true,
        }
    }

    /// Whether the memory and peripheral self-test passes.
    pub fn self_test_passes(&self) -> bool {
        self.nature != FaultNature::PermanentMemory
    }

    /// Whether the fault keeps corrupting replica state while `variant` is loaded.
    pub fn corrupts(&self, variant: u32) -> bool {
        match self.nature {
            FaultNature::TransientState => false,
            FaultNature::TransientConfig | FaultNature::PermanentMemory => true,
            FaultNature::PermanentLogic => self.affected_variants.contains(&variant),
        }
    }
}

/// Outcome of the post-reconfiguration checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub partitions: bool,
    pub self_test: bool,
}

impl CheckResult {
    pub fn passed(self) -> bool {
        self.partitions && self.self_test
    }
}

/// Partition validation and self-test against every fault on the tile.
pub fn validate_and_selftest<'a>(
    truths: impl IntoIterator<Item = &'a FaultGroundTruth> + Clone,
    variant: u32,
) -> CheckResult {
    CheckResult {
        partitions: truths
            .clone()
            .into_iter()
            .all(|t| t.partitions_pass(variant)),
        self_test: truths.into_iter().all(|t| t.self_test_passes()),
    }
}

/// Persistent faults per tile, keyed by fault id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    faults: BTreeMap<TileId, BTreeMap<u64, FaultGroundTruth>>,
}

impl GroundTruth {
    pub fn add(&mut self, fault: u64, truth: FaultGroundTruth) {
        self.faults
            .entry(truth.tile)
            .or_default()
            .insert(fault, truth);
    }

    pub fn on_tile(&self, tile: TileId) -> impl Iterator<Item = (u64, &FaultGroundTruth)> + Clone {
        self.faults
            .get(&tile)
            .into_iter()
            .flat_map(|m| m.iter().map(|(k, v)| (*k, v)))
    }

    pub fn check(&self, tile: TileId, variant: u32) -> CheckResult {
        validate_and_selftest(self.on_tile(tile).map(|(_, t)| t), variant)
    }

    /// Faults on `tile` that corrupt replicas with `variant` loaded.
    pub fn corrupting(&self, tile: TileId, variant: u32) -> Vec<u64> {
        self.on_tile(tile)
            .filter(|(_, t)| t.corrupts(variant))
            .map(|(id, _)| id)
            .collect()
    }

    /// Drops transient faults on `tile`, returning their ids.
    pub fn clear_transient(&mut self, tile: TileId) -> Vec<u64> {
        let Some(m) = self.faults.get_mut(&tile) else {
            return Vec::new();
        };
        let cleared: Vec<u64> = m
            .iter()
            .filter(|(_, t)| t.nature.is_transient())
            .map(|(k, _)| *k)
            .collect();
        for id in &cleared {
            m.remove(id);
        }
        cleared
    }

    /// Drops every fault on `tile`, returning their ids.
    pub fn clear_all(&mut self, tile: TileId) -> Vec<u64> {
        self.faults
            .remove(&tile)
            .map(|m| m.into_keys().collect())
            .unwrap_or_default()
    }

    pub fn tiles(&self) -> impl Iterator<Item = TileId> + '_ {
        self.faults
            .iter()
            .filter(|(_, m)| !m.is_empty())
            .map(|(t, _)| *t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LadderStep {
    PartialReconfig,
    Validate,
    SelfTest,
    VariantRetry,
    FullReconfig,
    Escalated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadderConfig {
    pub attempts_per_variant: u32,
    pub partial_reconfig_latency: SimDuration,
    pub full_reboot_latency: SimDuration,
    /// Whether a full reconfiguration is tried once all variants failed.
    pub full_reconfig: bool,
    /// Dissents within the window that send a tile to repair.
    pub dissent_threshold: u32,
    /// Window length in checkpoints.
    pub dissent_window: u64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        LadderConfig {
            attempts_per_variant: 2,
            partial_reconfig_latency: SimDuration::from_millis(200),
            full_reboot_latency: SimDuration::from_millis(1_500),
            full_reconfig: true,
            dissent_threshold: 3,
            dissent_window: 10,
        }
    }
}

/// Progress of one tile's fault episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairLadderState {
    pub tile: TileId,
    pub step: LadderStep,
    pub attempts_per_variant: u32,
    pub variants_available: u32,
    /// Partial reconfigurations performed so far.
    pub attempts: u32,
    pub start_variant: u32,
    pub history: Vec<LadderStep>,
}

impl RepairLadderState {
    pub fn new(
        tile: TileId,
        attempts_per_variant: u32,
        variants_available: u32,
        current_variant: u32,
    ) -> Self {
        RepairLadderState {
            tile,
            step: LadderStep::PartialReconfig,
            attempts_per_variant: attempts_per_variant.max(1),
            variants_available: variants_available.max(1),
            attempts: 0,
            start_variant: current_variant,
            history: Vec::new(),
        }
    }

    pub fn max_attempts(&self) -> u32 {
        self.attempts_per_variant * self.variants_available
    }

    /// Variant to load for the next partial reconfiguration.
    pub fn next_variant(&self) -> u32 {
        (self.start_variant + self.attempts / self.attempts_per_variant) % self.variants_available
    }

    pub fn enter(&mut self, step: LadderStep) {
        debug_assert!(
            step > self.step
                || (step == self.step && self.history.is_empty())
                || step == LadderStep::VariantRetry,
            "ladder moved back from {:?} to {:?}",
            self.step,
            step
        );
        self.step = step;
        self.history.push(step);
    }

    pub fn is_done(&self) -> bool {
        self.step == LadderStep::Escalated
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepairOutcome {
    /// Reconfiguration is running until the given time.
    Started {
        until: SimTime,
        variant: u32,
    },
    Recovered,
    /// The checks failed and another variant will be tried.
    RetryVariant {
        check: CheckResult,
    },
    /// All variants failed; a full reconfiguration is next.
    NeedsFullReconfig {
        check: CheckResult,
    },
    Escalated,
    AlreadyDefective,
}

/// Starts a partial reconfiguration of `tile` with the ladder's next variant.
pub fn attempt_partial_reconfiguration(
    state: &mut SystemState,
    ladder: &mut RepairLadderState,
    latency: SimDuration,
) -> Result<RepairOutcome> {
    let tile = ladder.tile;
    let now = state.time;
    let t = state.tile_mut(tile)?;
    if t.health == TileHealth::PermanentlyDefective {
        return Ok(RepairOutcome::AlreadyDefective);
    }
    let variant = ladder.next_variant();
    if ladder.history.is_empty() {
        ladder.enter(LadderStep::PartialReconfig);
    } else {
        ladder.enter(LadderStep::VariantRetry);
    }
    t.set_health(TileHealth::Reconfiguring);
    t.variant_index = variant;
    Ok(RepairOutcome::Started {
        until: now + latency,
        variant,
    })
}

/// Finishes a partial reconfiguration: transient faults are gone, the checks
/// decide whether the tile may rejoin.
pub fn complete_partial_reconfiguration(
    state: &mut SystemState,
    ladder: &mut RepairLadderState,
    truth: &mut GroundTruth,
    full_reconfig_enabled: bool,
) -> Result<(RepairOutcome, Vec<u64>)> {
    let tile = ladder.tile;
    let cleared = truth.clear_transient(tile);
    let variant = state.tile(tile)?.variant_index;
    let check = truth.check(tile, variant);
    if ladder.step == LadderStep::PartialReconfig {
        ladder.enter(LadderStep::Validate);
        if check.partitions {
            ladder.enter(LadderStep::SelfTest);
        }
    }
    ladder.attempts += 1;
    let t = state.tile_mut(tile)?;
    if check.passed() {
        t.set_health(TileHealth::Healthy);
        t.fault_counter = 0;
        return Ok((RepairOutcome::Recovered, cleared));
    }
    t.set_health(TileHealth::Suspect);
    if ladder.attempts < ladder.max_attempts() {
        Ok((RepairOutcome::RetryVariant { check }, cleared))
    } else if full_reconfig_enabled {
        ladder.enter(LadderStep::FullReconfig);
        Ok((RepairOutcome::NeedsFullReconfig { check }, cleared))
    } else {
        ladder.enter(LadderStep::Escalated);
        Ok((RepairOutcome::Escalated, cleared))
    }
}

/// Puts every non-defective tile into reconfiguration.
pub fn full_reconfiguration(state: &mut SystemState, latency: SimDuration) -> RepairOutcome {
    for t in &mut state.tiles {
        if t.health != TileHealth::PermanentlyDefective {
            t.set_health(TileHealth::Reconfiguring);
        }
    }
    RepairOutcome::Started {
        until: state.time + latency,
        variant: 0,
    }
}

/// Ends a full reboot. Transient faults are cleared everywhere; each tile is
/// checked with its loaded variant. Returns the tiles that failed and the
/// ids of cleared faults.
pub fn complete_full_reconfiguration(
    state: &mut SystemState,
    truth: &mut GroundTruth,
) -> (BTreeMap<TileId, CheckResult>, Vec<u64>) {
    let mut failed = BTreeMap::new();
    let mut cleared = Vec::new();
    for t in &mut state.tiles {
        if t.health == TileHealth::PermanentlyDefective {
            continue;
        }
        cleared.extend(truth.clear_transient(t.id));
        let check = truth.check(t.id, t.variant_index);
        if check.passed() {
            t.set_health(TileHealth::Healthy);
            t.fault_counter = 0;
        } else {
            t.set_health(TileHealth::Suspect);
            failed.insert(t.id, check);
        }
    }
    (failed, cleared)
}

/// Declares `tile` permanently defective and takes its replicas out of the
/// mapping. Returns the threads that lost a replica.
pub fn escalate_to_stage3(state: &mut SystemState, tile: TileId) -> Result<Vec<ThreadId>> {
    let t = state.tile_mut(tile)?;
    if t.health == TileHealth::PermanentlyDefective {
        return Err(Error::AlreadyDefective(tile));
    }
    t.set_health(TileHealth::PermanentlyDefective);
    let lost: Vec<ThreadId> = state.mapping.threads_on(tile).cloned().collect();
    state.mapping = state.mapping.without_tile(tile);
    for thread in &lost {
        state.forget_replica(thread, tile);
    }
    if let Some(vm) = state.validation.get_mut(&tile) {
        vm.retain(tile, |_| false)?;
    }
    Ok(lost)
}

/// Why a tile entered the repair queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueueReason {
    NoMajority,
    RepeatedDissent,
    FailedRevalidation,
}

/// Supervisor bookkeeping: dissent windows, the FIFO repair queue and the
/// ladder of each open episode.
#[derive(Debug, Clone, Default)]
pub struct Supervisor {
    pub config: LadderConfig,
    pub queue: VecDeque<TileId>,
    pub active: Option<TileId>,
    pub ladders: BTreeMap<TileId, RepairLadderState>,
    windows: BTreeMap<TileId, VecDeque<u64>>,
    pub full_reboot_in_progress: bool,
}

impl Supervisor {
    pub fn new(config: LadderConfig) -> Self {
        Supervisor {
            config,
            ..Default::default()
        }
    }

    pub fn is_queued(&self, tile: TileId) -> bool {
        self.active == Some(tile) || self.queue.contains(&tile)
    }

    /// Opens an episode for `tile` unless one is already open.
    pub fn enqueue(&mut self, state: &SystemState, tile: TileId) -> Result<bool> {
        if self.is_queued(tile) || state.tile(tile)?.health == TileHealth::PermanentlyDefective {
            return Ok(false);
        }
        let t = state.tile(tile)?;
        self.ladders.entry(tile).or_insert_with(|| {
            RepairLadderState::new(
                tile,
                self.config.attempts_per_variant,
                t.variants,
                t.variant_index,
            )
        });
        self.queue.push_back(tile);
        self.windows.remove(&tile);
        Ok(true)
    }

    /// Updates dissent windows from a resolved checkpoint and returns the
    /// tiles that must enter the repair ladder, and those cleared of suspicion.
    pub fn observe(
        &mut self,
        state: &SystemState,
        report: &CheckpointReport,
    ) -> (Vec<(TileId, QueueReason)>, Vec<TileId>) {
        let epoch = report.epoch;
        let mut dissenting: BTreeSet<TileId> = BTreeSet::new();
        let mut no_majority: BTreeSet<TileId> = BTreeSet::new();
        for vote in report.per_thread.values() {
            match vote.majority {
                Majority::Agreed(_) => dissenting.extend(vote.dissenters.iter().copied()),
                Majority::NoMajority => no_majority.extend(vote.dissenters.iter().copied()),
            }
        }
        let mut enter = Vec::new();
        for &tile in &no_majority {
            if !self.is_queued(tile) {
                enter.push((tile, QueueReason::NoMajority));
            }
        }
        for &tile in &dissenting {
            if no_majority.contains(&tile) || self.is_queued(tile) {
                continue;
            }
            let w = self.windows.entry(tile).or_default();
            w.push_back(epoch);
            while w
                .front()
                .is_some_and(|e| e + self.config.dissent_window <= epoch)
            {
                w.pop_front();
            }
            if w.len() as u32 >= self.config.dissent_threshold {
                enter.push((tile, QueueReason::RepeatedDissent));
            }
        }
        let clean: Vec<TileId> = state
            .tiles
            .iter()
            .filter(|t| {
                t.health == TileHealth::Suspect
                    && !dissenting.contains(&t.id)
                    && !no_majority.contains(&t.id)
                    && !self.is_queued(t.id)
                    && !enter.iter().any(|(e, _)| *e == t.id)
            })
            .map(|t| t.id)
            .collect();
        (enter, clean)
    }

    /// Next tile to repair when the supervisor is idle.
    pub fn next(&mut self) -> Option<TileId> {
        if self.active.is_some() || self.full_reboot_in_progress {
            return None;
        }
        self.active = self.queue.pop_front();
        self.active
    }

    /// Closes the episode of `tile`.
    pub fn finish(&mut self, tile: TileId) -> Option<RepairLadderState> {
        if self.active == Some(tile) {
            self.active = None;
        }
        self.queue.retain(|t| *t != tile);
        self.ladders.remove(&tile)
    }
}
