//! Discrete-event engine: checkpoints, repairs, reallocation and fault
//! bookkeeping over simulated time.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, info};
use num_traits::Zero;

use crate::allocator::{
    apply_budget_gating, apply_replacement_strategy, map_threads_with, planning_tiles,
    precompute_replacement_strategies, AllocatorConfig, Infeasible, LostReplica,
    PerformanceProfile, ReplacementStrategy,
};
use crate::energy::{energy_over, to_f64, Gating, Power};
use crate::lockstep::{
    mix, resolve_disagreement, run_checkpoint, CheckpointTrigger, Majority, RecoveryAction,
    TriggerKind,
};
use crate::mapping::{diff, Assignment, FrequencyPlan, MappingEdit, SystemMapping};
use crate::metrics::{energy_joules, MetricsReport};
use crate::model::{
    replication_level, CriticalityClass, ExecutionMode, SystemState, ThreadId, ThreadSpec, Tile,
    TileHealth, TileId,
};
use crate::recovery::{
    attempt_partial_reconfiguration, complete_full_reconfiguration,
    complete_partial_reconfiguration, escalate_to_stage3, full_reconfiguration, FaultGroundTruth,
    FaultNature, GroundTruth, QueueReason, RepairOutcome, Supervisor,
};
use crate::time::{SimDuration, SimTime};
use crate::trace::{TraceEvent, TraceRecord};

use super::fault::{FaultDisposition, FaultEvent, FaultKind, MemoryRegion};
use super::scenario::{Latencies, ScenarioConfig, ScenarioError};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] crate::Error),
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: SystemState,
    pub trace: Vec<TraceRecord>,
    pub report: MetricsReport,
}

/// Runs `scenario` to its horizon. `seed` overrides the scenario's `rng_seed`.
pub fn run(scenario: &ScenarioConfig, seed: Option<u64>) -> Result<RunOutput, RunError> {
    let mut engine = Engine::new(scenario, seed)?;
    engine.run_to_end()?;
    Ok(engine.finish())
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    RepairDone(TileId),
    FullRebootDone,
    Fault(usize),
    ProfileChange(usize),
    Checkpoint(u64),
    Induced(String),
    StrategyRecompute(u64),
    End,
}

impl Event {
    fn priority(&self) -> u8 {
        match self {
            Event::RepairDone(_) | Event::FullRebootDone => 0,
            Event::Fault(_) => 1,
            Event::ProfileChange(_) => 2,
            Event::Checkpoint(_) | Event::Induced(_) => 3,
            Event::StrategyRecompute(_) => 4,
            Event::End => 9,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct OpenFault {
    worst: Option<FaultDisposition>,
    replicas: BTreeSet<(ThreadId, TileId)>,
    /// Tiles still holding ground truth for this fault.
    ground: BTreeSet<TileId>,
    closed: bool,
}

type Replica = (ThreadId, TileId);

pub struct Engine {
    name: String,
    seed: u64,
    cfg: AllocatorConfig,
    profile: PerformanceProfile,
    period: SimDuration,
    end: SimTime,
    latencies: Latencies,
    state: SystemState,
    truth: GroundTruth,
    supervisor: Supervisor,
    queue: BTreeMap<(SimTime, u8, u64), Event>,
    seq: u64,
    trace: Vec<TraceRecord>,
    schedule: Vec<FaultEvent>,
    profile_changes: Vec<PerformanceProfile>,
    checkpoint_gen: u64,
    faults: BTreeMap<u64, OpenFault>,
    next_fault: u64,
    links: BTreeMap<Replica, BTreeSet<u64>>,
    exposed: BTreeMap<Replica, SimTime>,
    down_since: BTreeMap<ThreadId, SimTime>,
    replication: BTreeMap<ThreadId, usize>,
    active_count: Option<usize>,
    health: BTreeMap<TileId, TileHealth>,
    tile_power: BTreeMap<TileId, Power>,
    total_power: Power,
    last_time: SimTime,
    strategies: BTreeMap<TileId, ReplacementStrategy>,
    strategy_gen: u64,
    pending_loss: Vec<(TileId, Vec<LostReplica>)>,
    pending_profile: Option<PerformanceProfile>,
    reboot_trigger: Option<TileId>,
    finished: bool,
}

/// Maps `threads`, descheduling Essential threads the allocator cannot place
/// until the rest fits.
fn plan_mapping(
    threads: &[ThreadSpec],
    tiles: &[Tile],
    profile: &PerformanceProfile,
    cfg: &AllocatorConfig,
) -> SystemMapping {
    let mut considered: Vec<ThreadSpec> = threads.to_vec();
    let mut dropped = Vec::new();
    loop {
        match map_threads_with(&considered, tiles, profile, cfg) {
            Ok(mut m) => {
                for d in dropped {
                    m.assignments.insert(d, Assignment::descheduled());
                }
                return m;
            }
            Err(Infeasible { thread }) => {
                info!("no room for Essential thread {thread}; descheduling it");
                considered.retain(|t| t.id != thread);
                dropped.push(thread);
            }
        }
    }
}

impl Engine {
    pub fn new(scenario: &ScenarioConfig, seed: Option<u64>) -> Result<Self, RunError> {
        scenario.validate(seed)?;
        let seed = seed.or(scenario.rng_seed).unwrap_or(0);
        let tiles = scenario.build_tiles();
        let threads = scenario.threads.clone();
        let profile = scenario.build_profile()?;
        let cfg = AllocatorConfig {
            power: scenario.power,
            frequency_levels: scenario.frequency_levels(),
        };
        let mapping = match scenario.initial() {
            Some(mut m) => {
                if profile.power_budget_mw.is_some() {
                    apply_budget_gating(&mut m, &tiles, &threads);
                }
                m
            }
            None => plan_mapping(&threads, &tiles, &profile, &cfg),
        };
        let profile_changes = scenario
            .profile_changes
            .iter()
            .map(|c| {
                let mut s = scenario.clone();
                s.profile = c.profile.clone();
                s.build_profile()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut e = Engine {
            name: scenario.name.clone(),
            seed,
            cfg,
            profile,
            period: scenario.checkpoint_period,
            end: SimTime::ZERO + scenario.duration,
            latencies: scenario.latencies.clone(),
            state: SystemState::new(tiles, threads, mapping),
            truth: GroundTruth::default(),
            supervisor: Supervisor::new(scenario.ladder.clone()),
            queue: BTreeMap::new(),
            seq: 0,
            trace: Vec::new(),
            schedule: scenario.fault_schedule(seed),
            profile_changes,
            checkpoint_gen: 0,
            faults: BTreeMap::new(),
            next_fault: 1,
            links: BTreeMap::new(),
            exposed: BTreeMap::new(),
            down_since: BTreeMap::new(),
            replication: BTreeMap::new(),
            active_count: None,
            health: BTreeMap::new(),
            tile_power: BTreeMap::new(),
            total_power: Power::zero(),
            last_time: SimTime::ZERO,
            strategies: BTreeMap::new(),
            strategy_gen: 0,
            pending_loss: Vec::new(),
            pending_profile: None,
            reboot_trigger: None,
            finished: false,
        };
        e.health = e.state.tiles.iter().map(|t| (t.id, t.health)).collect();
        e.emit(TraceEvent::RunStarted {
            scenario: e.name.clone(),
            seed,
            profile: e.profile.name.clone(),
            tiles: e.state.tiles.len(),
            threads: e.state.threads.len(),
        });
        e.emit(TraceEvent::MappingComputed {
            profile: e.profile.name.clone(),
            mapping: e.state.mapping.clone(),
        });
        let descheduled: Vec<ThreadId> = e
            .state
            .mapping
            .assignments
            .iter()
            .filter(|(_, a)| a.mode == ExecutionMode::Descheduled)
            .map(|(t, _)| t.clone())
            .collect();
        for thread in descheduled {
            e.emit(TraceEvent::ThreadDescheduled { thread });
        }
        for tile in e.state.mapping.idle_gated.clone() {
            e.emit(TraceEvent::TileIdleGating {
                tile,
                enabled: true,
            });
        }

        for i in 0..e.schedule.len() {
            let at = SimTime::ZERO + e.schedule[i].at;
            e.push(at, Event::Fault(i));
        }
        for (i, c) in scenario.profile_changes.iter().enumerate() {
            e.push(SimTime::ZERO + c.at, Event::ProfileChange(i));
        }
        for at in &scenario.induced_checkpoints {
            e.push(SimTime::ZERO + *at, Event::Induced("scheduled".into()));
        }
        let first = SimTime::ZERO + e.period;
        if first <= e.end {
            e.push(first, Event::Checkpoint(0));
        }
        e.schedule_recompute();
        e.push(e.end, Event::End);
        e.after_event()?;
        Ok(e)
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn now(&self) -> SimTime {
        self.state.time
    }

    pub fn profile(&self) -> &PerformanceProfile {
        &self.profile
    }

    /// Strategies currently precomputed per tile.
    pub fn strategies(&self) -> &BTreeMap<TileId, ReplacementStrategy> {
        &self.strategies
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn push(&mut self, at: SimTime, ev: Event) {
        self.seq += 1;
        self.queue.insert((at, ev.priority(), self.seq), ev);
    }

    fn emit(&mut self, event: TraceEvent) {
        debug!("{} {:?}", self.state.time, event);
        self.trace.push(TraceRecord {
            time: self.state.time,
            epoch: self.state.epoch,
            event,
        });
    }

    /// Processes the next pending event. Returns false once the run has ended.
    pub fn step(&mut self) -> Result<bool, RunError> {
        if self.finished {
            return Ok(false);
        }
        let Some(((time, _, _), ev)) = self.queue.pop_first() else {
            self.finished = true;
            return Ok(false);
        };
        let stale = match &ev {
            Event::Checkpoint(g) => *g != self.checkpoint_gen,
            Event::StrategyRecompute(g) => *g != self.strategy_gen,
            _ => false,
        };
        if stale {
            return Ok(true);
        }
        self.advance(time);
        match ev {
            Event::Fault(i) => {
                let f = self.schedule[i].clone();
                self.inject(f)?;
                return Ok(true);
            }
            Event::Checkpoint(_) => {
                self.checkpoint(CheckpointTrigger::timed())?;
                let next = self.state.time + self.period;
                if next <= self.end {
                    let g = self.checkpoint_gen;
                    self.push(next, Event::Checkpoint(g));
                }
            }
            Event::Induced(reason) => {
                self.checkpoint(CheckpointTrigger::induced(reason))?;
                self.checkpoint_gen += 1;
                let next = self.state.time + self.period;
                if next <= self.end {
                    let g = self.checkpoint_gen;
                    self.push(next, Event::Checkpoint(g));
                }
            }
            Event::RepairDone(tile) => self.repair_done(tile)?,
            Event::FullRebootDone => self.full_reboot_done()?,
            Event::ProfileChange(i) => self.pending_profile = Some(self.profile_changes[i].clone()),
            Event::StrategyRecompute(_) => self.recompute_strategies(),
            Event::End => {
                self.end_run();
                return Ok(false);
            }
        }
        self.after_event()?;
        Ok(true)
    }

    /// Processes every event up to and including time `t`.
    pub fn run_until(&mut self, t: SimTime) -> Result<(), RunError> {
        while !self.finished
            && self
                .queue
                .first_key_value()
                .is_some_and(|((at, _, _), _)| *at <= t)
        {
            self.step()?;
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<(), RunError> {
        while self.step()? {}
        Ok(())
    }

    /// Runs to the horizon if needed and hands over the results.
    pub fn finish(mut self) -> RunOutput {
        if !self.finished {
            // Errors cannot occur once the scenario validated; stop quietly if one does.
            let _ = self.run_to_end();
        }
        let report = self.report();
        RunOutput {
            state: self.state,
            trace: self.trace,
            report,
        }
    }

    fn advance(&mut self, time: SimTime) {
        let span = time.since(self.last_time);
        self.state.metrics.energy += energy_over(self.total_power, span);
        self.state.time = time;
        self.last_time = time;
    }

    // ----- faults -----

    /// Injects `fault` at the current simulated time; its `at` is ignored.
    pub fn inject(&mut self, fault: FaultEvent) -> Result<(), RunError> {
        let id = self.next_fault;
        self.next_fault += 1;
        self.state.metrics.faults_injected += 1;
        self.faults.insert(id, OpenFault::default());
        let tiles: BTreeSet<TileId> = fault.tiles().into_iter().collect();
        self.emit(TraceEvent::FaultInjected {
            fault: id,
            kind: fault.kind.name().to_string(),
            tiles: tiles.clone(),
        });
        let live = |s: &Self, t: TileId| {
            s.state
                .tile(t)
                .is_ok_and(|t| t.health != TileHealth::PermanentlyDefective)
        };
        match &fault.kind {
            FaultKind::TransientState => {
                for &tile in &tiles {
                    if self.state.tile(tile)?.health.is_running() {
                        for thread in self.corruptible(tile) {
                            self.corrupt(&thread, tile, id);
                        }
                    }
                }
            }
            FaultKind::TransientConfig
            | FaultKind::PermanentMemory
            | FaultKind::PermanentLogic { .. } => {
                let Some(tile) = fault.tile.filter(|t| live(self, *t)) else {
                    self.after_event()?;
                    self.maybe_close(id);
                    return Ok(());
                };
                {
                    let nature = match fault.kind {
                        FaultKind::TransientConfig => FaultNature::TransientConfig,
                        FaultKind::PermanentMemory => FaultNature::PermanentMemory,
                        _ => FaultNature::PermanentLogic,
                    };
                    let affected = match &fault.kind {
                        FaultKind::PermanentLogic { variants: Some(v) } => v.clone(),
                        _ => (0..self.state.tile(tile)?.variants).collect(),
                    };
                    self.add_truth(id, tile, nature, affected)?;
                }
            }
            FaultKind::Mbu { span } => {
                for &tile in span {
                    if live(self, tile) {
                        let affected = (0..self.state.tile(tile)?.variants).collect();
                        self.add_truth(id, tile, FaultNature::TransientConfig, affected)?;
                    }
                }
            }
            FaultKind::EccSyndrome { region } => {
                match region {
                    MemoryRegion::TileLocal => self.state.metrics.ecc_tile_local += 1,
                    MemoryRegion::MainMemory => self.state.metrics.ecc_main_memory += 1,
                    MemoryRegion::ValidationMemory => self.state.metrics.ecc_validation += 1,
                }
                if *region != MemoryRegion::TileLocal {
                    self.emit(TraceEvent::EccSyndromeReported {
                        fault: id,
                        region: *region,
                        tile: fault.tile,
                    });
                }
                self.raise(id, FaultDisposition::Masked);
            }
        }
        self.after_event()?;
        self.maybe_close(id);
        Ok(())
    }

    fn add_truth(
        &mut self,
        id: u64,
        tile: TileId,
        nature: FaultNature,
        affected_variants: BTreeSet<u32>,
    ) -> Result<(), RunError> {
        self.truth.add(
            id,
            FaultGroundTruth {
                tile,
                nature,
                affected_variants,
            },
        );
        self.faults.entry(id).or_default().ground.insert(tile);
        Ok(())
    }

    /// Threads whose replica on `tile` can currently absorb corruption.
    fn corruptible(&self, tile: TileId) -> Vec<ThreadId> {
        self.state
            .mapping
            .threads_on(tile)
            .filter(|t| {
                !self.state.halted.contains(*t)
                    && !self.state.rejoining.contains(&((*t).clone(), tile))
            })
            .cloned()
            .collect()
    }

    fn corrupt(&mut self, thread: &ThreadId, tile: TileId, fault: u64) {
        let key = (thread.clone(), tile);
        if self.links.get(&key).is_some_and(|s| s.contains(&fault)) {
            return;
        }
        let token = mix(fault, tile.0 as u64) | 1;
        let d = self.state.divergence_of(thread, tile);
        let next = if d == 0 { token } else { mix(d, token) | 1 };
        self.state.set_divergence(thread, tile, next);
        self.links.entry(key.clone()).or_default().insert(fault);
        if let Some(f) = self.faults.get_mut(&fault) {
            f.replicas.insert(key);
        }
    }

    /// Persistent faults keep corrupting replicas on running tiles.
    fn apply_persistent_corruption(&mut self) {
        let tiles: Vec<TileId> = self.truth.tiles().collect();
        for tile in tiles {
            let Ok(t) = self.state.tile(tile) else {
                continue;
            };
            if !t.health.is_running() {
                continue;
            }
            let ids: Vec<u64> = self
                .truth
                .corrupting(tile, t.variant_index)
                .into_iter()
                .filter(|id| self.faults.get(id).is_some_and(|f| !f.closed))
                .collect();
            if ids.is_empty() {
                continue;
            }
            for thread in self.corruptible(tile) {
                for &id in &ids {
                    self.corrupt(&thread, tile, id);
                }
            }
        }
    }

    fn raise(&mut self, id: u64, d: FaultDisposition) {
        if let Some(f) = self.faults.get_mut(&id) {
            f.worst = Some(f.worst.map_or(d, |w| w.max(d)));
        }
    }

    fn maybe_close(&mut self, id: u64) {
        let Some(f) = self.faults.get_mut(&id) else {
            return;
        };
        if f.closed || !f.replicas.is_empty() || !f.ground.is_empty() {
            return;
        }
        f.closed = true;
        let disposition = f.worst.unwrap_or(FaultDisposition::NoEffect);
        self.close_with(id, disposition);
    }

    fn close_with(&mut self, id: u64, disposition: FaultDisposition) {
        *self
            .state
            .metrics
            .dispositions
            .entry(disposition)
            .or_default() += 1;
        self.emit(TraceEvent::FaultDisposition {
            fault: id,
            disposition,
        });
    }

    /// Ground truth for `ids` was removed, on `tile` or everywhere.
    fn close_ground(&mut self, ids: &[u64], tile: Option<TileId>, cause: FaultDisposition) {
        for &id in ids {
            if let Some(f) = self.faults.get_mut(&id) {
                match tile {
                    Some(t) => {
                        f.ground.remove(&t);
                    }
                    None => f.ground.clear(),
                }
            }
            self.raise(id, cause);
        }
        for &id in ids {
            self.maybe_close(id);
        }
    }

    /// The replica's corruption is gone, or so is the replica.
    fn end_replica(&mut self, key: &Replica, cause: FaultDisposition) {
        if let Some(since) = self.exposed.remove(key) {
            let span = self.state.time.since(since);
            *self
                .state
                .metrics
                .exposure
                .entry(key.0.clone())
                .or_default() += span;
            self.emit(TraceEvent::ExposureEnded {
                thread: key.0.clone(),
                tile: key.1,
            });
        }
        if let Some(ids) = self.links.remove(key) {
            for id in ids {
                if let Some(f) = self.faults.get_mut(&id) {
                    f.replicas.remove(key);
                }
                self.raise(id, cause);
                self.maybe_close(id);
            }
        }
    }

    fn refresh_exposure(&mut self) {
        let hosted: BTreeSet<Replica> = self
            .state
            .mapping
            .assignments
            .iter()
            .flat_map(|(t, a)| a.tiles.iter().map(move |tile| (t.clone(), *tile)))
            .collect();
        for (thread, m) in self.state.divergence.iter_mut() {
            m.retain(|tile, _| hosted.contains(&(thread.clone(), *tile)));
        }
        self.state.divergence.retain(|_, m| !m.is_empty());
        let current: BTreeSet<Replica> = self
            .state
            .divergence
            .iter()
            .flat_map(|(t, m)| m.keys().map(move |tile| (t.clone(), *tile)))
            .collect();
        let stale: BTreeSet<Replica> = self
            .exposed
            .keys()
            .chain(self.links.keys())
            .filter(|k| !current.contains(*k))
            .cloned()
            .collect();
        for key in stale {
            self.end_replica(&key, FaultDisposition::Masked);
        }
        for key in current {
            if !self.exposed.contains_key(&key) {
                self.exposed.insert(key.clone(), self.state.time);
                self.emit(TraceEvent::ExposureStarted {
                    thread: key.0,
                    tile: key.1,
                });
            }
        }
    }

    // ----- checkpoints -----

    fn checkpoint(&mut self, trigger: CheckpointTrigger) -> Result<(), RunError> {
        self.apply_persistent_corruption();
        self.refresh_exposure();
        let induced = trigger.kind == TriggerKind::SupervisorInduced;
        let reason = trigger.reason.clone();
        let report = run_checkpoint(&mut self.state, trigger)?;
        self.emit(TraceEvent::CheckpointStarted { induced, reason });
        for (thread, vote) in &report.per_thread {
            for (tile, digest) in &vote.checksums {
                self.emit(TraceEvent::ChecksumWritten {
                    thread: thread.clone(),
                    tile: *tile,
                    digest: *digest,
                });
            }
        }
        for (thread, vote) in &report.per_thread {
            if !vote.dissenters.is_empty() {
                self.emit(TraceEvent::DisagreementDetected {
                    thread: thread.clone(),
                    dissenters: vote.dissenters.clone(),
                    majority: matches!(vote.majority, Majority::Agreed(_)),
                });
            }
        }
        let actions = resolve_disagreement(&mut self.state, &report)?;
        for action in actions {
            match action {
                RecoveryAction::Synchronize {
                    thread,
                    tile,
                    source,
                    counted,
                    ..
                } => {
                    self.emit(TraceEvent::StateSynchronized {
                        thread: thread.clone(),
                        tile,
                        source,
                        counted,
                    });
                    self.charge_sync(&thread, tile)?;
                    if self.state.divergence_of(&thread, tile) == 0 {
                        let cause = if counted {
                            FaultDisposition::CorrectedStage1
                        } else {
                            FaultDisposition::Masked
                        };
                        self.end_replica(&(thread, tile), cause);
                    }
                }
                RecoveryAction::Escalate { thread, tiles } => {
                    self.emit(TraceEvent::EscalationRaised { thread, tiles });
                }
            }
        }
        let (enter, clean) = self.supervisor.observe(&self.state, &report);
        for (tile, reason) in enter {
            self.queue_repair(tile, reason)?;
        }
        for tile in clean {
            self.state.tile_mut(tile)?.set_health(TileHealth::Healthy);
        }
        self.apply_pending_losses()?;
        self.apply_pending_profile()?;
        Ok(())
    }

    fn charge_sync(&mut self, thread: &ThreadId, tile: TileId) -> Result<(), RunError> {
        let units = self.latencies.sync_cost_units;
        let energy = self
            .cfg
            .power
            .work_energy(self.state.tile(tile)?, units, self.period);
        self.state.metrics.energy += energy;
        self.state.metrics.sync_cost_units += units;
        self.emit(TraceEvent::SyncCharged {
            thread: thread.clone(),
            tile,
            energy,
        });
        Ok(())
    }

    // ----- repair ladder -----

    fn queue_repair(&mut self, tile: TileId, reason: QueueReason) -> Result<(), RunError> {
        if self.supervisor.enqueue(&self.state, tile)? {
            self.emit(TraceEvent::RepairQueued { tile, reason });
        }
        Ok(())
    }

    fn start_repairs(&mut self) -> Result<(), RunError> {
        while let Some(tile) = self.supervisor.next() {
            if !self.start_attempt(tile)? {
                self.supervisor.finish(tile);
            }
        }
        Ok(())
    }

    fn start_attempt(&mut self, tile: TileId) -> Result<bool, RunError> {
        let latency = self.supervisor.config.partial_reconfig_latency;
        let Some(ladder) = self.supervisor.ladders.get_mut(&tile) else {
            return Ok(false);
        };
        let attempt = ladder.attempts + 1;
        match attempt_partial_reconfiguration(&mut self.state, ladder, latency)? {
            RepairOutcome::Started { until, variant } => {
                self.emit(TraceEvent::RepairStarted {
                    tile,
                    variant,
                    attempt,
                    until,
                });
                self.push(until, Event::RepairDone(tile));
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    fn repair_done(&mut self, tile: TileId) -> Result<(), RunError> {
        let full = self.supervisor.config.full_reconfig;
        let Some(ladder) = self.supervisor.ladders.get_mut(&tile) else {
            return Ok(());
        };
        let (outcome, cleared) =
            complete_partial_reconfiguration(&mut self.state, ladder, &mut self.truth, full)?;
        let next_variant = ladder.next_variant();
        let variant = self.state.tile(tile)?.variant_index;
        self.close_ground(&cleared, Some(tile), FaultDisposition::RepairedStage2);
        let check = self.truth.check(tile, variant);
        self.emit(TraceEvent::ValidationResult {
            tile,
            variant,
            check,
        });
        match outcome {
            RepairOutcome::Recovered => {
                self.supervisor.finish(tile);
                // Permanent faults the new variant routes around no longer matter.
                let avoided: Vec<u64> = self
                    .truth
                    .on_tile(tile)
                    .filter(|(_, g)| !g.corrupts(variant))
                    .map(|(id, _)| id)
                    .collect();
                self.close_ground(&avoided, Some(tile), FaultDisposition::RepairedStage2);
                let hosted: Vec<ThreadId> = self.state.mapping.threads_on(tile).cloned().collect();
                for thread in hosted {
                    if !self.state.halted.contains(&thread) {
                        self.state.rejoining.insert((thread, tile));
                    }
                }
                self.push(self.state.time, Event::Induced(format!("{tile} rejoined")));
            }
            RepairOutcome::RetryVariant { .. } => {
                if next_variant != variant {
                    self.emit(TraceEvent::VariantSwitched {
                        tile,
                        variant: next_variant,
                    });
                }
                if !self.start_attempt(tile)? {
                    self.supervisor.finish(tile);
                }
            }
            RepairOutcome::NeedsFullReconfig { .. } => {
                self.supervisor.full_reboot_in_progress = true;
                self.reboot_trigger = Some(tile);
                let latency = self.supervisor.config.full_reboot_latency;
                if let RepairOutcome::Started { until, .. } =
                    full_reconfiguration(&mut self.state, latency)
                {
                    self.emit(TraceEvent::FullRebootStarted {
                        trigger: tile,
                        until,
                    });
                    self.push(until, Event::FullRebootDone);
                }
            }
            RepairOutcome::Escalated => self.stage3(tile)?,
            _ => {}
        }
        Ok(())
    }

    fn full_reboot_done(&mut self) -> Result<(), RunError> {
        self.supervisor.full_reboot_in_progress = false;
        let trigger = self.reboot_trigger.take();
        let (failed, cleared) = complete_full_reconfiguration(&mut self.state, &mut self.truth);
        self.close_ground(&cleared, None, FaultDisposition::RepairedStage2);
        self.emit(TraceEvent::FullRebootEnded {
            failed: failed.keys().copied().collect(),
        });
        for (tile, check) in &failed {
            let variant = self.state.tile(*tile)?.variant_index;
            self.emit(TraceEvent::ValidationResult {
                tile: *tile,
                variant,
                check: *check,
            });
        }
        // Every thread restarts from its last agreed state.
        let diverged: Vec<Replica> = self
            .state
            .divergence
            .iter()
            .flat_map(|(t, m)| m.keys().map(move |tile| (t.clone(), *tile)))
            .collect();
        for key in &diverged {
            self.state.set_divergence(&key.0, key.1, 0);
            self.end_replica(key, FaultDisposition::RepairedStage2);
        }
        self.state.halted.clear();
        self.state.rejoining.clear();
        if let Some(t) = trigger {
            if failed.contains_key(&t) {
                self.stage3(t)?;
            } else {
                self.supervisor.finish(t);
            }
        }
        for tile in failed.keys() {
            if Some(*tile) != trigger {
                self.queue_repair(*tile, QueueReason::FailedRevalidation)?;
            }
        }
        Ok(())
    }

    fn stage3(&mut self, tile: TileId) -> Result<(), RunError> {
        let lost = LostReplica::on_tile(&self.state.mapping, tile);
        self.supervisor.finish(tile);
        let threads = escalate_to_stage3(&mut self.state, tile)?;
        for thread in &threads {
            self.end_replica(&(thread.clone(), tile), FaultDisposition::PermanentStage3);
        }
        let ids = self.truth.clear_all(tile);
        self.close_ground(&ids, Some(tile), FaultDisposition::PermanentStage3);
        info!(
            "{tile} permanently defective; lost {} replicas",
            threads.len()
        );
        self.emit(TraceEvent::TilePermanentlyDefective {
            tile,
            lost: threads,
        });
        self.pending_loss.push((tile, lost));
        self.schedule_recompute();
        Ok(())
    }

    /// A halted thread restarts once none of its hosts awaits repair.
    fn resume_halted(&mut self) {
        if self.supervisor.full_reboot_in_progress {
            return;
        }
        let halted: Vec<ThreadId> = self.state.halted.iter().cloned().collect();
        for thread in halted {
            let hosts: Vec<TileId> = self.state.mapping.hosts(&thread).collect();
            let waiting = hosts.iter().any(|t| self.supervisor.is_queued(*t));
            let running = hosts
                .iter()
                .any(|t| self.state.tile(*t).is_ok_and(|t| t.health.is_running()));
            if waiting || !running {
                continue;
            }
            self.state.halted.remove(&thread);
            for tile in hosts {
                self.state.set_divergence(&thread, tile, 0);
                self.state.rejoining.remove(&(thread.clone(), tile));
                self.end_replica(&(thread.clone(), tile), FaultDisposition::RepairedStage2);
            }
        }
    }

    // ----- reallocation -----

    fn frequency_plan(&self) -> FrequencyPlan {
        planning_tiles(&self.state.tiles)
            .iter()
            .map(|t| (t.id, t.freq_level))
            .collect()
    }

    fn schedule_recompute(&mut self) {
        self.strategy_gen += 1;
        let at = self.state.time + self.latencies.strategy_recompute;
        let g = self.strategy_gen;
        self.push(at, Event::StrategyRecompute(g));
    }

    fn recompute_strategies(&mut self) {
        let mut fresh = precompute_replacement_strategies(&self.state, &self.profile, &self.cfg);
        // A loss awaiting the next checkpoint keeps the strategy computed for it.
        for (tile, _) in &self.pending_loss {
            if let Some(s) = self.strategies.remove(tile) {
                fresh.insert(*tile, s);
            }
        }
        self.strategies = fresh;
        self.emit(TraceEvent::StrategyPrecomputed {
            strategies: self.strategies.iter().map(|(t, s)| (*t, s.kind)).collect(),
            infeasible: self
                .strategies
                .iter()
                .filter(|(_, s)| s.infeasible)
                .map(|(t, _)| *t)
                .collect(),
        });
    }

    fn apply_pending_losses(&mut self) -> Result<(), RunError> {
        let losses = std::mem::take(&mut self.pending_loss);
        if losses.is_empty() {
            return Ok(());
        }
        for (tile, lost) in losses {
            let strategy = self.strategies.remove(&tile);
            let applied = apply_replacement_strategy(
                &self.state,
                tile,
                strategy.as_ref(),
                &lost,
                &self.profile,
                &self.cfg,
            );
            info!("{tile}: applying {} strategy", applied.kind);
            let old = self.state.mapping.clone();
            let (kind, precomputed, infeasible) =
                (applied.kind, applied.precomputed, applied.infeasible);
            let edits = self.install(applied.mapping, applied.freq, |edits| {
                TraceEvent::StrategyApplied {
                    tile,
                    kind,
                    precomputed,
                    infeasible,
                    edits: edits.to_vec(),
                }
            })?;
            self.emit_mode_reductions(&old);
            self.emit_edits(&edits);
        }
        self.schedule_recompute();
        Ok(())
    }

    fn apply_pending_profile(&mut self) -> Result<(), RunError> {
        let Some(next) = self.pending_profile.take() else {
            return Ok(());
        };
        let from = std::mem::replace(&mut self.profile, next);
        self.emit(TraceEvent::ProfileChanged {
            from: from.name,
            to: self.profile.name.clone(),
        });
        let mapping = plan_mapping(
            &self.state.threads,
            &self.state.tiles,
            &self.profile,
            &self.cfg,
        );
        let freq = self.frequency_plan();
        let old = self.state.mapping.clone();
        let header = TraceEvent::MappingComputed {
            profile: self.profile.name.clone(),
            mapping: mapping.clone(),
        };
        let edits = self.install(mapping, freq, |_| header)?;
        self.emit_mode_reductions(&old);
        self.emit_edits(&edits);
        self.schedule_recompute();
        Ok(())
    }

    /// Switches to `mapping`, announced by `header`. New replicas copy state
    /// from a surviving host.
    fn install(
        &mut self,
        mapping: SystemMapping,
        freq: FrequencyPlan,
        header: impl FnOnce(&[MappingEdit]) -> TraceEvent,
    ) -> Result<Vec<MappingEdit>, RunError> {
        let old = std::mem::replace(&mut self.state.mapping, mapping);
        let old_freq = self.frequency_plan();
        for (tile, level) in &freq {
            self.state.tile_mut(*tile)?.freq_level = *level;
        }
        let edits = diff(&old, &old_freq, &self.state.mapping, &freq);
        self.emit(header(&edits));
        let threads: Vec<ThreadId> = self.state.mapping.assignments.keys().cloned().collect();
        for thread in threads {
            let before: BTreeSet<TileId> = old.hosts(&thread).collect();
            let after: BTreeSet<TileId> = self.state.mapping.hosts(&thread).collect();
            for &tile in before.difference(&after) {
                self.state.forget_replica(&thread, tile);
                self.end_replica(&(thread.clone(), tile), FaultDisposition::Masked);
            }
            let source = before
                .intersection(&after)
                .copied()
                .find(|t| self.state.tile(*t).is_ok_and(|t| t.health.is_running()));
            for &tile in after.difference(&before) {
                self.state.forget_replica(&thread, tile);
                if let Some(source) = source {
                    self.emit(TraceEvent::StateSynchronized {
                        thread: thread.clone(),
                        tile,
                        source,
                        counted: false,
                    });
                    self.charge_sync(&thread, tile)?;
                }
            }
        }
        Ok(edits)
    }

    fn emit_edits(&mut self, edits: &[MappingEdit]) {
        for e in edits {
            match e {
                MappingEdit::SetMode { thread, mode } => {
                    if *mode == ExecutionMode::Descheduled {
                        self.emit(TraceEvent::ThreadDescheduled {
                            thread: thread.clone(),
                        });
                    }
                }
                MappingEdit::SetTimeShare { thread, share } => {
                    self.emit(TraceEvent::TimeShareChanged {
                        thread: thread.clone(),
                        share: *share,
                    })
                }
                MappingEdit::SetFrequency { tile, level } => {
                    self.emit(TraceEvent::FrequencyChanged {
                        tile: *tile,
                        level: *level,
                    })
                }
                MappingEdit::GateIdle { tile } => self.emit(TraceEvent::TileIdleGating {
                    tile: *tile,
                    enabled: true,
                }),
                MappingEdit::UngateIdle { tile } => self.emit(TraceEvent::TileIdleGating {
                    tile: *tile,
                    enabled: false,
                }),
                _ => {}
            }
        }
    }

    fn emit_mode_reductions(&mut self, old: &SystemMapping) {
        let changes: Vec<(ThreadId, ExecutionMode, ExecutionMode)> = self
            .state
            .mapping
            .assignments
            .iter()
            .filter_map(|(t, a)| {
                let from = old.assignment(t)?.mode;
                (a.mode < from && a.mode != ExecutionMode::Descheduled)
                    .then(|| (t.clone(), from, a.mode))
            })
            .collect();
        for (thread, from, to) in changes {
            self.emit(TraceEvent::ModeReduced { thread, from, to });
        }
    }

    // ----- status -----

    fn after_event(&mut self) -> Result<(), RunError> {
        self.start_repairs()?;
        self.resume_halted();
        self.apply_persistent_corruption();
        self.sync_gating();
        self.emit_health_changes();
        self.refresh_exposure();
        self.update_threads()?;
        self.update_active_tiles();
        self.update_power();
        Ok(())
    }

    fn sync_gating(&mut self) {
        let used = self.state.mapping.used_tiles();
        let active = self.state.mapping.active_tiles.clone();
        for t in &mut self.state.tiles {
            let wanted_off = !active.contains(&t.id) && !used.contains(&t.id);
            match t.health {
                TileHealth::Healthy if wanted_off => {
                    t.set_health(TileHealth::ClockGated);
                }
                TileHealth::ClockGated if !wanted_off => {
                    t.set_health(TileHealth::Healthy);
                }
                _ => {}
            }
        }
    }

    fn emit_health_changes(&mut self) {
        let changes: Vec<(TileId, TileHealth, TileHealth)> = self
            .state
            .tiles
            .iter()
            .filter_map(|t| {
                let before = self.health.get(&t.id).copied().unwrap_or(t.health);
                (before != t.health).then_some((t.id, before, t.health))
            })
            .collect();
        for (tile, before, after) in changes {
            self.health.insert(tile, after);
            let event = match (before, after) {
                (_, TileHealth::Suspect) => Some(TraceEvent::TileSuspect { tile }),
                (_, TileHealth::ClockGated) => Some(TraceEvent::TileGated { tile }),
                (TileHealth::ClockGated, TileHealth::Healthy) => {
                    Some(TraceEvent::TileUngated { tile })
                }
                (_, TileHealth::Healthy) => Some(TraceEvent::TileHealthy { tile }),
                _ => None,
            };
            if let Some(e) = event {
                self.emit(e);
            }
        }
    }

    fn update_threads(&mut self) -> Result<(), RunError> {
        let now = self.state.time;
        let threads: Vec<ThreadSpec> = self.state.threads.clone();
        for spec in &threads {
            let id = &spec.id;
            let a = self.state.mapping.assignment(id);
            let descheduled = a.is_none_or(|a| a.mode == ExecutionMode::Descheduled);
            let running_host = self
                .state
                .mapping
                .hosts(id)
                .any(|t| self.state.tile(t).is_ok_and(|t| t.health.is_running()));
            let up = !descheduled && !self.state.halted.contains(id) && running_host;
            match (up, self.down_since.contains_key(id)) {
                (false, false) => {
                    self.down_since.insert(id.clone(), now);
                    self.emit(TraceEvent::ThreadDown { thread: id.clone() });
                }
                (true, true) => {
                    let since = self.down_since.remove(id).unwrap_or(now);
                    *self.state.metrics.downtime.entry(id.clone()).or_default() += now.since(since);
                    self.emit(TraceEvent::ThreadUp { thread: id.clone() });
                }
                _ => {}
            }
            let level = if self.state.mapping.assignment(id).is_some() {
                replication_level(id, &self.state.mapping, &self.state.tiles)?
            } else {
                0
            };
            if self.replication.get(id) != Some(&level) {
                self.replication.insert(id.clone(), level);
                self.state
                    .metrics
                    .replication_timeline
                    .entry(id.clone())
                    .or_default()
                    .push((now, level));
                self.emit(TraceEvent::ReplicationChanged {
                    thread: id.clone(),
                    replicas: level,
                });
            }
        }
        Ok(())
    }

    fn update_active_tiles(&mut self) {
        let count = self
            .state
            .tiles
            .iter()
            .filter(|t| {
                !matches!(
                    t.health,
                    TileHealth::ClockGated | TileHealth::PermanentlyDefective
                )
            })
            .count();
        if self.active_count != Some(count) {
            self.active_count = Some(count);
            self.state
                .metrics
                .active_tiles_timeline
                .push((self.state.time, count));
            self.emit(TraceEvent::ActiveTilesChanged { count });
        }
    }

    fn update_power(&mut self) {
        let mut changes = Vec::new();
        let mut total = Power::zero();
        for t in &self.state.tiles {
            let gating = if self.state.mapping.idle_gated.contains(&t.id) {
                Gating::Idle
            } else {
                Gating::None
            };
            let load = self.state.mapping.tile_load(t.id, &self.state.threads);
            let p = self.cfg.power.tile_power(t, load, gating);
            total += p;
            if self.tile_power.get(&t.id) != Some(&p) {
                changes.push((t.id, p));
            }
        }
        for (tile, power) in changes {
            self.tile_power.insert(tile, power);
            self.emit(TraceEvent::TilePower { tile, power });
        }
        self.total_power = total;
        if total > self.state.metrics.peak_power {
            self.state.metrics.peak_power = total;
        }
    }

    fn end_run(&mut self) {
        self.finished = true;
        let now = self.state.time;
        let open: Vec<u64> = self
            .faults
            .iter()
            .filter(|(_, f)| !f.closed)
            .map(|(id, _)| *id)
            .collect();
        for id in open {
            let f = &self.faults[&id];
            let separate_only = !f.replicas.is_empty()
                && f.replicas.iter().all(|(t, _)| {
                    self.state
                        .mapping
                        .assignment(t)
                        .is_some_and(|a| a.mode == ExecutionMode::Separate)
                });
            let disposition = if separate_only {
                FaultDisposition::Undetected
            } else if f.worst.is_some() || !f.replicas.is_empty() {
                FaultDisposition::Unresolved
            } else {
                FaultDisposition::NoEffect
            };
            if let Some(f) = self.faults.get_mut(&id) {
                f.closed = true;
            }
            self.close_with(id, disposition);
        }
        for (thread, since) in std::mem::take(&mut self.down_since) {
            *self.state.metrics.downtime.entry(thread).or_default() += now.since(since);
        }
        for ((thread, _), since) in std::mem::take(&mut self.exposed) {
            *self.state.metrics.exposure.entry(thread).or_default() += now.since(since);
        }
        self.emit(TraceEvent::RunEnded {
            duration: now.since(SimTime::ZERO),
        });
    }

    fn report(&self) -> MetricsReport {
        let m = &self.state.metrics;
        MetricsReport {
            scenario: self.name.clone(),
            seed: self.seed,
            profile: self.profile.name.clone(),
            duration: self.state.time.since(SimTime::ZERO),
            checkpoints: m.checkpoints,
            dissents: m.dissents,
            synchronizations: m.synchronizations,
            escalations: m.escalations,
            faults_injected: m.faults_injected,
            dispositions: m.dispositions.clone(),
            downtime: self
                .state
                .threads
                .iter()
                .map(|t| {
                    (
                        t.id.clone(),
                        m.downtime.get(&t.id).copied().unwrap_or_default(),
                    )
                })
                .collect(),
            exposure: self
                .state
                .threads
                .iter()
                .map(|t| {
                    (
                        t.id.clone(),
                        m.exposure.get(&t.id).copied().unwrap_or_default(),
                    )
                })
                .collect(),
            energy: m.energy,
            energy_joules: energy_joules(&m.energy),
            peak_power: m.peak_power,
            peak_power_watts: to_f64(&m.peak_power) * 1e-6,
            replication_timeline: m.replication_timeline.clone(),
            active_tiles_timeline: m.active_tiles_timeline.clone(),
            final_modes: self
                .state
                .mapping
                .assignments
                .iter()
                .map(|(t, a)| (t.clone(), a.mode))
                .collect(),
            defective_tiles: self
                .state
                .tiles
                .iter()
                .filter(|t| t.health == TileHealth::PermanentlyDefective)
                .map(|t| t.id)
                .collect(),
            ecc_tile_local: m.ecc_tile_local,
            ecc_main_memory: m.ecc_main_memory,
            ecc_validation: m.ecc_validation,
            sync_cost_units: m.sync_cost_units,
            essential_descheduled: self
                .state
                .threads
                .iter()
                .filter(|t| {
                    t.criticality == CriticalityClass::Essential
                        && self
                            .state
                            .mapping
                            .assignment(&t.id)
                            .is_none_or(|a| a.mode == ExecutionMode::Descheduled)
                })
                .map(|t| t.id.clone())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::recompute_from_trace;
    use crate::trace::to_ndjson;

    fn scenario(json: &str) -> ScenarioConfig {
        ScenarioConfig::from_json(json, None).unwrap()
    }

    /// One TMR thread on tiles 1-3 of six, plus `faults`.
    fn tmr(faults: &str) -> ScenarioConfig {
        scenario(&format!(
            r#"{{
                "schema": 1, "tiles": 6, "profile": "Speed",
                "threads": [{{"id": "E", "criticality": "Essential", "demand": 40}}],
                "checkpoint_period": "1s", "duration": "5s",
                "initial_mapping": {{"E": {{"mode": "TMR", "tiles": [1, 2, 3]}}}},
                "faults": [{faults}]
            }}"#
        ))
    }

    fn count(out: &RunOutput, pred: impl Fn(&TraceEvent) -> bool) -> usize {
        out.trace.iter().filter(|r| pred(&r.event)).count()
    }

    fn dispositions(out: &RunOutput) -> Vec<FaultDisposition> {
        out.trace
            .iter()
            .filter_map(|r| match r.event {
                TraceEvent::FaultDisposition { disposition, .. } => Some(disposition),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn fault_free_baseline() {
        let s = scenario(include_str!("../../../../scenarios/baseline.json"));
        let out = run(&s, None).unwrap();
        assert_eq!(out.report.checkpoints, 10);
        assert_eq!(out.report.dissents, 0);
        assert_eq!(out.report.total_downtime(), SimDuration::ZERO);
        assert_eq!(out.report.faults_injected, 0);
    }

    #[test]
    fn single_transient_is_corrected_at_the_next_checkpoint() {
        let out = run(
            &tmr(r#"{"at": "1500ms", "tile": 2, "kind": "TransientState"}"#),
            None,
        )
        .unwrap();
        assert_eq!(
            count(&out, |e| matches!(
                e,
                TraceEvent::DisagreementDetected { .. }
            )),
            1
        );
        assert_eq!(
            count(&out, |e| matches!(
                e,
                TraceEvent::StateSynchronized { counted: true, .. }
            )),
            1
        );
        assert!(out.state.divergence.is_empty());
        assert_eq!(dispositions(&out), vec![FaultDisposition::CorrectedStage1]);
        assert_eq!(
            out.report.exposure[&"E".into()],
            SimDuration::from_millis(500)
        );
        let synced = out
            .trace
            .iter()
            .find(|r| matches!(r.event, TraceEvent::StateSynchronized { .. }))
            .unwrap();
        assert_eq!(synced.time, SimTime(2_000_000));
    }

    #[test]
    fn transient_on_a_tile_without_replicas_has_no_effect() {
        let out = run(
            &tmr(r#"{"at": "1s", "tile": 5, "kind": "TransientState"}"#),
            None,
        )
        .unwrap();
        assert_eq!(out.report.dissents, 0);
        assert_eq!(dispositions(&out), vec![FaultDisposition::NoEffect]);
    }

    #[test]
    fn mbu_flags_both_tiles() {
        let out = run(
            &tmr(r#"{"at": "500ms", "kind": "MBU", "span": [2, 3]}"#),
            None,
        )
        .unwrap();
        let first = out
            .trace
            .iter()
            .find_map(|r| match &r.event {
                TraceEvent::DisagreementDetected { dissenters, .. } => Some(dissenters.clone()),
                _ => None,
            })
            .unwrap();
        assert!(first.contains(&TileId(2)) && first.contains(&TileId(3)));
        for tile in [2, 3] {
            assert!(out
                .trace
                .iter()
                .any(|r| r.event == TraceEvent::TileSuspect { tile: TileId(tile) }));
        }
        // Partial reconfiguration clears the upset; nothing ends up defective.
        assert!(out.report.defective_tiles.is_empty());
        assert_eq!(dispositions(&out), vec![FaultDisposition::RepairedStage2]);
        assert!(out.state.halted.is_empty());
    }

    #[test]
    fn main_memory_syndrome_only_reaches_the_supervisor() {
        let out = run(
            &tmr(r#"{"at": "1s", "kind": "EccSyndrome", "region": "MainMemory"}"#),
            None,
        )
        .unwrap();
        assert_eq!(
            count(&out, |e| matches!(
                e,
                TraceEvent::EccSyndromeReported { .. }
            )),
            1
        );
        assert_eq!(
            count(&out, |e| matches!(e, TraceEvent::TileSuspect { .. })),
            0
        );
        assert_eq!(out.report.ecc_main_memory, 1);
        assert_eq!(dispositions(&out), vec![FaultDisposition::Masked]);
    }

    #[test]
    fn transient_config_is_repaired_by_partial_reconfiguration() {
        let out = run(
            &tmr(r#"{"at": "500ms", "tile": 1, "kind": "TransientConfig"}"#),
            None,
        )
        .unwrap();
        assert!(out.trace.iter().any(|r| r.event
            == TraceEvent::RepairQueued {
                tile: TileId(1),
                reason: QueueReason::RepeatedDissent
            }));
        assert_eq!(dispositions(&out), vec![FaultDisposition::RepairedStage2]);
        assert!(out
            .state
            .tiles
            .iter()
            .all(|t| t.health != TileHealth::PermanentlyDefective));
        assert!(out.state.divergence.is_empty());
        // Rejoined replicas adopt the majority at the induced checkpoint.
        assert_eq!(
            count(&out, |e| matches!(
                e,
                TraceEvent::CheckpointStarted { induced: true, .. }
            )),
            1
        );
    }

    #[test]
    fn fault_on_a_defective_tile_is_recorded_without_effect() {
        let s = tmr(r#"{"at": "500ms", "tile": 1, "kind": "TransientState"}"#);
        let mut e = Engine::new(&s, None).unwrap();
        e.state.tiles[4].set_health(TileHealth::PermanentlyDefective);
        e.inject(FaultEvent::new(
            SimDuration::ZERO,
            5,
            FaultKind::PermanentMemory,
        ))
        .unwrap();
        let out = e.finish();
        assert_eq!(dispositions(&out)[0], FaultDisposition::NoEffect);
        assert_eq!(out.report.faults_injected, 2);
    }

    #[test]
    fn runs_are_deterministic_and_metrics_recompute() {
        let s = scenario(include_str!("../../../../scenarios/stochastic.json"));
        let a = run(&s, None).unwrap();
        let b = run(&s, None).unwrap();
        assert_eq!(to_ndjson(&a.trace), to_ndjson(&b.trace));
        assert!(a.report.faults_injected > 0);
        assert!(recompute_from_trace(&a.trace).matches(&a.report));
        let c = run(&s, Some(99)).unwrap();
        assert_ne!(to_ndjson(&a.trace), to_ndjson(&c.trace));
        let closed = count(&a, |e| matches!(e, TraceEvent::FaultDisposition { .. }));
        assert_eq!(closed as u64, a.report.faults_injected);
    }

    #[test]
    fn fig3_timeline() {
        let s = scenario(include_str!("../../../../scenarios/fig3a.json"));
        let out = run(&s, None).unwrap();
        let at = |pred: &dyn Fn(&TraceEvent) -> bool| -> Vec<u64> {
            out.trace
                .iter()
                .filter(|r| pred(&r.event))
                .map(|r| r.time.0 / 1000)
                .collect()
        };
        assert_eq!(
            at(
                &|e| matches!(e, TraceEvent::DisagreementDetected { thread, .. } if thread.as_str() == "E")
            ),
            vec![1000, 2000, 3000]
        );
        assert_eq!(
            at(&|e| matches!(e, TraceEvent::RepairStarted { .. })),
            vec![3000, 3200, 3400, 3600, 3800, 4000]
        );
        assert_eq!(
            at(&|e| matches!(e, TraceEvent::FullRebootStarted { .. })),
            vec![4200]
        );
        assert_eq!(
            at(&|e| matches!(e, TraceEvent::TilePermanentlyDefective { .. })),
            vec![5700]
        );
        assert_eq!(
            at(&|e| matches!(e, TraceEvent::StrategyApplied { .. })),
            vec![6000]
        );
        for t in ["E", "H", "M", "L"] {
            assert_eq!(
                out.report.downtime[&t.into()],
                SimDuration::from_millis(1500)
            );
        }
        assert_eq!(dispositions(&out), vec![FaultDisposition::PermanentStage3]);
        assert!(recompute_from_trace(&out.trace).matches(&out.report));
    }

    #[test]
    fn infeasible_essential_is_descheduled() {
        let s = scenario(include_str!(
            "../../../../scenarios/infeasible_one_tile.json"
        ));
        let out = run(&s, None).unwrap();
        assert_eq!(out.report.essential_descheduled, vec![ThreadId::from("E")]);
        assert_eq!(out.report.final_modes[&"L".into()], ExecutionMode::Separate);
    }

    #[test]
    fn profile_change_remaps_at_the_next_checkpoint() {
        let mut s = scenario(include_str!("../../../../scenarios/baseline.json"));
        s.profile_changes.push(super::super::ProfileChange {
            at: SimDuration::from_millis(2500),
            profile: super::super::ProfileSpec::Named("Robustness".into()),
        });
        let out = run(&s, None).unwrap();
        let changed = out
            .trace
            .iter()
            .find(|r| matches!(r.event, TraceEvent::ProfileChanged { .. }))
            .unwrap();
        assert_eq!(changed.time, SimTime(3_000_000));
        assert_eq!(out.report.final_modes[&"E".into()], ExecutionMode::Nmr(4));
        assert!(out
            .state
            .mapping
            .validate(&out.state.tiles, &out.state.threads)
            .is_ok());
    }
}
