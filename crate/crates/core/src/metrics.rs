//! End-of-run report and an independent recomputation from the trace.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::energy::{energy_over, to_f64, Energy, Power};
use crate::faultsim::FaultDisposition;
use crate::model::{ExecutionMode, ThreadId, TileId};
use crate::time::{SimDuration, SimTime};
use crate::trace::{TraceEvent, TraceRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub profile: String,
    pub duration: SimDuration,
    pub checkpoints: u64,
    pub dissents: u64,
    pub synchronizations: u64,
    pub escalations: u64,
    pub faults_injected: u64,
    pub dispositions: BTreeMap<FaultDisposition, u64>,
    pub downtime: BTreeMap<ThreadId, SimDuration>,
    pub exposure: BTreeMap<ThreadId, SimDuration>,
    /// Exact energy in microwatt-microseconds.
    #[serde(with = "crate::energy::ratio_str")]
    pub energy: Energy,
    pub energy_joules: f64,
    #[serde(with = "crate::energy::ratio_str")]
    pub peak_power: Power,
    pub peak_power_watts: f64,
    pub replication_timeline: BTreeMap<ThreadId, Vec<(SimTime, usize)>>,
    pub active_tiles_timeline: Vec<(SimTime, usize)>,
    pub final_modes: BTreeMap<ThreadId, ExecutionMode>,
    pub defective_tiles: Vec<TileId>,
    pub ecc_tile_local: u64,
    pub ecc_main_memory: u64,
    pub ecc_validation: u64,
    pub sync_cost_units: u64,
    /// Essential threads descheduled when the run ended.
    pub essential_descheduled: Vec<ThreadId>,
}

impl MetricsReport {
    pub fn total_downtime(&self) -> SimDuration {
        self.downtime.values().copied().sum()
    }

    pub fn total_exposure(&self) -> SimDuration {
        self.exposure.values().copied().sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scenario        {} (seed {}, profile {})",
            self.scenario, self.seed, self.profile
        );
        let _ = writeln!(s, "duration        {}", self.duration);
        let _ = writeln!(
            s,
            "checkpoints     {}  dissents {}  syncs {}  escalations {}",
            self.checkpoints, self.dissents, self.synchronizations, self.escalations
        );
        let _ = writeln!(s, "faults          {}", self.faults_injected);
        for (d, n) in &self.dispositions {
            let _ = writeln!(s, "  {:<16}{n}", d.to_string());
        }
        let _ = writeln!(
            s,
            "energy          {:.6} J (peak {:.3} W)",
            self.energy_joules, self.peak_power_watts
        );
        let _ = writeln!(
            s,
            "ecc             tile-local {}  main {}  validation {}",
            self.ecc_tile_local, self.ecc_main_memory, self.ecc_validation
        );
        let _ = writeln!(s, "thread  mode      downtime    exposure    replicas");
        for (t, mode) in &self.final_modes {
            let replicas = self
                .replication_timeline
                .get(t)
                .and_then(|v| v.last())
                .map_or(0, |(_, n)| *n);
            let _ = writeln!(
                s,
                "{:<7} {:<9} {:<11} {:<11} {}",
                t.to_string(),
                mode.to_string(),
                self.downtime
                    .get(t)
                    .copied()
                    .unwrap_or_default()
                    .to_string(),
                self.exposure
                    .get(t)
                    .copied()
                    .unwrap_or_default()
                    .to_string(),
                replicas
            );
        }
        if !self.defective_tiles.is_empty() {
            let list: Vec<String> = self
                .defective_tiles
                .iter()
                .map(ToString::to_string)
                .collect();
            let _ = writeln!(s, "defective       {}", list.join(", "));
        }
        if !self.essential_descheduled.is_empty() {
            let list: Vec<String> = self
                .essential_descheduled
                .iter()
                .map(ToString::to_string)
                .collect();
            let _ = writeln!(s, "DESCHEDULED ESSENTIAL THREADS: {}", list.join(", "));
        }
        s
    }
}

/// Downtime, exposure and energy rebuilt from trace events alone.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceTotals {
    pub downtime: BTreeMap<ThreadId, SimDuration>,
    pub exposure: BTreeMap<ThreadId, SimDuration>,
    pub energy: Energy,
}

impl TraceTotals {
    /// Whether the totals agree with `report`, ignoring zero entries.
    pub fn matches(&self, report: &MetricsReport) -> bool {
        fn nonzero(m: &BTreeMap<ThreadId, SimDuration>) -> BTreeMap<&ThreadId, SimDuration> {
            m.iter()
                .filter(|(_, d)| **d != SimDuration::ZERO)
                .map(|(k, v)| (k, *v))
                .collect()
        }
        nonzero(&self.downtime) == nonzero(&report.downtime)
            && nonzero(&self.exposure) == nonzero(&report.exposure)
            && self.energy == report.energy
    }
}

pub fn recompute_from_trace(trace: &[TraceRecord]) -> TraceTotals {
    let mut totals = TraceTotals {
        energy: Energy::zero(),
        ..Default::default()
    };
    let mut down: BTreeMap<ThreadId, SimTime> = BTreeMap::new();
    let mut exposed: BTreeMap<(ThreadId, TileId), SimTime> = BTreeMap::new();
    let mut power: BTreeMap<TileId, Power> = BTreeMap::new();
    let mut last = SimTime::ZERO;
    for r in trace {
        let total: Power = power.values().sum();
        totals.energy += energy_over(total, r.time.since(last));
        last = r.time;
        match &r.event {
            TraceEvent::ThreadDown { thread } => {
                down.entry(thread.clone()).or_insert(r.time);
            }
            TraceEvent::ThreadUp { thread } => {
                if let Some(since) = down.remove(thread) {
                    *totals.downtime.entry(thread.clone()).or_default() += r.time.since(since);
                }
            }
            TraceEvent::ExposureStarted { thread, tile } => {
                exposed.entry((thread.clone(), *tile)).or_insert(r.time);
            }
            TraceEvent::ExposureEnded { thread, tile } => {
                if let Some(since) = exposed.remove(&(thread.clone(), *tile)) {
                    *totals.exposure.entry(thread.clone()).or_default() += r.time.since(since);
                }
            }
            TraceEvent::TilePower { tile, power: p } => {
                power.insert(*tile, *p);
            }
            TraceEvent::SyncCharged { energy, .. } => totals.energy += energy,
            TraceEvent::RunEnded { .. } => {
                for (thread, since) in std::mem::take(&mut down) {
                    *totals.downtime.entry(thread).or_default() += r.time.since(since);
                }
                for ((thread, _), since) in std::mem::take(&mut exposed) {
                    *totals.exposure.entry(thread).or_default() += r.time.since(since);
                }
            }
            _ => {}
        }
    }
    totals
}

pub fn energy_joules(e: &Energy) -> f64 {
    to_f64(e) * 1e-12
}
