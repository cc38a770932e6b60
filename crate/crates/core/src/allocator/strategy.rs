//! Per-tile replacement strategies: what to do if a given tile dies.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::energy::{budget_uw, Power};
use crate::mapping::{self, Assignment, FrequencyPlan, MappingEdit, SystemMapping};
use crate::model::{
    CriticalityClass, ExecutionMode, FreqLevel, Load, SystemState, ThreadId, ThreadSpec, Tile,
    TileId,
};

use super::{
    apply_budget_gating, map_threads_with, planning_tiles, tile_room, AllocatorConfig,
    PerformanceProfile,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    PruneLowCriticality,
    FrequencyIncrease,
    TimeShareReduction,
    Hybrid,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A replica lost with a failed tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LostReplica {
    pub thread: ThreadId,
    /// Mode the thread ran in before the failure.
    pub mode: ExecutionMode,
    pub time_share: crate::model::TimeShare,
}

impl LostReplica {
    /// Replicas `mapping` would lose if `tile` failed.
    pub fn on_tile(mapping: &SystemMapping, tile: TileId) -> Vec<LostReplica> {
        mapping
            .assignments
            .iter()
            .filter(|(_, a)| a.tiles.contains(&tile))
            .map(|(t, a)| LostReplica {
                thread: t.clone(),
                mode: a.mode,
                time_share: a.time_share,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementStrategy {
    pub for_tile: TileId,
    pub kind: StrategyKind,
    /// Edits from the degraded mapping (the basis without `for_tile`) to the target.
    pub delta: Vec<MappingEdit>,
    /// No candidate keeps every Essential and High thread in an allowed mode
    /// within the power budget.
    pub infeasible: bool,
    pub basis: SystemMapping,
    pub basis_freq: FrequencyPlan,
    pub target: SystemMapping,
    pub target_freq: FrequencyPlan,
}

impl ReplacementStrategy {
    pub fn migrations(&self) -> usize {
        count_migrations(&self.delta)
    }
}

/// Outcome of applying a strategy at a checkpoint boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedStrategy {
    pub kind: StrategyKind,
    pub infeasible: bool,
    pub mapping: SystemMapping,
    pub freq: FrequencyPlan,
    /// Threads descheduled because the strategy alone left the mapping invalid.
    pub descheduled: Vec<ThreadId>,
    /// Whether the precomputed strategy was still current.
    pub precomputed: bool,
}

fn count_migrations(delta: &[MappingEdit]) -> usize {
    delta
        .iter()
        .filter(|e| {
            matches!(
                e,
                MappingEdit::Migrate { .. } | MappingEdit::AddReplica { .. }
            )
        })
        .count()
}

/// Working copy a candidate strategy edits.
#[derive(Clone)]
struct Draft<'a> {
    tiles: Vec<Tile>,
    threads: &'a [ThreadSpec],
    mapping: SystemMapping,
}

impl Draft<'_> {
    fn spec(&self, id: &ThreadId) -> &ThreadSpec {
        self.threads
            .iter()
            .find(|t| &t.id == id)
            .expect("declared thread")
    }

    fn tile(&self, id: TileId) -> &Tile {
        self.tiles
            .iter()
            .find(|t| t.id == id)
            .expect("planning tile")
    }

    fn room(&self, id: TileId) -> Load {
        tile_room(&self.mapping, self.tile(id), self.threads)
    }

    fn load_of(&self, id: &ThreadId) -> Load {
        let share = self
            .mapping
            .assignment(id)
            .map_or(Default::default(), |a| a.time_share);
        self.spec(id).replica_load(share)
    }

    fn hosts(&self, thread: &ThreadId, tile: TileId) -> bool {
        self.mapping
            .assignment(thread)
            .is_some_and(|a| a.tiles.contains(&tile))
    }

    fn add_replica(&mut self, thread: &ThreadId, tile: TileId) {
        let a = self
            .mapping
            .assignments
            .entry(thread.clone())
            .or_insert_with(Assignment::descheduled);
        a.tiles.insert(tile);
        a.mode = ExecutionMode::with_replicas(a.tiles.len());
        self.mapping.active_tiles.insert(tile);
    }

    /// Drops `thread`'s replica on `tile`. A thread left below its weakest
    /// allowed mode is descheduled entirely.
    fn evict(&mut self, thread: &ThreadId, tile: TileId, profile: &PerformanceProfile) {
        let class = self.spec(thread).criticality;
        let a = self.mapping.assignments.get_mut(thread).expect("hosted");
        a.tiles.remove(&tile);
        let weakest = profile.weakest(class).map_or(1, |m| m.replication_factor());
        if a.tiles.len() < weakest {
            *a = Assignment::descheduled();
        } else {
            a.mode = ExecutionMode::with_replicas(a.tiles.len());
        }
    }

    fn freq_plan(&self) -> FrequencyPlan {
        self.tiles.iter().map(|t| (t.id, t.freq_level)).collect()
    }

    fn power(&self, cfg: &AllocatorConfig) -> Power {
        cfg.power
            .system_power(&self.tiles, &self.mapping, self.threads)
    }
}

struct Candidate {
    kind: StrategyKind,
    mapping: SystemMapping,
    freq: FrequencyPlan,
    power: Power,
    clean: bool,
    essential_ok: bool,
}

/// Preference order of the three basic strategies for a profile.
fn preference(profile: &PerformanceProfile) -> [StrategyKind; 3] {
    use StrategyKind::*;
    match profile.name.as_str() {
        "Speed" => [FrequencyIncrease, PruneLowCriticality, TimeShareReduction],
        "Energy" => [TimeShareReduction, PruneLowCriticality, FrequencyIncrease],
        _ => [PruneLowCriticality, FrequencyIncrease, TimeShareReduction],
    }
}

fn lost_in_order<'a>(lost: &'a [LostReplica], threads: &[ThreadSpec]) -> Vec<&'a LostReplica> {
    let crit = |id: &ThreadId| {
        threads
            .iter()
            .find(|t| &t.id == id)
            .map(|t| (t.criticality, t.demand))
    };
    let mut out: Vec<&LostReplica> = lost.iter().filter(|l| crit(&l.thread).is_some()).collect();
    out.sort_by(|a, b| {
        crit(&b.thread)
            .cmp(&crit(&a.thread))
            .then(a.thread.cmp(&b.thread))
    });
    out
}

/// Restores the lost replicas on tile `r`, evicting copies of strictly less
/// critical threads there to make room.
fn prune_on<'a>(
    base: &Draft<'a>,
    lost: &[&LostReplica],
    r: TileId,
    profile: &PerformanceProfile,
) -> (Draft<'a>, usize, usize) {
    let mut d = base.clone();
    let mut evictions = 0;
    let mut unplaced = 0;
    for l in lost {
        if d.hosts(&l.thread, r) {
            unplaced += 1;
            continue;
        }
        let class = d.spec(&l.thread).criticality;
        let need = d.spec(&l.thread).replica_load(l.time_share);
        let mut trial = d.clone();
        let mut ev = 0;
        while trial.room(r) < need {
            let victim = trial
                .mapping
                .threads_on(r)
                .filter(|t| trial.spec(t).criticality < class)
                .min_by(|a, b| {
                    let (sa, sb) = (trial.spec(a), trial.spec(b));
                    sa.criticality
                        .cmp(&sb.criticality)
                        .then(trial.load_of(b).cmp(&trial.load_of(a)))
                        .then(a.cmp(b))
                })
                .cloned();
            let Some(victim) = victim else { break };
            trial.evict(&victim, r, profile);
            ev += 1;
        }
        if trial.room(r) >= need {
            trial
                .mapping
                .assignments
                .entry(l.thread.clone())
                .or_insert_with(Assignment::descheduled)
                .time_share = l.time_share;
            trial.add_replica(&l.thread, r);
            d = trial;
            evictions += ev;
        } else {
            unplaced += 1;
        }
    }
    (d, evictions, unplaced)
}

/// Picks the replacement tile whose eviction costs the least.
fn prune_low_criticality<'a>(
    base: &Draft<'a>,
    lost: &[&LostReplica],
    profile: &PerformanceProfile,
) -> Draft<'a> {
    let mut best: Option<(
        (
            usize,
            Option<CriticalityClass>,
            usize,
            std::cmp::Reverse<TileId>,
        ),
        Draft<'a>,
    )> = None;
    for t in &base.tiles {
        let workload = base
            .mapping
            .threads_on(t.id)
            .map(|id| base.spec(id).criticality)
            .max();
        let (d, evictions, unplaced) = prune_on(base, lost, t.id, profile);
        let key = (unplaced, workload, evictions, std::cmp::Reverse(t.id));
        if best.as_ref().is_none_or(|(k, _)| key < *k) {
            best = Some((key, d));
        }
    }
    best.map_or_else(|| base.clone(), |(_, d)| d)
}

fn frequency_increase<'a>(
    base: &Draft<'a>,
    lost: &[&LostReplica],
    cfg: &AllocatorConfig,
) -> Draft<'a> {
    let mut d = base.clone();
    let start: BTreeMap<TileId, FreqLevel> = base.freq_plan();
    for l in lost {
        let need = d.spec(&l.thread).replica_load(l.time_share);
        let mut best: Option<((u64, std::cmp::Reverse<TileId>), TileId, FreqLevel)> = None;
        for t in &d.tiles {
            if d.hosts(&l.thread, t.id) {
                continue;
            }
            let required = d.mapping.tile_load(t.id, d.threads) + need;
            let level = std::iter::once(t.freq_level)
                .chain(
                    cfg.frequency_levels
                        .iter()
                        .copied()
                        .filter(|f| *f > t.freq_level),
                )
                .find(|f| t.capacity_at(*f) >= required);
            if let Some(level) = level {
                let increase = level.permille().saturating_sub(start[&t.id].permille());
                let key = (increase, std::cmp::Reverse(t.id));
                if best.as_ref().is_none_or(|(k, _, _)| key < *k) {
                    best = Some((key, t.id, level));
                }
            }
        }
        if let Some((_, tile, level)) = best {
            d.tiles
                .iter_mut()
                .find(|t| t.id == tile)
                .expect("planning tile")
                .freq_level = level;
            d.mapping
                .assignments
                .entry(l.thread.clone())
                .or_insert_with(Assignment::descheduled)
                .time_share = l.time_share;
            d.add_replica(&l.thread, tile);
        }
    }
    d
}

/// Places every lost replica on the roomiest tile, highest id on ties.
fn place_all<'a>(d: &Draft<'a>, lost: &[&LostReplica]) -> (Draft<'a>, bool) {
    let mut out = d.clone();
    let mut all = true;
    for l in lost {
        let need = out.spec(&l.thread).replica_load(l.time_share);
        let target = out
            .tiles
            .iter()
            .map(|t| t.id)
            .filter(|&t| !out.hosts(&l.thread, t) && out.room(t) >= need)
            .max_by(|&a, &b| out.room(a).cmp(&out.room(b)).then(a.cmp(&b)));
        match target {
            Some(t) => {
                out.mapping
                    .assignments
                    .entry(l.thread.clone())
                    .or_insert_with(Assignment::descheduled)
                    .time_share = l.time_share;
                out.add_replica(&l.thread, t);
            }
            None => all = false,
        }
    }
    (out, all)
}

fn time_share_reduction<'a>(base: &Draft<'a>, lost: &[&LostReplica]) -> Draft<'a> {
    let Some(top) = lost.iter().map(|l| base.spec(&l.thread).criticality).max() else {
        return base.clone();
    };
    let mut d = base.clone();
    loop {
        let (placed, all) = place_all(&d, lost);
        if all {
            return placed;
        }
        let victim = d
            .threads
            .iter()
            .filter(|t| !t.rt_guarantee && t.criticality < top)
            .filter(|t| {
                d.mapping.assignment(&t.id).is_some_and(|a| {
                    a.mode != ExecutionMode::Descheduled && a.time_share.reduced().is_some()
                })
            })
            .min_by(|a, b| {
                a.criticality
                    .cmp(&b.criticality)
                    .then(b.demand.cmp(&a.demand))
                    .then(a.id.cmp(&b.id))
            })
            .map(|t| t.id.clone());
        let Some(victim) = victim else {
            return placed;
        };
        let a = d.mapping.assignments.get_mut(&victim).expect("scheduled");
        a.time_share = a.time_share.reduced().expect("reducible");
    }
}

fn finish(
    kind: StrategyKind,
    mut d: Draft,
    profile: &PerformanceProfile,
    cfg: &AllocatorConfig,
) -> Candidate {
    if profile.power_budget_mw.is_some() {
        apply_budget_gating(&mut d.mapping, &d.tiles, d.threads);
    }
    let power = d.power(cfg);
    let within_budget = profile
        .power_budget_mw
        .is_none_or(|mw| power <= budget_uw(mw));
    let mode_ok = |class: CriticalityClass| {
        d.threads
            .iter()
            .filter(|t| t.criticality == class)
            .all(|t| {
                d.mapping
                    .assignment(&t.id)
                    .is_some_and(|a| profile.allows(class, a.mode))
            })
    };
    let essential_ok = mode_ok(CriticalityClass::Essential);
    let valid = d.mapping.validate(&d.tiles, d.threads).is_ok();
    Candidate {
        kind,
        freq: d.freq_plan(),
        clean: valid && within_budget && essential_ok && mode_ok(CriticalityClass::High),
        essential_ok: valid && within_budget && essential_ok,
        power,
        mapping: d.mapping,
    }
}

/// Chooses how to recover from losing `failed`. `degraded` is the mapping
/// with the tile already removed and `lost` lists what it hosted.
#[allow(clippy::too_many_arguments)]
pub fn compute_strategy(
    tiles: &[Tile],
    threads: &[ThreadSpec],
    degraded: &SystemMapping,
    lost: &[LostReplica],
    failed: TileId,
    profile: &PerformanceProfile,
    cfg: &AllocatorConfig,
) -> ReplacementStrategy {
    let plan: Vec<Tile> = planning_tiles(tiles)
        .into_iter()
        .filter(|t| t.id != failed)
        .collect();
    let base = Draft {
        tiles: plan.clone(),
        threads,
        mapping: degraded.clone(),
    };
    let basis_freq = base.freq_plan();
    let ordered = lost_in_order(lost, threads);
    let candidates = [
        finish(
            StrategyKind::PruneLowCriticality,
            prune_low_criticality(&base, &ordered, profile),
            profile,
            cfg,
        ),
        finish(
            StrategyKind::FrequencyIncrease,
            frequency_increase(&base, &ordered, cfg),
            profile,
            cfg,
        ),
        finish(
            StrategyKind::TimeShareReduction,
            time_share_reduction(&base, &ordered),
            profile,
            cfg,
        ),
    ];
    let prefs = preference(profile);
    let rank = |k: StrategyKind| prefs.iter().position(|p| *p == k).unwrap_or(prefs.len());
    let migrations = |c: &Candidate| {
        count_migrations(&mapping::diff(degraded, &basis_freq, &c.mapping, &c.freq))
    };
    let best_by = |pred: &dyn Fn(&Candidate) -> bool| {
        candidates.iter().filter(|c| pred(c)).min_by(|a, b| {
            rank(a.kind)
                .cmp(&rank(b.kind))
                .then(a.power.cmp(&b.power))
                .then(migrations(a).cmp(&migrations(b)))
        })
    };

    let hybrid = || -> Option<Candidate> {
        let m = map_threads_with(threads, &plan, profile, cfg).ok()?;
        let c = finish(
            StrategyKind::Hybrid,
            Draft {
                tiles: plan.clone(),
                threads,
                mapping: m,
            },
            profile,
            cfg,
        );
        c.essential_ok.then_some(c)
    };

    let (chosen, infeasible) = if let Some(c) = best_by(&|c| c.clean) {
        (Some((c.kind, c.mapping.clone(), c.freq.clone())), false)
    } else {
        let h = hybrid();
        match h {
            Some(h) if h.clean => (Some((h.kind, h.mapping, h.freq)), false),
            _ => match best_by(&|c| c.essential_ok) {
                Some(c) => (Some((c.kind, c.mapping.clone(), c.freq.clone())), true),
                None => (h.map(|h| (h.kind, h.mapping, h.freq)), true),
            },
        }
    };
    let (kind, target, target_freq) =
        chosen.unwrap_or((prefs[0], degraded.clone(), basis_freq.clone()));
    let mut basis = degraded.clone();
    for l in lost {
        // Reconstruct the pre-failure mapping for staleness checks.
        if let Some(a) = basis.assignments.get_mut(&l.thread) {
            a.tiles.insert(failed);
            a.mode = l.mode;
            a.time_share = l.time_share;
        }
    }
    basis.active_tiles.insert(failed);
    ReplacementStrategy {
        for_tile: failed,
        kind,
        delta: mapping::diff(degraded, &basis_freq, &target, &target_freq),
        infeasible,
        basis,
        basis_freq: basis_freq.clone(),
        target,
        target_freq,
    }
}

/// One strategy per live tile of `state`, assuming that tile fails next.
pub fn precompute_replacement_strategies(
    state: &SystemState,
    profile: &PerformanceProfile,
    cfg: &AllocatorConfig,
) -> BTreeMap<TileId, ReplacementStrategy> {
    planning_tiles(&state.tiles)
        .iter()
        .map(|t| {
            let lost = LostReplica::on_tile(&state.mapping, t.id);
            let degraded = state.mapping.without_tile(t.id);
            (
                t.id,
                compute_strategy(
                    &state.tiles,
                    &state.threads,
                    &degraded,
                    &lost,
                    t.id,
                    profile,
                    cfg,
                ),
            )
        })
        .collect()
}

/// Kind of strategy that would be used if `failed` died now.
pub fn select_strategy_kind(
    state: &SystemState,
    profile: &PerformanceProfile,
    failed: TileId,
    cfg: &AllocatorConfig,
) -> StrategyKind {
    let lost = LostReplica::on_tile(&state.mapping, failed);
    let degraded = state.mapping.without_tile(failed);
    compute_strategy(
        &state.tiles,
        &state.threads,
        &degraded,
        &lost,
        failed,
        profile,
        cfg,
    )
    .kind
}

/// Applies the strategy for `failed` to `state.mapping`, which must already
/// have the tile removed. A strategy computed for a different basis is
/// recomputed from `lost`. If the result is still invalid or over budget,
/// the least critical threads are descheduled until it is not.
pub fn apply_replacement_strategy(
    state: &SystemState,
    failed: TileId,
    strategy: Option<&ReplacementStrategy>,
    lost: &[LostReplica],
    profile: &PerformanceProfile,
    cfg: &AllocatorConfig,
) -> AppliedStrategy {
    let plan: Vec<Tile> = planning_tiles(&state.tiles)
        .into_iter()
        .filter(|t| t.id != failed)
        .collect();
    let current_freq: FrequencyPlan = plan.iter().map(|t| (t.id, t.freq_level)).collect();
    let current = strategy.filter(|s| {
        s.basis.without_tile(failed).assignments == state.mapping.assignments
            && s.basis_freq == current_freq
    });
    let precomputed = current.is_some();
    let fresh;
    let s = match current {
        Some(s) => s,
        None => {
            fresh = compute_strategy(
                &state.tiles,
                &state.threads,
                &state.mapping,
                lost,
                failed,
                profile,
                cfg,
            );
            &fresh
        }
    };
    let mut m = state.mapping.clone();
    let mut freq = current_freq.clone();
    mapping::apply(&mut m, &mut freq, &s.delta);
    let mut tiles = plan;
    for t in tiles.iter_mut() {
        if let Some(f) = freq.get(&t.id) {
            t.freq_level = *f;
        }
    }
    let ok = |m: &SystemMapping| {
        m.validate(&tiles, &state.threads).is_ok()
            && profile
                .power_budget_mw
                .is_none_or(|mw| cfg.power.system_power(&tiles, m, &state.threads) <= budget_uw(mw))
    };
    let mut descheduled = Vec::new();
    let mut order: Vec<&ThreadSpec> = state
        .threads
        .iter()
        .filter(|t| t.criticality != CriticalityClass::Essential)
        .collect();
    order.sort_by(|a, b| {
        a.criticality
            .cmp(&b.criticality)
            .then(b.demand.cmp(&a.demand))
            .then(a.id.cmp(&b.id))
    });
    let mut victims = order.into_iter();
    while !ok(&m) {
        let Some(v) = victims.next() else { break };
        if m.assignment(&v.id)
            .is_some_and(|a| a.mode != ExecutionMode::Descheduled)
        {
            m.assignments
                .insert(v.id.clone(), Assignment::descheduled());
            descheduled.push(v.id.clone());
            if profile.power_budget_mw.is_some() {
                apply_budget_gating(&mut m, &tiles, &state.threads);
            }
        }
    }
    AppliedStrategy {
        kind: s.kind,
        infeasible: s.infeasible || !descheduled.is_empty(),
        mapping: m,
        freq,
        descheduled,
        precomputed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CriticalityClass::*;

    fn fig3(sporadic_ml: bool) -> (Vec<Tile>, Vec<ThreadSpec>, SystemMapping) {
        let tiles: Vec<Tile> = (1..=6).map(|i| Tile::new(i, 100)).collect();
        let mut threads = vec![
            ThreadSpec::new("E", Essential, 50),
            ThreadSpec::new("H", High, 50),
            ThreadSpec::new("M", Medium, 50),
            ThreadSpec::new("L", Low, 50),
        ];
        if sporadic_ml {
            threads[2].rt_guarantee = false;
            threads[3].rt_guarantee = false;
        }
        let mut m = SystemMapping::with_active(&tiles);
        m.assignments
            .insert("E".into(), Assignment::new(ExecutionMode::Tmr, [1, 2, 3]));
        m.assignments
            .insert("H".into(), Assignment::new(ExecutionMode::Tmr, [1, 2, 3]));
        m.assignments
            .insert("M".into(), Assignment::new(ExecutionMode::Tmr, [4, 5, 6]));
        m.assignments
            .insert("L".into(), Assignment::new(ExecutionMode::Tmr, [4, 5, 6]));
        (tiles, threads, m)
    }

    fn strategy(profile: &PerformanceProfile, sporadic: bool) -> ReplacementStrategy {
        let (tiles, threads, m) = fig3(sporadic);
        let state = SystemState::new(tiles, threads, m);
        precompute_replacement_strategies(&state, profile, &AllocatorConfig::default())
            .remove(&TileId(3))
            .unwrap()
    }

    fn tiles_of(m: &SystemMapping, t: &str) -> Vec<u32> {
        m.assignments[&ThreadId::from(t)]
            .tiles
            .iter()
            .map(|t| t.0)
            .collect()
    }

    #[test]
    fn function_profile_prunes_low_criticality() {
        let s = strategy(&PerformanceProfile::builtin("Function").unwrap(), false);
        assert_eq!(s.kind, StrategyKind::PruneLowCriticality);
        assert!(!s.infeasible);
        assert_eq!(tiles_of(&s.target, "E"), vec![1, 2, 6]);
        assert_eq!(tiles_of(&s.target, "H"), vec![1, 2, 6]);
        assert_eq!(tiles_of(&s.target, "M"), vec![4, 5]);
        assert_eq!(tiles_of(&s.target, "L"), vec![4, 5]);
        assert_eq!(
            s.target.assignments[&ThreadId::from("M")].mode,
            ExecutionMode::Dmr
        );
    }

    #[test]
    fn speed_profile_raises_frequency_on_two_tiles() {
        let s = strategy(&PerformanceProfile::builtin("Speed").unwrap(), false);
        assert_eq!(s.kind, StrategyKind::FrequencyIncrease);
        assert_eq!(tiles_of(&s.target, "E"), vec![1, 2, 6]);
        assert_eq!(tiles_of(&s.target, "H"), vec![1, 2, 5]);
        assert_eq!(tiles_of(&s.target, "L"), vec![4, 5, 6]);
        assert_eq!(s.target_freq[&TileId(5)], FreqLevel(1_500));
        assert_eq!(s.target_freq[&TileId(6)], FreqLevel(1_500));
        assert_eq!(s.target_freq[&TileId(4)], FreqLevel::NOMINAL);
    }

    #[test]
    fn energy_profile_reduces_time_shares_and_idles_a_tile() {
        let p = PerformanceProfile::builtin("Energy")
            .unwrap()
            .with_budget(Some(2_200));
        let s = strategy(&p, true);
        assert_eq!(s.kind, StrategyKind::TimeShareReduction);
        assert_eq!(
            s.target.assignments[&ThreadId::from("L")]
                .time_share
                .permille(),
            250
        );
        assert_eq!(
            s.target.assignments[&ThreadId::from("M")]
                .time_share
                .permille(),
            750
        );
        assert_eq!(tiles_of(&s.target, "E"), vec![1, 2, 6]);
        assert_eq!(tiles_of(&s.target, "H"), vec![1, 2, 5]);
        assert!(s.target.idle_gated.contains(&TileId(4)));
        let (tiles, threads, _) = fig3(true);
        let live: Vec<Tile> = tiles.into_iter().filter(|t| t.id != TileId(3)).collect();
        let power = AllocatorConfig::default()
            .power
            .system_power(&live, &s.target, &threads);
        assert_eq!(power, Power::from_integer(1_575_000));
    }

    #[test]
    fn applying_a_current_strategy_uses_it() {
        let p = PerformanceProfile::builtin("Function").unwrap();
        let (tiles, threads, m) = fig3(false);
        let mut state = SystemState::new(tiles, threads, m);
        let s = precompute_replacement_strategies(&state, &p, &AllocatorConfig::default())
            .remove(&TileId(3))
            .unwrap();
        let lost = LostReplica::on_tile(&state.mapping, TileId(3));
        state.mapping = state.mapping.without_tile(TileId(3));
        state.tile_mut(TileId(3)).unwrap().health = crate::model::TileHealth::PermanentlyDefective;
        let applied = apply_replacement_strategy(
            &state,
            TileId(3),
            Some(&s),
            &lost,
            &p,
            &AllocatorConfig::default(),
        );
        assert!(applied.precomputed);
        assert_eq!(applied.mapping.assignments, s.target.assignments);
        applied
            .mapping
            .validate(&state.tiles, &state.threads)
            .unwrap();
    }

    #[test]
    fn empty_tile_needs_no_edits() {
        let tiles: Vec<Tile> = (1..=4).map(|i| Tile::new(i, 100)).collect();
        let threads = vec![ThreadSpec::new("E", Essential, 50)];
        let mut m = SystemMapping::with_active(&tiles);
        m.assignments
            .insert("E".into(), Assignment::new(ExecutionMode::Tmr, [1, 2, 3]));
        let state = SystemState::new(tiles, threads, m);
        let p = PerformanceProfile::builtin("Speed").unwrap();
        let s = precompute_replacement_strategies(&state, &p, &AllocatorConfig::default());
        assert!(s[&TileId(4)].delta.is_empty());
        assert!(!s[&TileId(4)].infeasible);
    }
}
