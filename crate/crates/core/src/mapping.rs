//! Thread-to-tile assignments and mapping deltas.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{
    effective_capacity, ExecutionMode, FreqLevel, Load, ThreadId, ThreadSpec, Tile, TileHealth,
    TileId, TimeShare,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub mode: ExecutionMode,
    pub tiles: BTreeSet<TileId>,
    #[serde(default)]
    pub time_share: TimeShare,
}

impl Assignment {
    pub fn descheduled() -> Self {
        Assignment {
            mode: ExecutionMode::Descheduled,
            tiles: BTreeSet::new(),
            time_share: TimeShare::FULL,
        }
    }

    pub fn new(mode: ExecutionMode, tiles: impl IntoIterator<Item = u32>) -> Self {
        Assignment {
            mode,
            tiles: tiles.into_iter().map(TileId).collect(),
            time_share: TimeShare::FULL,
        }
    }
}

/// The current thread-to-tile assignment.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SystemMapping {
    pub assignments: BTreeMap<ThreadId, Assignment>,
    /// Tiles not clock-gated.
    pub active_tiles: BTreeSet<TileId>,
    /// Active tiles that clock-gate themselves while idle within a period.
    #[serde(default)]
    pub idle_gated: BTreeSet<TileId>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MappingViolation {
    #[error("mapping references undeclared thread {0}")]
    UnknownThread(ThreadId),
    #[error("mapping references undeclared {0}")]
    UnknownTile(TileId),
    #[error("thread {thread} runs {mode} on {hosts} tiles")]
    ReplicaCount {
        thread: ThreadId,
        mode: ExecutionMode,
        hosts: usize,
    },
    #[error("{tile} is {health:?} but hosts thread {thread}")]
    UnusableHost {
        thread: ThreadId,
        tile: TileId,
        health: TileHealth,
    },
    #[error("{tile} is loaded with {load} but only delivers {capacity}")]
    OverCapacity {
        tile: TileId,
        load: Load,
        capacity: Load,
    },
    #[error("thread {0} has no assignment")]
    MissingThread(ThreadId),
}

impl SystemMapping {
    pub fn with_active(tiles: &[Tile]) -> Self {
        SystemMapping {
            assignments: BTreeMap::new(),
            active_tiles: tiles
                .iter()
                .filter(|t| {
                    t.health != TileHealth::ClockGated
                        && t.health != TileHealth::PermanentlyDefective
                })
                .map(|t| t.id)
                .collect(),
            idle_gated: BTreeSet::new(),
        }
    }

    pub fn assignment(&self, thread: &ThreadId) -> Option<&Assignment> {
        self.assignments.get(thread)
    }

    pub fn hosts(&self, thread: &ThreadId) -> impl Iterator<Item = TileId> + '_ {
        self.assignments
            .get(thread)
            .into_iter()
            .flat_map(|a| a.tiles.iter().copied())
    }

    /// Threads with a replica on `tile`, in id order.
    pub fn threads_on(&self, tile: TileId) -> impl Iterator<Item = &ThreadId> + '_ {
        self.assignments
            .iter()
            .filter(move |(_, a)| a.tiles.contains(&tile))
            .map(|(t, _)| t)
    }

    /// Summed replica load on `tile`.
    pub fn tile_load(&self, tile: TileId, threads: &[ThreadSpec]) -> Load {
        threads
            .iter()
            .filter_map(|spec| {
                let a = self.assignments.get(&spec.id)?;
                a.tiles
                    .contains(&tile)
                    .then(|| spec.replica_load(a.time_share))
            })
            .sum()
    }

    pub fn used_tiles(&self) -> BTreeSet<TileId> {
        self.assignments
            .values()
            .flat_map(|a| a.tiles.iter().copied())
            .collect()
    }

    /// Checks every structural invariant against the declared tiles and threads.
    pub fn validate(&self, tiles: &[Tile], threads: &[ThreadSpec]) -> Result<(), MappingViolation> {
        let tile_by_id: BTreeMap<TileId, &Tile> = tiles.iter().map(|t| (t.id, t)).collect();
        for (thread, a) in &self.assignments {
            if !threads.iter().any(|s| &s.id == thread) {
                return Err(MappingViolation::UnknownThread(thread.clone()));
            }
            if a.tiles.len() != a.mode.replication_factor() {
                return Err(MappingViolation::ReplicaCount {
                    thread: thread.clone(),
                    mode: a.mode,
                    hosts: a.tiles.len(),
                });
            }
            for tile in &a.tiles {
                let t = tile_by_id
                    .get(tile)
                    .ok_or(MappingViolation::UnknownTile(*tile))?;
                if matches!(
                    t.health,
                    TileHealth::PermanentlyDefective | TileHealth::ClockGated
                ) {
                    return Err(MappingViolation::UnusableHost {
                        thread: thread.clone(),
                        tile: *tile,
                        health: t.health,
                    });
                }
            }
        }
        for spec in threads {
            if !self.assignments.contains_key(&spec.id) {
                return Err(MappingViolation::MissingThread(spec.id.clone()));
            }
        }
        for tile in tiles {
            // Replicas on a reconfiguring tile are suspended and place no load.
            if !tile.health.is_running() {
                continue;
            }
            let load = self.tile_load(tile.id, threads);
            let capacity = effective_capacity(tile);
            if load > capacity {
                return Err(MappingViolation::OverCapacity {
                    tile: tile.id,
                    load,
                    capacity,
                });
            }
        }
        Ok(())
    }

    /// Removes `tile` from every assignment, degrading each affected thread to
    /// the mode matching its remaining replica count.
    pub fn without_tile(&self, tile: TileId) -> SystemMapping {
        let mut out = self.clone();
        for a in out.assignments.values_mut() {
            if a.tiles.remove(&tile) {
                a.mode = ExecutionMode::with_replicas(a.tiles.len());
                if a.tiles.is_empty() {
                    a.time_share = TimeShare::FULL;
                }
            }
        }
        out.active_tiles.remove(&tile);
        out.idle_gated.remove(&tile);
        out
    }
}

/// One step of a mapping delta.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "edit")]
pub enum MappingEdit {
    Migrate {
        thread: ThreadId,
        from: TileId,
        to: TileId,
    },
    AddReplica {
        thread: ThreadId,
        tile: TileId,
    },
    DropReplica {
        thread: ThreadId,
        tile: TileId,
    },
    SetMode {
        thread: ThreadId,
        mode: ExecutionMode,
    },
    SetTimeShare {
        thread: ThreadId,
        share: TimeShare,
    },
    SetFrequency {
        tile: TileId,
        level: FreqLevel,
    },
    Gate {
        tile: TileId,
    },
    Ungate {
        tile: TileId,
    },
    GateIdle {
        tile: TileId,
    },
    UngateIdle {
        tile: TileId,
    },
}

impl fmt::Display for MappingEdit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MappingEdit::Migrate { thread, from, to } => {
                write!(f, "migrate {thread} {from} -> {to}")
            }
            MappingEdit::AddReplica { thread, tile } => write!(f, "add {thread} on {tile}"),
            MappingEdit::DropReplica { thread, tile } => write!(f, "drop {thread} from {tile}"),
            MappingEdit::SetMode { thread, mode } => write!(f, "{thread} -> {mode}"),
            MappingEdit::SetTimeShare { thread, share } => write!(f, "{thread} time share {share}"),
            MappingEdit::SetFrequency { tile, level } => write!(f, "{tile} frequency {level}"),
            MappingEdit::Gate { tile } => write!(f, "gate {tile}"),
            MappingEdit::Ungate { tile } => write!(f, "ungate {tile}"),
            MappingEdit::GateIdle { tile } => write!(f, "idle-gate {tile}"),
            MappingEdit::UngateIdle { tile } => write!(f, "stop idle-gating {tile}"),
        }
    }
}

/// Frequency level per tile.
pub type FrequencyPlan = BTreeMap<TileId, FreqLevel>;

/// Edits turning (`from`, `from_freq`) into (`to`, `to_freq`).
pub fn diff(
    from: &SystemMapping,
    from_freq: &FrequencyPlan,
    to: &SystemMapping,
    to_freq: &FrequencyPlan,
) -> Vec<MappingEdit> {
    let mut edits = Vec::new();
    let threads: BTreeSet<&ThreadId> = from
        .assignments
        .keys()
        .chain(to.assignments.keys())
        .collect();
    let empty = Assignment::descheduled();
    for thread in threads {
        let a = from.assignments.get(thread).unwrap_or(&empty);
        let b = to.assignments.get(thread).unwrap_or(&empty);
        let removed: Vec<TileId> = a.tiles.difference(&b.tiles).copied().collect();
        let added: Vec<TileId> = b.tiles.difference(&a.tiles).copied().collect();
        let paired = removed.len().min(added.len());
        for i in 0..paired {
            edits.push(MappingEdit::Migrate {
                thread: thread.clone(),
                from: removed[i],
                to: added[i],
            });
        }
        for &tile in &removed[paired..] {
            edits.push(MappingEdit::DropReplica {
                thread: thread.clone(),
                tile,
            });
        }
        for &tile in &added[paired..] {
            edits.push(MappingEdit::AddReplica {
                thread: thread.clone(),
                tile,
            });
        }
        if a.mode != b.mode || !from.assignments.contains_key(thread) {
            edits.push(MappingEdit::SetMode {
                thread: thread.clone(),
                mode: b.mode,
            });
        }
        if a.time_share != b.time_share {
            edits.push(MappingEdit::SetTimeShare {
                thread: thread.clone(),
                share: b.time_share,
            });
        }
    }
    let tiles: BTreeSet<&TileId> = from_freq.keys().chain(to_freq.keys()).collect();
    for tile in tiles {
        match (from_freq.get(tile), to_freq.get(tile)) {
            (Some(x), Some(y)) if x != y => edits.push(MappingEdit::SetFrequency {
                tile: *tile,
                level: *y,
            }),
            (None, Some(y)) => edits.push(MappingEdit::SetFrequency {
                tile: *tile,
                level: *y,
            }),
            _ => {}
        }
    }
    for tile in from.active_tiles.difference(&to.active_tiles) {
        edits.push(MappingEdit::Gate { tile: *tile });
    }
    for tile in to.active_tiles.difference(&from.active_tiles) {
        edits.push(MappingEdit::Ungate { tile: *tile });
    }
    for tile in from.idle_gated.difference(&to.idle_gated) {
        edits.push(MappingEdit::UngateIdle { tile: *tile });
    }
    for tile in to.idle_gated.difference(&from.idle_gated) {
        edits.push(MappingEdit::GateIdle { tile: *tile });
    }
    edits
}

/// Applies `edits` in order.
pub fn apply(mapping: &mut SystemMapping, freq: &mut FrequencyPlan, edits: &[MappingEdit]) {
    for edit in edits {
        match edit {
            MappingEdit::Migrate { thread, from, to } => {
                let a = mapping
                    .assignments
                    .entry(thread.clone())
                    .or_insert_with(Assignment::descheduled);
                a.tiles.remove(from);
                a.tiles.insert(*to);
            }
            MappingEdit::AddReplica { thread, tile } => {
                let a = mapping
                    .assignments
                    .entry(thread.clone())
                    .or_insert_with(Assignment::descheduled);
                a.tiles.insert(*tile);
            }
            MappingEdit::DropReplica { thread, tile } => {
                if let Some(a) = mapping.assignments.get_mut(thread) {
                    a.tiles.remove(tile);
                }
            }
            MappingEdit::SetMode { thread, mode } => {
                let a = mapping
                    .assignments
                    .entry(thread.clone())
                    .or_insert_with(Assignment::descheduled);
                a.mode = *mode;
            }
            MappingEdit::SetTimeShare { thread, share } => {
                let a = mapping
                    .assignments
                    .entry(thread.clone())
                    .or_insert_with(Assignment::descheduled);
                a.time_share = *share;
            }
            MappingEdit::SetFrequency { tile, level } => {
                freq.insert(*tile, *level);
            }
            MappingEdit::Gate { tile } => {
                mapping.active_tiles.remove(tile);
            }
            MappingEdit::Ungate { tile } => {
                mapping.active_tiles.insert(*tile);
            }
            MappingEdit::GateIdle { tile } => {
                mapping.idle_gated.insert(*tile);
            }
            MappingEdit::UngateIdle { tile } => {
                mapping.idle_gated.remove(tile);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CriticalityClass;
    use proptest::prelude::*;

    fn tiles(n: u32) -> Vec<Tile> {
        (1..=n).map(|i| Tile::new(i, 100)).collect()
    }

    fn threads() -> Vec<ThreadSpec> {
        vec![
            ThreadSpec::new("E", CriticalityClass::Essential, 50),
            ThreadSpec::new("L", CriticalityClass::Low, 50),
        ]
    }

    #[test]
    fn validate_catches_violations() {
        let ts = tiles(3);
        let th = threads();
        let mut m = SystemMapping::with_active(&ts);
        m.assignments
            .insert("E".into(), Assignment::new(ExecutionMode::Tmr, [1, 2, 3]));
        m.assignments
            .insert("L".into(), Assignment::new(ExecutionMode::Dmr, [1, 2]));
        assert!(m.validate(&ts, &th).is_ok());

        let mut bad = m.clone();
        bad.assignments.get_mut(&ThreadId::from("L")).unwrap().mode = ExecutionMode::Tmr;
        assert!(matches!(
            bad.validate(&ts, &th),
            Err(MappingViolation::ReplicaCount { .. })
        ));

        let mut bad = m.clone();
        bad.assignments
            .insert("L".into(), Assignment::new(ExecutionMode::Dmr, [1, 9]));
        assert_eq!(
            bad.validate(&ts, &th),
            Err(MappingViolation::UnknownTile(TileId(9)))
        );

        let heavy = vec![
            ThreadSpec::new("E", CriticalityClass::Essential, 60),
            ThreadSpec::new("L", CriticalityClass::Low, 50),
        ];
        assert!(matches!(
            m.validate(&ts, &heavy),
            Err(MappingViolation::OverCapacity { .. })
        ));

        let mut dead = ts.clone();
        dead[2].health = TileHealth::PermanentlyDefective;
        assert!(matches!(
            m.validate(&dead, &th),
            Err(MappingViolation::UnusableHost { .. })
        ));
    }

    #[test]
    fn without_tile_degrades_modes() {
        let mut m = SystemMapping::default();
        m.assignments.insert(
            "E".into(),
            Assignment::new(ExecutionMode::Nmr(4), [1, 2, 3, 4]),
        );
        m.assignments
            .insert("L".into(), Assignment::new(ExecutionMode::Separate, [3]));
        let r = m.without_tile(TileId(3));
        assert_eq!(r.assignments[&ThreadId::from("E")].mode, ExecutionMode::Tmr);
        assert_eq!(
            r.assignments[&ThreadId::from("L")].mode,
            ExecutionMode::Descheduled
        );
    }

    fn arb_mapping() -> impl Strategy<Value = (SystemMapping, FrequencyPlan)> {
        let assignment =
            (proptest::collection::btree_set(1u32..7, 0..4), 1u16..5).prop_map(|(tiles, q)| {
                Assignment {
                    mode: ExecutionMode::with_replicas(tiles.len()),
                    tiles: tiles.into_iter().map(TileId).collect(),
                    time_share: TimeShare(q * 250),
                }
            });
        (
            proptest::collection::btree_map("[A-D]", assignment, 0..4),
            proptest::collection::btree_set(1u32..7, 0..6),
            proptest::collection::btree_set(1u32..7, 0..6),
            proptest::collection::btree_map(1u32..7, 2u16..7, 0..6),
        )
            .prop_map(|(a, active, idle, freq)| {
                (
                    SystemMapping {
                        assignments: a.into_iter().map(|(k, v)| (ThreadId(k), v)).collect(),
                        active_tiles: active.into_iter().map(TileId).collect(),
                        idle_gated: idle.into_iter().map(TileId).collect(),
                    },
                    freq.into_iter()
                        .map(|(t, f)| (TileId(t), FreqLevel(f * 250)))
                        .collect(),
                )
            })
    }

    proptest! {
        #[test]
        fn applying_a_diff_reaches_the_target((a, fa) in arb_mapping(), (b, fb) in arb_mapping()) {
            let edits = diff(&a, &fa, &b, &fb);
            let mut m = a.clone();
            let mut f = fa.clone();
            apply(&mut m, &mut f, &edits);
            // Threads that vanish entirely are represented as descheduled.
            for t in a.assignments.keys() {
                if !b.assignments.contains_key(t) {
                    prop_assert!(m.assignments[t].tiles.is_empty());
                    prop_assert_eq!(m.assignments[t].mode, ExecutionMode::Descheduled);
                }
            }
            m.assignments.retain(|t, _| b.assignments.contains_key(t));
            prop_assert_eq!(&m, &b);
            for (tile, level) in &fb {
                prop_assert_eq!(f.get(tile), Some(level));
            }
        }
    }
}
