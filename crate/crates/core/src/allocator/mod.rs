//! Mixed-criticality mapping of replicated threads onto tiles.

mod gating;
mod heuristic;
mod oracle;
pub mod packing;
mod profile;
mod strategy;

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::energy::{budget_uw, Power, PowerModel};
use crate::mapping::{Assignment, SystemMapping};
use crate::model::{
    CriticalityClass, ExecutionMode, FreqLevel, Load, ThreadId, ThreadSpec, Tile, TileHealth,
    TimeShare,
};
use packing::{Bin, Item};

pub use gating::{minimize_active_tiles, minimum_active_tiles};
pub use heuristic::{map_threads, map_threads_with, Infeasible};
pub use oracle::{
    brute_force_map, brute_force_map_with, OracleResult, ORACLE_MAX_THREADS, ORACLE_MAX_TILES,
};
pub use profile::{PerformanceProfile, ProfileError, BUILTIN_NAMES};
pub use strategy::{
    apply_replacement_strategy, compute_strategy, precompute_replacement_strategies,
    select_strategy_kind, AppliedStrategy, LostReplica, ReplacementStrategy, StrategyKind,
};

/// Settings shared by every allocator operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocatorConfig {
    pub power: PowerModel,
    /// Available frequency levels, ascending.
    pub frequency_levels: Vec<FreqLevel>,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        AllocatorConfig {
            power: PowerModel::default(),
            frequency_levels: FreqLevel::default_steps(),
        }
    }
}

/// Weight of one replica of a thread of class `c`. Each class outweighs
/// every combination of up to 63 replicas of weaker classes.
pub fn criticality_weight(c: CriticalityClass) -> u64 {
    64u64.pow(c.rank())
}

/// Scheduled time share (permille) and replicas summed over one class.
pub type Tier = (u64, u64);

/// Mapping quality. Classes are compared from Essential down, each by its
/// scheduled time share and then its replica count; power breaks ties.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    /// Indexed by [`tier_index`].
    pub tiers: [Tier; 4],
    /// Criticality-weighted replication.
    pub protection: u64,
    /// Criticality-weighted time share of scheduled threads.
    pub service: u64,
    /// Modeled power draw in microwatts.
    pub power: Power,
}

/// 0 for Essential up to 3 for Low.
pub fn tier_index(c: CriticalityClass) -> usize {
    4 - c.rank() as usize
}

impl Objective {
    pub fn of(mapping: &SystemMapping, threads: &[ThreadSpec], power: Power) -> Objective {
        let mut tiers = [(0, 0); 4];
        let mut protection = 0;
        let mut service = 0;
        for spec in threads {
            if let Some(a) = mapping.assignment(&spec.id) {
                let w = criticality_weight(spec.criticality);
                let replicas = a.mode.replication_factor() as u64;
                let share = if a.mode == ExecutionMode::Descheduled {
                    0
                } else {
                    a.time_share.permille()
                };
                let tier = &mut tiers[tier_index(spec.criticality)];
                tier.0 += share;
                tier.1 += replicas;
                protection += w * replicas;
                service += w * share;
            }
        }
        Objective {
            tiers,
            protection,
            service,
            power,
        }
    }

    /// `Greater` means better.
    pub fn compare(&self, other: &Objective) -> Ordering {
        self.tiers
            .cmp(&other.tiers)
            .then(other.power.cmp(&self.power))
    }

    /// Tiers folded into one number with the same order: each tier is
    /// `share * 64 + replicas` in its own 20-bit digit. Exact for instances
    /// the oracle accepts.
    pub fn score(&self) -> u128 {
        self.tiers.iter().fold(0u128, |acc, &(share, replicas)| {
            (acc << 20) + u128::from(share) * 64 + u128::from(replicas)
        })
    }

    /// `1 - score / best.score`, or zero when `self` is at least as good.
    pub fn gap_to(&self, best: &Objective) -> f64 {
        if self.compare(best) != Ordering::Less || best.score() == 0 {
            return 0.0;
        }
        1.0 - self.score() as f64 / best.score() as f64
    }
}

/// Tiles as the planner sees them: defective tiles are dropped and every
/// other tile is assumed to be back in service.
pub fn planning_tiles(tiles: &[Tile]) -> Vec<Tile> {
    tiles
        .iter()
        .filter(|t| t.health != TileHealth::PermanentlyDefective)
        .map(|t| {
            let mut t = t.clone();
            t.health = TileHealth::Healthy;
            t
        })
        .collect()
}

/// Modes of `class` that fit on `usable` tiles, strongest first.
pub fn attainable(
    profile: &PerformanceProfile,
    class: CriticalityClass,
    usable: usize,
) -> Vec<ExecutionMode> {
    profile
        .allowed(class)
        .iter()
        .copied()
        .filter(|m| m.replication_factor() <= usable)
        .collect()
}

/// Position of `mode` in the attainable list of `class`; descheduled and
/// unlisted modes sit past the end.
pub fn list_position(
    profile: &PerformanceProfile,
    class: CriticalityClass,
    usable: usize,
    mode: ExecutionMode,
) -> usize {
    let list = attainable(profile, class, usable);
    list.iter().position(|m| *m == mode).unwrap_or(list.len())
}

/// First pair of running threads (stronger class, weaker class) where the
/// more critical thread sits at a weaker list position.
pub fn monotonicity_violation(
    mapping: &SystemMapping,
    threads: &[ThreadSpec],
    profile: &PerformanceProfile,
    usable: usize,
) -> Option<(ThreadId, ThreadId)> {
    let pos: Vec<(CriticalityClass, usize, &ThreadId)> = threads
        .iter()
        .filter_map(|t| {
            let mode = mapping
                .assignment(&t.id)
                .map_or(ExecutionMode::Descheduled, |a| a.mode);
            (mode != ExecutionMode::Descheduled).then(|| {
                (
                    t.criticality,
                    list_position(profile, t.criticality, usable, mode),
                    &t.id,
                )
            })
        })
        .collect();
    for (ca, pa, a) in &pos {
        for (cb, pb, b) in &pos {
            if ca > cb && pa > pb {
                return Some(((*a).clone(), (*b).clone()));
            }
        }
    }
    None
}

/// Per-thread choice the heuristic and the oracle search over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Choice {
    pub mode: ExecutionMode,
    pub share: TimeShare,
}

impl Choice {
    pub const DESCHEDULED: Choice = Choice {
        mode: ExecutionMode::Descheduled,
        share: TimeShare::FULL,
    };
}

/// Threads ordered by criticality then demand, both descending.
pub(crate) fn mapping_order(threads: &[ThreadSpec]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..threads.len()).collect();
    order.sort_by(|&a, &b| {
        threads[b]
            .criticality
            .cmp(&threads[a].criticality)
            .then(threads[b].demand.cmp(&threads[a].demand))
            .then(threads[a].id.cmp(&threads[b].id))
    });
    order
}

/// Places `choices` (indexed like `threads`, `None` = not yet considered) on
/// `tiles` and checks the power budget. Returns the resulting mapping and its
/// power draw.
pub(crate) fn realize(
    threads: &[ThreadSpec],
    choices: &[Option<Choice>],
    tiles: &[Tile],
    profile: &PerformanceProfile,
    cfg: &AllocatorConfig,
    exact_only: bool,
) -> Option<(SystemMapping, Power)> {
    let order = mapping_order(threads);
    let mut items = Vec::new();
    let mut owners = Vec::new();
    for &i in &order {
        if let Some(c) = choices[i] {
            if c.mode != ExecutionMode::Descheduled {
                items.push(Item {
                    replicas: c.mode.replication_factor(),
                    load: threads[i].replica_load(c.share),
                });
                owners.push(i);
            }
        }
    }
    let bins: Vec<Bin> = tiles
        .iter()
        .map(|t| Bin {
            tile: t.id,
            room: t.capacity_at(t.freq_level),
        })
        .collect();
    let placement = if exact_only {
        packing::pack_exact(&items, &bins)?
    } else {
        packing::pack(&items, &bins)?
    };
    let mut mapping = SystemMapping {
        assignments: BTreeMap::new(),
        active_tiles: tiles.iter().map(|t| t.id).collect(),
        idle_gated: Default::default(),
    };
    for (i, c) in choices.iter().enumerate() {
        if let Some(c) = c {
            mapping.assignments.insert(
                threads[i].id.clone(),
                Assignment {
                    mode: c.mode,
                    tiles: Default::default(),
                    time_share: c.share,
                },
            );
        }
    }
    for (k, &i) in owners.iter().enumerate() {
        mapping
            .assignments
            .get_mut(&threads[i].id)
            .expect("inserted")
            .tiles = placement[k].clone();
    }
    let considered: Vec<ThreadSpec> = threads
        .iter()
        .zip(choices)
        .filter(|(_, c)| c.is_some())
        .map(|(t, _)| t.clone())
        .collect();
    if profile.power_budget_mw.is_some() {
        apply_budget_gating(&mut mapping, tiles, &considered);
    }
    let power = cfg.power.system_power(tiles, &mapping, &considered);
    if let Some(mw) = profile.power_budget_mw {
        if power > budget_uw(mw) {
            return None;
        }
    }
    Some((mapping, power))
}

/// Memoized packing feasibility for one set of tiles, keyed by the sorted
/// (replicas, load) items. Only valid without a power budget.
pub(crate) struct FitCache {
    bins: Vec<Bin>,
    known: RefCell<HashMap<Vec<(usize, u64)>, bool>>,
}

impl FitCache {
    pub fn new(tiles: &[Tile]) -> FitCache {
        FitCache {
            bins: tiles
                .iter()
                .map(|t| Bin {
                    tile: t.id,
                    room: t.capacity_at(t.freq_level),
                })
                .collect(),
            known: RefCell::new(HashMap::new()),
        }
    }

    pub fn fits(&self, threads: &[ThreadSpec], choices: &[Option<Choice>]) -> bool {
        let mut key: Vec<(usize, u64)> = choices
            .iter()
            .zip(threads)
            .filter_map(|(c, t)| {
                c.filter(|c| c.mode != ExecutionMode::Descheduled)
                    .map(|c| (c.mode.replication_factor(), t.replica_load(c.share).0))
            })
            .collect();
        key.sort_unstable();
        if let Some(&fits) = self.known.borrow().get(&key) {
            return fits;
        }
        let items: Vec<Item> = key
            .iter()
            .map(|&(replicas, load)| Item {
                replicas,
                load: Load(load),
            })
            .collect();
        let fits = packing::pack_exact(&items, &self.bins).is_some();
        self.known.borrow_mut().insert(key, fits);
        fits
    }
}

/// Under a power budget, tiles hosting nothing are gated and partly idle
/// tiles gate themselves while idle.
pub(crate) fn apply_budget_gating(
    mapping: &mut SystemMapping,
    tiles: &[Tile],
    threads: &[ThreadSpec],
) {
    let used = mapping.used_tiles();
    mapping.active_tiles = tiles
        .iter()
        .map(|t| t.id)
        .filter(|t| used.contains(t))
        .collect();
    mapping.idle_gated = tiles
        .iter()
        .filter(|t| {
            used.contains(&t.id) && mapping.tile_load(t.id, threads) < t.capacity_at(t.freq_level)
        })
        .map(|t| t.id)
        .collect();
}

pub(crate) fn tile_room(mapping: &SystemMapping, tile: &Tile, threads: &[ThreadSpec]) -> Load {
    tile.capacity_at(tile.freq_level)
        .saturating_sub(mapping.tile_load(tile.id, threads))
}
