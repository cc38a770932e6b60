//! Exhaustive search for the best mapping on small instances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::SystemMapping;
use crate::model::{CriticalityClass, ExecutionMode, ThreadSpec, Tile, TimeShare};

use super::{
    attainable, list_position, mapping_order, planning_tiles, realize, tier_index, AllocatorConfig,
    Choice, FitCache, Objective, PerformanceProfile, Tier,
};

pub const ORACLE_MAX_TILES: usize = 8;
pub const ORACLE_MAX_THREADS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleResult {
    pub mapping: SystemMapping,
    pub objective: Objective,
}

/// Best criticality-monotone mapping over every combination of allowed
/// mode, time share and descheduling per thread, with exact packing. `Ok(None)` means no mapping
/// keeps every Essential thread scheduled.
pub fn brute_force_map(
    threads: &[ThreadSpec],
    tiles: &[Tile],
    profile: &PerformanceProfile,
) -> Result<Option<OracleResult>> {
    brute_force_map_with(threads, tiles, profile, &AllocatorConfig::default())
}

pub fn brute_force_map_with(
    threads: &[ThreadSpec],
    tiles: &[Tile],
    profile: &PerformanceProfile,
    cfg: &AllocatorConfig,
) -> Result<Option<OracleResult>> {
    if tiles.len() > ORACLE_MAX_TILES || threads.len() > ORACLE_MAX_THREADS {
        return Err(Error::OracleTooLarge {
            tiles: tiles.len(),
            threads: threads.len(),
        });
    }
    let plan = planning_tiles(tiles);
    let order = mapping_order(threads);
    let options: Vec<Vec<(Choice, Option<usize>)>> = threads
        .iter()
        .map(|t| {
            let shares: Vec<TimeShare> = if t.rt_guarantee {
                vec![TimeShare::FULL]
            } else {
                TimeShare::grid().into_iter().rev().collect()
            };
            let mut opts: Vec<Choice> = attainable(profile, t.criticality, plan.len())
                .into_iter()
                .flat_map(|mode| shares.iter().map(move |&share| Choice { mode, share }))
                .collect();
            // Most valuable first so good incumbents prune early.
            opts.sort_by_key(|c| std::cmp::Reverse((c.share, c.mode.replication_factor())));
            if t.criticality != CriticalityClass::Essential {
                opts.push(Choice::DESCHEDULED);
            }
            opts.into_iter()
                .map(|c| {
                    let running = c.mode != ExecutionMode::Descheduled;
                    (
                        c,
                        running.then(|| list_position(profile, t.criticality, plan.len(), c.mode)),
                    )
                })
                .collect()
        })
        .collect();
    // Best tiers still obtainable from position k onward.
    let mut tail = vec![[(0u64, 0u64); 4]; order.len() + 1];
    for k in (0..order.len()).rev() {
        let i = order[k];
        let (s, r) = options[i]
            .iter()
            .map(|(c, _)| (scheduled_share(c), c.mode.replication_factor() as u64))
            .fold((0, 0), |(a, b), (s, r)| (a.max(s), b.max(r)));
        tail[k] = tail[k + 1];
        let t = &mut tail[k][tier_index(threads[i].criticality)];
        t.0 += s;
        t.1 += r;
    }
    let mut search = Search {
        threads,
        tiles: &plan,
        profile,
        cfg,
        order: &order,
        options: &options,
        tail: &tail,
        fits: FitCache::new(&plan),
        choices: vec![None; threads.len()],
        positions: vec![None; threads.len()],
        best: None,
    };
    search.dfs(0, [(0, 0); 4]);
    Ok(search.best)
}

fn scheduled_share(c: &Choice) -> u64 {
    if c.mode == crate::model::ExecutionMode::Descheduled {
        0
    } else {
        c.share.permille()
    }
}

struct Search<'a> {
    threads: &'a [ThreadSpec],
    tiles: &'a [Tile],
    profile: &'a PerformanceProfile,
    cfg: &'a AllocatorConfig,
    order: &'a [usize],
    /// Per thread: each choice with its list position, `None` when descheduled.
    options: &'a [Vec<(Choice, Option<usize>)>],
    tail: &'a [[Tier; 4]],
    fits: FitCache,
    choices: Vec<Option<Choice>>,
    /// List positions of the chosen running threads.
    positions: Vec<Option<usize>>,
    best: Option<OracleResult>,
}

impl Search<'_> {
    fn dfs(&mut self, k: usize, tiers: [Tier; 4]) {
        if let Some(best) = &self.best {
            let mut bound = tiers;
            for (b, t) in bound.iter_mut().zip(&self.tail[k]) {
                b.0 += t.0;
                b.1 += t.1;
            }
            if bound < best.objective.tiers {
                return;
            }
        }
        if k == self.order.len() {
            let Some((mapping, power)) = realize(
                self.threads,
                &self.choices,
                self.tiles,
                self.profile,
                self.cfg,
                true,
            ) else {
                return;
            };
            let objective = Objective::of(&mapping, self.threads, power);
            if self
                .best
                .as_ref()
                .is_none_or(|b| objective.compare(&b.objective) == std::cmp::Ordering::Greater)
            {
                self.best = Some(OracleResult { mapping, objective });
            }
            return;
        }
        let i = self.order[k];
        let tier = tier_index(self.threads[i].criticality);
        for &(c, pos) in &self.options[i] {
            if pos.is_some_and(|p| !self.monotone_with(i, p)) {
                continue;
            }
            self.choices[i] = Some(c);
            self.positions[i] = pos;
            // A prefix that does not fit cannot be completed.
            if self.prefix_fits() {
                let mut next = tiers;
                next[tier].0 += scheduled_share(&c);
                next[tier].1 += c.mode.replication_factor() as u64;
                self.dfs(k + 1, next);
            }
        }
        self.positions[i] = None;
        self.choices[i] = None;
    }

    fn prefix_fits(&self) -> bool {
        if self.profile.power_budget_mw.is_some() {
            return realize(
                self.threads,
                &self.choices,
                self.tiles,
                self.profile,
                self.cfg,
                true,
            )
            .is_some();
        }
        self.fits.fits(self.threads, &self.choices)
    }

    /// Whether thread `i` running at list position `pos` keeps the chosen
    /// prefix criticality monotone. Descheduled threads constrain nobody.
    fn monotone_with(&self, i: usize, pos: usize) -> bool {
        let class = self.threads[i].criticality;
        self.positions
            .iter()
            .enumerate()
            .all(|(j, other)| match other {
                Some(other_pos) if j != i => {
                    let other_class = self.threads[j].criticality;
                    (other_class <= class || *other_pos <= pos)
                        && (other_class >= class || pos <= *other_pos)
                }
                _ => true,
            })
    }
}
