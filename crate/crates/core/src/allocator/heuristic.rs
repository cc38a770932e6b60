//! Greedy criticality-ordered mapping with reduction and re-traversal.

use std::cmp::Ordering;

use crate::mapping::SystemMapping;
use crate::model::{CriticalityClass, ExecutionMode, ThreadId, ThreadSpec, Tile, TimeShare};

use super::{
    apply_budget_gating, attainable, mapping_order, minimize_active_tiles, planning_tiles, realize,
    tier_index, AllocatorConfig, Choice, FitCache, Objective, PerformanceProfile,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("essential thread {thread} cannot be given its weakest allowed mode")]
pub struct Infeasible {
    pub thread: ThreadId,
}

/// Per-thread search state: position in the attainable list (`len` means
/// descheduled) and time share.
/// How [`Ctx::retraverse`] raises threads.
#[derive(Debug, Clone, Copy)]
struct Grow {
    /// Left as it is.
    skip: Option<usize>,
    /// Whether descheduled threads may come back.
    revive: bool,
    /// Smallest share first within a class, so equal threads level out.
    /// Otherwise each thread in mapping order grows as far as it can.
    level: bool,
}

impl Grow {
    const ALL: Grow = Grow {
        skip: None,
        revive: true,
        level: true,
    };
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    pos: usize,
    share: TimeShare,
}

struct Ctx<'a> {
    threads: &'a [ThreadSpec],
    lists: Vec<Vec<ExecutionMode>>,
    order: Vec<usize>,
    tiles: Vec<Tile>,
    profile: &'a PerformanceProfile,
    cfg: &'a AllocatorConfig,
    cache: FitCache,
}

impl Ctx<'_> {
    fn choice(&self, i: usize, s: Slot) -> Choice {
        match self.lists[i].get(s.pos) {
            Some(m) => Choice {
                mode: *m,
                share: s.share,
            },
            None => Choice::DESCHEDULED,
        }
    }

    fn realize(&self, slots: &[Option<Slot>]) -> Option<(SystemMapping, crate::energy::Power)> {
        let choices: Vec<Option<Choice>> = slots
            .iter()
            .enumerate()
            .map(|(i, s)| s.map(|s| self.choice(i, s)))
            .collect();
        realize(
            self.threads,
            &choices,
            &self.tiles,
            self.profile,
            self.cfg,
            false,
        )
    }

    fn fits(&self, slots: &[Option<Slot>]) -> bool {
        if self.profile.power_budget_mw.is_some() {
            return self.realize(slots).is_some();
        }
        let choices: Vec<Option<Choice>> = slots
            .iter()
            .enumerate()
            .map(|(i, s)| s.map(|s| self.choice(i, s)))
            .collect();
        self.cache.fits(self.threads, &choices)
    }

    fn class(&self, i: usize) -> CriticalityClass {
        self.threads[i].criticality
    }

    /// Whether thread `i` may sit at `pos` given every other mapped thread.
    /// Descheduled threads do not run and constrain nobody.
    fn monotone_at(&self, slots: &[Option<Slot>], i: usize, pos: usize) -> bool {
        if pos >= self.lists[i].len() {
            return true;
        }
        slots.iter().enumerate().all(|(j, s)| match s {
            Some(s) if j != i && s.pos < self.lists[j].len() => {
                if self.class(j) > self.class(i) {
                    s.pos <= pos
                } else if self.class(j) < self.class(i) {
                    pos <= s.pos
                } else {
                    true
                }
            }
            _ => true,
        })
    }

    /// Largest demand first, later-mapped first on ties.
    /// Candidate with the largest `level`, then demand, then latest in
    /// mapping order.
    fn pick<K: Ord>(
        &self,
        candidates: impl Iterator<Item = usize>,
        level: impl Fn(usize) -> K,
    ) -> Option<usize> {
        candidates.max_by(|&a, &b| {
            let ka = self.order.iter().position(|&x| x == a);
            let kb = self.order.iter().position(|&x| x == b);
            level(a)
                .cmp(&level(b))
                .then(self.threads[a].demand.cmp(&self.threads[b].demand))
                .then(ka.cmp(&kb))
        })
    }

    /// One reduction step on the weakest class that still has something to
    /// give: a mode step on its strongest member, then a time-share step on
    /// its largest share, then descheduling. Thread
    /// `keep` is never touched.
    fn reduce_one(&self, slots: &mut [Option<Slot>], keep: Option<usize>) -> bool {
        for class in [
            CriticalityClass::Low,
            CriticalityClass::Medium,
            CriticalityClass::High,
            CriticalityClass::Essential,
        ] {
            let members: Vec<usize> = (0..slots.len())
                .filter(|&i| slots[i].is_some() && self.class(i) == class && Some(i) != keep)
                .collect();
            let mode_step = self.pick(
                members.iter().copied().filter(|&i| {
                    let s = slots[i].expect("mapped");
                    s.pos + 1 < self.lists[i].len() && self.monotone_at(slots, i, s.pos + 1)
                }),
                |i| std::cmp::Reverse(slots[i].expect("mapped").pos),
            );
            if let Some(i) = mode_step {
                slots[i].as_mut().expect("mapped").pos += 1;
                return true;
            }
            let share_step = self.pick(
                members.iter().copied().filter(|&i| {
                    let s = slots[i].expect("mapped");
                    s.pos < self.lists[i].len()
                        && !self.threads[i].rt_guarantee
                        && s.share.reduced().is_some()
                }),
                |i| slots[i].expect("mapped").share.permille(),
            );
            if let Some(i) = share_step {
                let s = slots[i].as_mut().expect("mapped");
                s.share = s.share.reduced().expect("checked");
                return true;
            }
            if class == CriticalityClass::Essential {
                continue;
            }
            let deschedule = self.pick(
                members.iter().copied().filter(|&i| {
                    let s = slots[i].expect("mapped");
                    s.pos < self.lists[i].len() && self.monotone_at(slots, i, self.lists[i].len())
                }),
                |_| (),
            );
            if let Some(i) = deschedule {
                let s = slots[i].as_mut().expect("mapped");
                s.pos = self.lists[i].len();
                s.share = TimeShare::FULL;
                return true;
            }
        }
        false
    }

    /// Next stronger configuration for thread `i`: revive, raise the mode,
    /// or raise the time share.
    fn promotions(&self, i: usize, s: Slot) -> Vec<Slot> {
        let len = self.lists[i].len();
        let mut out = Vec::new();
        if s.pos >= len {
            if len > 0 {
                let share = if self.threads[i].rt_guarantee {
                    TimeShare::FULL
                } else {
                    TimeShare::FLOOR
                };
                out.push(Slot {
                    pos: len - 1,
                    share,
                });
            }
            return out;
        }
        if let Some(share) = s.share.increased() {
            out.push(Slot { pos: s.pos, share });
        }
        if s.pos > 0 {
            out.push(Slot {
                pos: s.pos - 1,
                share: s.share,
            });
        }
        out
    }

    /// Next weaker configurations for thread `i`: a time-share step, a mode
    /// step, or descheduling.
    fn demotions(&self, i: usize, s: Slot) -> Vec<Slot> {
        let len = self.lists[i].len();
        let mut out = Vec::new();
        if s.pos >= len {
            return out;
        }
        if !self.threads[i].rt_guarantee {
            if let Some(share) = s.share.reduced() {
                out.push(Slot { pos: s.pos, share });
            }
        }
        if s.pos + 1 < len {
            out.push(Slot {
                pos: s.pos + 1,
                share: s.share,
            });
        }
        if self.class(i) != CriticalityClass::Essential {
            out.push(Slot {
                pos: len,
                share: TimeShare::FULL,
            });
        }
        out
    }

    /// Every running member of `class` one mode step weaker, if any can
    /// move and monotonicity still holds.
    fn class_step(
        &self,
        slots: &[Option<Slot>],
        class: CriticalityClass,
    ) -> Option<Vec<Option<Slot>>> {
        let mut out = slots.to_vec();
        let mut moved = false;
        for &i in &self.order {
            if let Some(s) = out[i] {
                if self.class(i) == class && s.pos + 1 < self.lists[i].len() {
                    out[i] = Some(Slot {
                        pos: s.pos + 1,
                        ..s
                    });
                    moved = true;
                }
            }
        }
        let ok = (0..out.len()).all(|i| out[i].is_none_or(|s| self.monotone_at(&out, i, s.pos)));
        (moved && ok).then_some(out)
    }

    /// Redistributes time shares among the running sporadic members of
    /// `class` (other than `skip`) to the feasible combination with the
    /// largest total, modes unchanged. Returns whether anything changed.
    fn refine_shares(
        &self,
        slots: &mut [Option<Slot>],
        class: CriticalityClass,
        skip: Option<usize>,
    ) -> bool {
        let members: Vec<usize> = self
            .order
            .iter()
            .copied()
            .filter(|&i| {
                Some(i) != skip
                    && self.class(i) == class
                    && !self.threads[i].rt_guarantee
                    && slots[i].is_some_and(|s| s.pos < self.lists[i].len())
            })
            .collect();
        if members.len() < 2 || members.len() > 5 {
            return false;
        }
        let total = |slots: &[Option<Slot>]| -> u64 {
            members
                .iter()
                .map(|&i| slots[i].expect("running").share.permille())
                .sum()
        };
        let start = total(slots);
        let mut best: Option<(u64, Vec<Option<Slot>>)> = None;
        let mut work = slots.to_vec();
        self.share_search(&members, 0, &mut work, &mut best);
        match best {
            Some((value, found)) if value > start => {
                slots.copy_from_slice(&found);
                true
            }
            _ => false,
        }
    }

    fn share_search(
        &self,
        members: &[usize],
        k: usize,
        work: &mut Vec<Option<Slot>>,
        best: &mut Option<(u64, Vec<Option<Slot>>)>,
    ) {
        let fixed: u64 = members[..k]
            .iter()
            .map(|&i| work[i].expect("running").share.permille())
            .sum();
        let bound = fixed + 1_000 * (members.len() - k) as u64;
        if best.as_ref().is_some_and(|(v, _)| bound <= *v) {
            return;
        }
        if k == members.len() {
            if self.fits(work) {
                *best = Some((fixed, work.clone()));
            }
            return;
        }
        let i = members[k];
        let keep = work[i];
        for share in TimeShare::grid() {
            work[i] = keep.map(|s| Slot { share, ..s });
            // Later members at the floor is the cheapest completion.
            let floor: Vec<Option<Slot>> = members[k + 1..].iter().map(|&j| work[j]).collect();
            for &j in &members[k + 1..] {
                work[j] = work[j].map(|s| Slot {
                    share: TimeShare::FLOOR,
                    ..s
                });
            }
            let possible = self.fits(work);
            for (&j, s) in members[k + 1..].iter().zip(floor) {
                work[j] = s;
            }
            if possible {
                self.share_search(members, k + 1, work, best);
            }
        }
        work[i] = keep;
    }

    /// Replaces `slots` with `trial` if that improves the objective.
    fn accept(
        &self,
        slots: &mut Vec<Option<Slot>>,
        current: &mut Objective,
        trial: Vec<Option<Slot>>,
    ) -> bool {
        let mut tiers = [(0, 0); 4];
        for (i, s) in trial.iter().enumerate() {
            if let Some(s) = s.filter(|s| s.pos < self.lists[i].len()) {
                let t = &mut tiers[tier_index(self.class(i))];
                t.0 += s.share.permille();
                t.1 += self.lists[i][s.pos].replication_factor() as u64;
            }
        }
        if tiers < current.tiers {
            return false;
        }
        match self.objective(&trial) {
            Some(o) if o.compare(current) == Ordering::Greater => {
                *slots = trial;
                *current = o;
                true
            }
            _ => false,
        }
    }

    fn objective(&self, slots: &[Option<Slot>]) -> Option<Objective> {
        self.realize(slots)
            .map(|(m, power)| Objective::of(&m, self.threads, power))
    }

    /// Local search: a promotion (reviving included) paid for by weaker or
    /// equal threads, one mode step down for a whole class, or a demotion
    /// that lets the others grow. A move is kept only if the objective
    /// improves.
    fn improve(&self, slots: &mut Vec<Option<Slot>>) {
        let Some(mut current) = self.objective(slots) else {
            return;
        };
        let mut classes: Vec<CriticalityClass> =
            self.order.iter().map(|&i| self.class(i)).collect();
        classes.dedup();
        'outer: loop {
            for &i in &self.order {
                let Some(cur) = slots[i] else { continue };
                for next in self.promotions(i, cur) {
                    if !self.monotone_at(slots, i, next.pos) {
                        continue;
                    }
                    let mut trial = slots.clone();
                    trial[i] = Some(next);
                    let mut fits = true;
                    while !self.fits(&trial) {
                        if !self.reduce_one(&mut trial, Some(i)) {
                            fits = false;
                            break;
                        }
                    }
                    if !fits {
                        continue;
                    }
                    self.retraverse(&mut trial, Grow::ALL);
                    if self.accept(slots, &mut current, trial) {
                        log::trace!("promoted {}", self.threads[i].id);
                        continue 'outer;
                    }
                }
            }
            // Giving up something on one thread, optionally after one mode
            // step down for a whole class, can let the others grow more.
            let mut bases = vec![slots.clone()];
            for &class in &classes {
                if let Some(stepped) = self.class_step(slots, class) {
                    let mut trial = stepped.clone();
                    self.retraverse(&mut trial, Grow::ALL);
                    if self.accept(slots, &mut current, trial) {
                        log::trace!("stepped class {class:?} down");
                        continue 'outer;
                    }
                    bases.push(stepped);
                }
            }
            for base in &bases {
                for &class in &classes {
                    let mut trial = base.clone();
                    if self.refine_shares(&mut trial, class, None) {
                        self.retraverse(&mut trial, Grow::ALL);
                        if self.accept(slots, &mut current, trial) {
                            log::trace!("redistributed shares in class {class:?}");
                            continue 'outer;
                        }
                    }
                }
                for &i in &self.order {
                    let Some(cur) = base[i] else { continue };
                    for next in self.demotions(i, cur) {
                        if !self.monotone_at(base, i, next.pos) {
                            continue;
                        }
                        for (revive, level, refine) in [
                            (true, true, false),
                            (false, true, false),
                            (false, false, false),
                            (false, true, true),
                        ] {
                            let mut trial = base.clone();
                            trial[i] = Some(next);
                            if refine {
                                self.refine_shares(&mut trial, self.class(i), Some(i));
                            }
                            let grow = Grow {
                                skip: Some(i),
                                revive,
                                level,
                            };
                            self.retraverse(&mut trial, grow);
                            if self.accept(slots, &mut current, trial) {
                                log::trace!("demoted {}", self.threads[i].id);
                                continue 'outer;
                            }
                        }
                    }
                }
            }
            break;
        }
    }

    /// Undoes reductions among mapped threads, most critical class first,
    /// until nothing more can be raised.
    fn retraverse(&self, slots: &mut [Option<Slot>], grow: Grow) {
        let mut k = 0;
        while k < self.order.len() {
            let class = self.class(self.order[k]);
            let mut end = k;
            while end < self.order.len() && self.class(self.order[end]) == class {
                end += 1;
            }
            let mut members: Vec<usize> = self.order[k..end]
                .iter()
                .copied()
                .filter(|&i| Some(i) != grow.skip)
                .collect();
            'grow: loop {
                if grow.level {
                    members.sort_by_key(|&i| match slots[i] {
                        Some(s) if s.pos >= self.lists[i].len() => 0,
                        Some(s) => s.share.permille(),
                        None => u64::MAX,
                    });
                }
                for &i in &members {
                    let Some(cur) = slots[i] else { continue };
                    if !grow.revive && cur.pos >= self.lists[i].len() {
                        continue;
                    }
                    for next in self.promotions(i, cur) {
                        if !self.monotone_at(slots, i, next.pos) {
                            continue;
                        }
                        slots[i] = Some(next);
                        if self.fits(slots) {
                            continue 'grow;
                        }
                        slots[i] = Some(cur);
                    }
                }
                break;
            }
            k = end;
        }
    }
}

/// Maps `threads` onto `tiles` under `profile` with the default power model
/// and frequency levels.
pub fn map_threads(
    threads: &[ThreadSpec],
    tiles: &[Tile],
    profile: &PerformanceProfile,
) -> Result<SystemMapping, Infeasible> {
    map_threads_with(threads, tiles, profile, &AllocatorConfig::default())
}

/// Threads are taken by criticality then demand, each at the strongest mode
/// it can reach. When a thread does not fit, the weakest class mapped so far
/// gives way first. Once a class is mapped, and again at the end, the list
/// is walked from the top undoing reductions while the mapping stays
/// feasible. Finally, single promotions and demotions are applied while
/// they improve the objective.
pub fn map_threads_with(
    threads: &[ThreadSpec],
    tiles: &[Tile],
    profile: &PerformanceProfile,
    cfg: &AllocatorConfig,
) -> Result<SystemMapping, Infeasible> {
    let plan = planning_tiles(tiles);
    let usable = plan.len();
    let ctx = Ctx {
        threads,
        lists: threads
            .iter()
            .map(|t| attainable(profile, t.criticality, usable))
            .collect(),
        order: mapping_order(threads),
        cache: FitCache::new(&plan),
        tiles: plan,
        profile,
        cfg,
    };
    let mut slots: Vec<Option<Slot>> = vec![None; threads.len()];
    for (k, &i) in ctx.order.iter().enumerate() {
        // Settle each class before weaker classes compete for the room.
        if k > 0 && ctx.class(ctx.order[k - 1]) != ctx.class(i) {
            ctx.retraverse(&mut slots, Grow::ALL);
        }
        let len = ctx.lists[i].len();
        let essential = ctx.class(i) == CriticalityClass::Essential;
        if essential && len == 0 {
            return Err(Infeasible {
                thread: threads[i].id.clone(),
            });
        }
        let floor = slots
            .iter()
            .enumerate()
            .filter_map(|(j, s)| {
                s.filter(|s| ctx.class(j) > ctx.class(i) && s.pos < ctx.lists[j].len())
                    .map(|s| s.pos)
            })
            .max()
            .unwrap_or(0);
        let pos = if essential {
            floor.min(len - 1)
        } else {
            floor.min(len)
        };
        slots[i] = Some(Slot {
            pos,
            share: TimeShare::FULL,
        });
        log::trace!("mapping {} at position {}", threads[i].id, pos);
        while !ctx.fits(&slots) {
            if !ctx.reduce_one(&mut slots, None) {
                return Err(Infeasible {
                    thread: threads[i].id.clone(),
                });
            }
        }
    }

    ctx.retraverse(&mut slots, Grow::ALL);
    ctx.improve(&mut slots);

    let (mut mapping, _) = ctx.realize(&slots).expect("feasible after reduction");
    if profile.power_budget_mw.is_some() {
        mapping = minimize_active_tiles(&ctx.tiles, &mapping, threads);
        apply_budget_gating(&mut mapping, &ctx.tiles, threads);
    }
    Ok(mapping)
}
