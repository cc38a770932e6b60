//! Consolidation onto as few tiles as possible.

use std::collections::BTreeSet;

use crate::mapping::SystemMapping;
use crate::model::{ExecutionMode, ThreadSpec, Tile, TileId};

use super::packing::{self, Bin, Item};

fn items(mapping: &SystemMapping, threads: &[ThreadSpec]) -> (Vec<Item>, Vec<usize>) {
    let mut items = Vec::new();
    let mut owners = Vec::new();
    for (i, spec) in threads.iter().enumerate() {
        if let Some(a) = mapping.assignment(&spec.id) {
            if a.mode != ExecutionMode::Descheduled {
                items.push(Item {
                    replicas: a.mode.replication_factor(),
                    load: spec.replica_load(a.time_share),
                });
                owners.push(i);
            }
        }
    }
    (items, owners)
}

/// Lexicographic k-subsets of `0..n`.
fn subsets(n: usize, k: usize) -> impl Iterator<Item = Vec<usize>> {
    let mut cur: Option<Vec<usize>> = (k <= n).then(|| (0..k).collect());
    std::iter::from_fn(move || {
        let out = cur.clone()?;
        let next = {
            let mut c = out.clone();
            let mut i = k;
            loop {
                if i == 0 {
                    break None;
                }
                i -= 1;
                if c[i] < n - k + i {
                    c[i] += 1;
                    for j in i + 1..k {
                        c[j] = c[j - 1] + 1;
                    }
                    break Some(c);
                }
            }
        };
        cur = next;
        Some(out)
    })
}

fn search(
    items: &[Item],
    tiles: &[Tile],
    below: usize,
) -> Option<(Vec<usize>, packing::Placement)> {
    let total: u64 = items.iter().map(|i| i.load.0 * i.replicas as u64).sum();
    let widest = items.iter().map(|i| i.replicas).max().unwrap_or(0);
    let max_cap = tiles
        .iter()
        .map(|t| t.capacity_at(t.freq_level).0)
        .max()
        .unwrap_or(0);
    let lower = if total == 0 || max_cap == 0 {
        widest
    } else {
        widest.max(total.div_ceil(max_cap) as usize)
    };
    for k in lower..below.min(tiles.len() + 1) {
        for subset in subsets(tiles.len(), k) {
            let bins: Vec<Bin> = subset
                .iter()
                .map(|&b| Bin {
                    tile: tiles[b].id,
                    room: tiles[b].capacity_at(tiles[b].freq_level),
                })
                .collect();
            if bins.iter().map(|b| b.room.0).sum::<u64>() < total {
                continue;
            }
            if let Some(p) = packing::pack(items, &bins) {
                return Some((subset, p));
            }
        }
    }
    None
}

/// Fewest tiles that can host the scheduled replicas of `mapping`.
pub fn minimum_active_tiles(
    tiles: &[Tile],
    mapping: &SystemMapping,
    threads: &[ThreadSpec],
) -> usize {
    let (items, _) = items(mapping, threads);
    if items.is_empty() {
        return 0;
    }
    search(&items, tiles, tiles.len() + 1).map_or(tiles.len(), |(s, _)| s.len())
}

/// Repacks `mapping` onto the fewest tiles (lowest ids first among equally
/// small sets) and marks every other tile gated. A mapping that already uses
/// a minimal number of tiles keeps its placement.
pub fn minimize_active_tiles(
    tiles: &[Tile],
    mapping: &SystemMapping,
    threads: &[ThreadSpec],
) -> SystemMapping {
    let (items, owners) = items(mapping, threads);
    let mut out = mapping.clone();
    let used = mapping.used_tiles().len();
    if let Some((_, placement)) = search(&items, tiles, used) {
        for (k, &i) in owners.iter().enumerate() {
            out.assignments
                .get_mut(&threads[i].id)
                .expect("owner")
                .tiles = placement[k].clone();
        }
    }
    let used: BTreeSet<TileId> = out.used_tiles();
    out.active_tiles = tiles
        .iter()
        .map(|t| t.id)
        .filter(|t| used.contains(t))
        .collect();
    out.idle_gated = tiles
        .iter()
        .filter(|t| {
            used.contains(&t.id) && out.tile_load(t.id, threads) < t.capacity_at(t.freq_level)
        })
        .map(|t| t.id)
        .collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::Assignment;
    use crate::model::CriticalityClass::*;
    use proptest::prelude::*;

    fn tiles(n: u32) -> Vec<Tile> {
        (1..=n).map(|i| Tile::new(i, 100)).collect()
    }

    /// Independent oracle: enumerate every replica-to-tile assignment and
    /// count the tiles used.
    fn naive_minimum(caps: &[u64], reqs: &[(usize, u64)]) -> Option<usize> {
        fn rec(
            caps: &mut Vec<u64>,
            reqs: &[(usize, u64)],
            i: usize,
            used: &mut Vec<u32>,
            best: &mut Option<usize>,
        ) {
            if i == reqs.len() {
                let n = used.iter().filter(|&&u| u > 0).count();
                if best.is_none_or(|b| n < b) {
                    *best = Some(n);
                }
                return;
            }
            let (r, l) = reqs[i];
            let n = caps.len();
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize != r
                    || (0..n).any(|b| mask & (1 << b) != 0 && caps[b] < l)
                {
                    continue;
                }
                for b in 0..n {
                    if mask & (1 << b) != 0 {
                        caps[b] -= l;
                        used[b] += 1;
                    }
                }
                rec(caps, reqs, i + 1, used, best);
                for b in 0..n {
                    if mask & (1 << b) != 0 {
                        caps[b] += l;
                        used[b] -= 1;
                    }
                }
            }
        }
        let mut best = None;
        rec(
            &mut caps.to_vec(),
            reqs,
            0,
            &mut vec![0; caps.len()],
            &mut best,
        );
        best
    }

    #[test]
    fn subsets_are_lexicographic() {
        let all: Vec<Vec<usize>> = subsets(4, 2).collect();
        assert_eq!(
            all,
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
        assert_eq!(subsets(2, 3).count(), 0);
        assert_eq!(subsets(3, 0).count(), 1);
    }

    #[test]
    fn consolidates_spread_replicas() {
        let ts = tiles(6);
        let th = vec![
            ThreadSpec::new("a", High, 40),
            ThreadSpec::new("b", Low, 40),
        ];
        let mut m = SystemMapping::with_active(&ts);
        m.assignments
            .insert("a".into(), Assignment::new(ExecutionMode::Tmr, [1, 2, 3]));
        m.assignments
            .insert("b".into(), Assignment::new(ExecutionMode::Tmr, [4, 5, 6]));
        assert_eq!(minimum_active_tiles(&ts, &m, &th), 3);
        let out = minimize_active_tiles(&ts, &m, &th);
        out.validate(&ts, &th).unwrap();
        assert_eq!(out.active_tiles, [TileId(1), TileId(2), TileId(3)].into());
        assert_eq!(out.idle_gated, out.active_tiles);
    }

    #[test]
    fn minimal_mappings_keep_their_placement() {
        let ts = tiles(4);
        let th = vec![ThreadSpec::new("a", High, 100)];
        let mut m = SystemMapping::with_active(&ts);
        m.assignments
            .insert("a".into(), Assignment::new(ExecutionMode::Dmr, [3, 4]));
        let out = minimize_active_tiles(&ts, &m, &th);
        assert_eq!(out.assignments, m.assignments);
        assert_eq!(out.active_tiles, [TileId(3), TileId(4)].into());
        assert!(out.idle_gated.is_empty());
    }

    proptest! {
        #[test]
        fn matches_naive_enumeration(
            n in 1u32..5,
            reqs in proptest::collection::vec((1usize..4, 1u64..60), 1..4),
        ) {
            let ts = tiles(n);
            let th: Vec<ThreadSpec> = reqs
                .iter()
                .enumerate()
                .map(|(i, (_, d))| ThreadSpec::new(format!("t{i}"), Low, *d))
                .collect();
            let caps: Vec<u64> = ts.iter().map(|t| t.capacity_at(t.freq_level).0).collect();
            let loads: Vec<(usize, u64)> = reqs.iter().map(|(r, d)| (*r, d * 1_000)).collect();
            let expected = naive_minimum(&caps, &loads);
            let items: Vec<Item> = loads.iter().map(|(r, l)| Item { replicas: *r, load: crate::model::Load(*l) }).collect();
            let bins: Vec<Bin> = ts.iter().map(|t| Bin { tile: t.id, room: t.capacity_at(t.freq_level) }).collect();
            let Some(p) = packing::pack(&items, &bins) else {
                prop_assert!(expected.is_none());
                return Ok(());
            };
            let mut m = SystemMapping::with_active(&ts);
            for (i, spec) in th.iter().enumerate() {
                m.assignments.insert(spec.id.clone(), crate::mapping::Assignment {
                    mode: ExecutionMode::with_replicas(reqs[i].0),
                    tiles: p[i].clone(),
                    time_share: Default::default(),
                });
            }
            prop_assert_eq!(Some(minimum_active_tiles(&ts, &m, &th)), expected);
            let out = minimize_active_tiles(&ts, &m, &th);
            out.validate(&ts, &th).unwrap();
            prop_assert_eq!(Some(out.used_tiles().len()), expected);
        }
    }
}
