//! Placement of replicated items onto capacity-limited tiles.
//!
//! Every item needs `replicas` distinct bins, each absorbing `load`.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{Load, TileId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bin {
    pub tile: TileId,
    /// Capacity still free.
    pub room: Load,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Item {
    pub replicas: usize,
    pub load: Load,
}

pub type Placement = Vec<BTreeSet<TileId>>;

/// Search nodes the exact packer may visit before giving up.
pub const NODE_LIMIT: u64 = 2_000_000;

/// Greedy placement in item order. Each replica goes to the bin with the
/// most free room, lowest tile id on ties.
pub fn pack_greedy(items: &[Item], bins: &[Bin]) -> Option<Placement> {
    let mut room: Vec<Bin> = bins.to_vec();
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let mut candidates: Vec<usize> = (0..room.len())
            .filter(|&b| room[b].room >= item.load)
            .collect();
        if candidates.len() < item.replicas {
            return None;
        }
        candidates.sort_by(|&a, &b| {
            room[b]
                .room
                .cmp(&room[a].room)
                .then(room[a].tile.cmp(&room[b].tile))
        });
        let mut chosen = BTreeSet::new();
        for &b in candidates.iter().take(item.replicas) {
            room[b].room = room[b].room - item.load;
            chosen.insert(room[b].tile);
        }
        out.push(chosen);
    }
    Some(out)
}

/// Exact placement by backtracking. Bins with equal free room are
/// interchangeable, so each item chooses how many replicas go to each room
/// class rather than which bins. Returns `None` when no placement exists or
/// the search exceeds [`NODE_LIMIT`].
pub fn pack_exact(items: &[Item], bins: &[Bin]) -> Option<Placement> {
    let mut order: Vec<usize> = (0..items.len())
        .filter(|&i| items[i].replicas > 0)
        .collect();
    order.sort_by(|&a, &b| {
        items[b]
            .load
            .cmp(&items[a].load)
            .then(items[b].replicas.cmp(&items[a].replicas))
            .then(a.cmp(&b))
    });
    let total_needed: u64 = items.iter().map(|i| i.load.0 * i.replicas as u64).sum();
    let total_room: u64 = bins.iter().map(|b| b.room.0).sum();
    if total_needed > total_room || items.iter().any(|i| i.replicas > bins.len()) {
        return None;
    }
    let mut rooms: Vec<Load> = bins.iter().map(|b| b.room).collect();
    let mut assign: Vec<Vec<usize>> = vec![Vec::new(); items.len()];
    let mut nodes = 0u64;
    if search(items, &order, 0, &mut rooms, &mut assign, &mut nodes) {
        Some(
            assign
                .into_iter()
                .map(|bs| bs.into_iter().map(|b| bins[b].tile).collect())
                .collect(),
        )
    } else {
        None
    }
}

fn search(
    items: &[Item],
    order: &[usize],
    depth: usize,
    rooms: &mut Vec<Load>,
    assign: &mut Vec<Vec<usize>>,
    nodes: &mut u64,
) -> bool {
    let Some(&idx) = order.get(depth) else {
        return true;
    };
    *nodes += 1;
    if *nodes > NODE_LIMIT {
        return false;
    }
    let item = items[idx];
    // Room classes among bins that can take the item, largest room first.
    let mut classes: BTreeMap<std::cmp::Reverse<Load>, Vec<usize>> = BTreeMap::new();
    for (b, r) in rooms.iter().enumerate() {
        if *r >= item.load {
            classes.entry(std::cmp::Reverse(*r)).or_default().push(b);
        }
    }
    let classes: Vec<Vec<usize>> = classes.into_values().collect();
    let available: usize = classes.iter().map(Vec::len).sum();
    if available < item.replicas {
        return false;
    }
    let mut counts = vec![0usize; classes.len()];
    choose(
        items,
        order,
        depth,
        rooms,
        assign,
        nodes,
        &classes,
        &mut counts,
        0,
        item.replicas,
    )
}

#[allow(clippy::too_many_arguments)]
fn choose(
    items: &[Item],
    order: &[usize],
    depth: usize,
    rooms: &mut Vec<Load>,
    assign: &mut Vec<Vec<usize>>,
    nodes: &mut u64,
    classes: &[Vec<usize>],
    counts: &mut Vec<usize>,
    class: usize,
    left: usize,
) -> bool {
    if left == 0 {
        let idx = order[depth];
        let load = items[idx].load;
        let mut used = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            used.extend(classes[c].iter().take(n).copied());
        }
        for &b in &used {
            rooms[b] = rooms[b] - load;
        }
        assign[idx] = used.clone();
        if search(items, order, depth + 1, rooms, assign, nodes) {
            return true;
        }
        for &b in &used {
            rooms[b] += load;
        }
        assign[idx].clear();
        return false;
    }
    if class >= classes.len() || *nodes > NODE_LIMIT {
        return false;
    }
    let rest: usize = classes[class + 1..].iter().map(Vec::len).sum();
    let max = left.min(classes[class].len());
    let min = left.saturating_sub(rest);
    for n in (min..=max).rev() {
        counts[class] = n;
        if choose(
            items,
            order,
            depth,
            rooms,
            assign,
            nodes,
            classes,
            counts,
            class + 1,
            left - n,
        ) {
            return true;
        }
    }
    counts[class] = 0;
    false
}

/// Greedy first, exact search as fallback.
pub fn pack(items: &[Item], bins: &[Bin]) -> Option<Placement> {
    pack_greedy(items, bins).or_else(|| pack_exact(items, bins))
}
