//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `ACCEPTANCE_ONLY=2,5` restricts the run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use lockstep_pool::allocator::{
    apply_replacement_strategy, brute_force_map_with, map_threads_with,
    precompute_replacement_strategies, AllocatorConfig, LostReplica, PerformanceProfile,
    BUILTIN_NAMES,
};
use lockstep_pool::energy::budget_uw;
use lockstep_pool::faultsim::{run, FaultDisposition, RunOutput, ScenarioConfig};
use lockstep_pool::mapping::SystemMapping;
use lockstep_pool::metrics::recompute_from_trace;
use lockstep_pool::model::{
    CriticalityClass, ExecutionMode, SystemState, ThreadId, ThreadSpec, Tile, TileHealth, TileId,
    TimeShare,
};
use lockstep_pool::time::SimTime;
use lockstep_pool::trace::{to_ndjson, TraceEvent, TraceRecord};

const CLASSES: [CriticalityClass; 4] = [
    CriticalityClass::Essential,
    CriticalityClass::High,
    CriticalityClass::Medium,
    CriticalityClass::Low,
];

// Tolerances and sizes.
const FIG3_MAX_RUNTIME: Duration = Duration::from_secs(1);
const TRANSIENT_SEEDS: u64 = 1_000;
const LADDER_EPISODES: u64 = 1_000;
const SWEEP_MAX_RUNTIME: Duration = Duration::from_secs(300);
const SWEEP_MAX_GAP: f64 = 0.10;
const FUZZ_CASES: usize = 10_000;
const DETERMINISM_SEEDS: u64 = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(failures: &[String], detail: String) -> Outcome {
        if failures.is_empty() {
            Outcome { pass: true, detail }
        } else {
            let mut shown: Vec<&str> = failures.iter().take(5).map(String::as_str).collect();
            if failures.len() > 5 {
                shown.push("...");
            }
            Outcome {
                pass: false,
                detail: format!(
                    "{detail}; {} failure(s): {}",
                    failures.len(),
                    shown.join(" | ")
                ),
            }
        }
    }
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Outcome); 7] = [
        (1, "worked example strategies", fig3_golden),
        (2, "single-transient correction", transient_correction),
        (3, "repair-ladder convergence", ladder_convergence),
        (4, "heuristic vs oracle", heuristic_vs_oracle),
        (5, "strategy soundness fuzz", strategy_fuzz),
        (6, "determinism", determinism),
        (7, "profile table", profile_table),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n} {verdict} {name}: {} ({:.2}s)",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        if !outcome.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn scenario_file(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    ScenarioConfig::from_json(&text, None).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn scenario_json(v: serde_json::Value) -> ScenarioConfig {
    ScenarioConfig::from_json(&v.to_string(), None).unwrap_or_else(|e| panic!("{e}: {v}"))
}

fn tid(s: &str) -> ThreadId {
    ThreadId::new(s)
}

fn mode_of(m: &SystemMapping, t: &str) -> ExecutionMode {
    m.assignment(&tid(t))
        .map_or(ExecutionMode::Descheduled, |a| a.mode)
}

fn events(trace: &[TraceRecord]) -> impl Iterator<Item = (SimTime, &TraceEvent)> {
    trace.iter().map(|r| (r.time, &r.event))
}

// Criterion 1.

fn fig3_golden() -> Outcome {
    let mut failures = Vec::new();
    let mut slowest = Duration::ZERO;
    for name in ["fig3a", "fig3b", "fig3c"] {
        let scenario = scenario_file(name);
        let start = Instant::now();
        let out = run(&scenario, None).expect("runs");
        slowest = slowest.max(start.elapsed());
        let again = run(&scenario, None).expect("runs");
        if to_ndjson(&out.trace) != to_ndjson(&again.trace) {
            failures.push(format!("{name}: traces differ between runs"));
        }
        let m = &out.state.mapping;
        let defective: Vec<TileId> = out
            .state
            .tiles
            .iter()
            .filter(|t| t.health == TileHealth::PermanentlyDefective)
            .map(|t| t.id)
            .collect();
        if defective != [TileId(3)] {
            failures.push(format!("{name}: defective tiles {defective:?}"));
        }
        if m.used_tiles().contains(&TileId(3)) {
            failures.push(format!("{name}: tile 3 still hosts replicas"));
        }
        for t in ["E", "H"] {
            if mode_of(m, t) != ExecutionMode::Tmr {
                failures.push(format!("{name}: {t} runs {}", mode_of(m, t)));
            }
        }
        let descheduled =
            events(&out.trace).any(|(_, e)| matches!(e, TraceEvent::ThreadDescheduled { .. }));
        match name {
            "fig3a" => {
                for t in ["M", "L"] {
                    if mode_of(m, t) != ExecutionMode::Dmr {
                        failures.push(format!("{name}: {t} runs {}", mode_of(m, t)));
                    }
                }
            }
            "fig3b" => {
                let raised: BTreeSet<TileId> = out
                    .state
                    .tiles
                    .iter()
                    .filter(|t| t.freq_level.permille() > 1_000)
                    .map(|t| t.id)
                    .collect();
                if raised.len() != 2 {
                    failures.push(format!("{name}: frequency raised on {raised:?}"));
                }
                if descheduled
                    || ["M", "L"]
                        .iter()
                        .any(|t| mode_of(m, t) == ExecutionMode::Descheduled)
                {
                    failures.push(format!("{name}: a thread was descheduled"));
                }
            }
            _ => {
                let reduced: Vec<&ThreadId> = m
                    .assignments
                    .iter()
                    .filter(|(_, a)| {
                        a.mode != ExecutionMode::Descheduled && !a.time_share.is_full()
                    })
                    .map(|(t, _)| t)
                    .collect();
                let hosts: BTreeSet<TileId> = reduced.iter().flat_map(|t| m.hosts(t)).collect();
                if hosts.len() != 3 {
                    failures.push(format!("{name}: reduced shares on tiles {hosts:?}"));
                }
                // A tile is gateable if it hosts nothing or idles part of each period.
                let gateable = out.state.tiles.iter().any(|t| {
                    t.health != TileHealth::PermanentlyDefective
                        && (!m.active_tiles.contains(&t.id) || m.idle_gated.contains(&t.id))
                });
                if !gateable {
                    failures.push(format!("{name}: no gateable tile"));
                }
                if descheduled {
                    failures.push(format!("{name}: a thread was descheduled"));
                }
            }
        }
        if let Err(e) = m.validate(&out.state.tiles, &out.state.threads) {
            failures.push(format!("{name}: invalid final mapping: {e}"));
        }
    }
    if slowest >= FIG3_MAX_RUNTIME {
        failures.push(format!("slowest run took {slowest:?}"));
    }
    Outcome::new(
        &failures,
        format!(
            "3 scenarios, slowest run {:.1} ms",
            slowest.as_secs_f64() * 1e3
        ),
    )
}

// Criterion 2.

fn transient_case(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tiles: u32 = rng.random_range(3..=6);
    let n_threads = rng.random_range(1..=3);
    let period_us: u64 = *[100_000u64, 250_000, 1_000_000].choose(&mut rng).unwrap();
    let periods: u64 = 12;
    let ids: Vec<u32> = (1..=n_tiles).collect();
    let mut threads = Vec::new();
    let mut initial = serde_json::Map::new();
    for k in 0..n_threads {
        let id = format!("T{k}");
        let class = CLASSES[rng.random_range(0..4)];
        threads.push(json!({"id": id, "criticality": class, "demand": 10}));
        let hosts: Vec<u32> = ids.choose_multiple(&mut rng, 3).copied().collect();
        initial.insert(id, json!({"mode": "TMR", "tiles": hosts}));
    }
    // At most one fault per period keeps every thread at one corruption per period.
    let mut slots: Vec<u64> = (0..periods - 1).collect();
    slots.shuffle(&mut rng);
    let n_faults = rng.random_range(1..=2);
    let mut faults = Vec::new();
    for &slot in slots.iter().take(n_faults) {
        let at = slot * period_us + rng.random_range(1..period_us);
        let tile = *ids.choose(&mut rng).unwrap();
        faults.push((at, tile));
    }
    let scenario = scenario_json(json!({
        "schema": 1,
        "name": format!("transient-{seed}"),
        "tiles": n_tiles,
        "threads": threads,
        "profile": "Speed",
        "checkpoint_period": format!("{period_us}us"),
        "duration": format!("{}us", periods * period_us),
        "initial_mapping": initial,
        "faults": faults.iter().map(|(at, tile)| json!({"at": format!("{at}us"), "tile": tile, "kind": "TransientState"})).collect::<Vec<_>>(),
    }));
    let out = run(&scenario, Some(seed)).map_err(|e| format!("seed {seed}: {e}"))?;
    let mapping = &out.state.mapping;
    let mut checked = 0;
    for (fault, tiles) in events(&out.trace).filter_map(|(_, e)| match e {
        TraceEvent::FaultInjected { fault, tiles, .. } => Some((*fault, tiles.clone())),
        _ => None,
    }) {
        let injected = out
            .trace
            .iter()
            .find(|r| matches!(&r.event, TraceEvent::FaultInjected { fault: f, .. } if *f == fault))
            .unwrap()
            .time;
        let (closed, disposition) = out
            .trace
            .iter()
            .find_map(|r| match &r.event {
                TraceEvent::FaultDisposition {
                    fault: f,
                    disposition,
                } if *f == fault => Some((r.time, *disposition)),
                _ => None,
            })
            .ok_or_else(|| format!("seed {seed}: fault {fault} never closed"))?;
        let tile = *tiles.iter().next().unwrap();
        let hosted: Vec<&ThreadId> = mapping.threads_on(tile).collect();
        if hosted.is_empty() {
            if disposition != FaultDisposition::NoEffect {
                return Err(format!(
                    "seed {seed}: fault on idle tile {tile} closed as {disposition}"
                ));
            }
            continue;
        }
        checked += 1;
        if disposition != FaultDisposition::CorrectedStage1 {
            return Err(format!(
                "seed {seed}: fault {fault} closed as {disposition}"
            ));
        }
        if closed.since(injected).as_micros() > period_us {
            return Err(format!(
                "seed {seed}: fault {fault} corrected after {}",
                closed.since(injected)
            ));
        }
        for thread in hosted {
            let seen = out.trace.iter().any(|r| {
                r.time >= injected
                    && r.time <= closed
                    && match &r.event {
                        TraceEvent::DisagreementDetected {
                            thread: t,
                            dissenters,
                            ..
                        } => t == thread && dissenters.contains(&tile),
                        TraceEvent::EscalationRaised { thread: t, tiles } => {
                            t == thread && tiles.contains(&tile)
                        }
                        _ => false,
                    }
            });
            if !seen {
                return Err(format!(
                    "seed {seed}: silent corruption of {thread} on {tile}"
                ));
            }
        }
    }
    Ok(checked)
}

fn transient_correction() -> Outcome {
    let results: Vec<Result<usize, String>> = (0..TRANSIENT_SEEDS)
        .into_par_iter()
        .map(transient_case)
        .collect();
    let failures: Vec<String> = results.iter().filter_map(|r| r.clone().err()).collect();
    let corrected: usize = results.iter().filter_map(|r| r.as_ref().ok()).sum();
    Outcome::new(
        &failures,
        format!(
            "{TRANSIENT_SEEDS} seeds, {corrected} hosting-tile faults corrected within one period"
        ),
    )
}

// Criterion 3.

fn ladder_case(seed: u64) -> Result<bool, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variants: u32 = rng.random_range(1..=4);
    let attempts: u32 = rng.random_range(1..=3);
    let full_reconfig = rng.random_bool(0.7);
    let nature = rng.random_range(0..4);
    let mut fault = json!({"at": format!("{}us", rng.random_range(1..1_000_000u64)), "tile": 1});
    let mut targets = vec![TileId(1)];
    let transient_config = nature == 0;
    match nature {
        0 => fault["kind"] = json!("TransientConfig"),
        1 => {
            fault["kind"] = json!("PermanentLogic");
            if rng.random_bool(0.5) {
                let mut all: Vec<u32> = (0..variants).collect();
                all.shuffle(&mut rng);
                let n = rng.random_range(1..=variants as usize);
                fault["variants"] = json!(all[..n].to_vec());
            }
        }
        2 => fault["kind"] = json!("PermanentMemory"),
        _ => {
            fault = json!({"at": fault["at"], "kind": "MBU", "span": [1, 2]});
            targets.push(TileId(2));
        }
    }
    let tiles: Vec<serde_json::Value> = (1..=5)
        .map(|id| json!({"id": id, "variants": variants}))
        .collect();
    let bound = attempts * variants + 1;
    let scenario = scenario_json(json!({
        "schema": 1,
        "name": format!("ladder-{seed}"),
        "tiles": tiles,
        "threads": [
            {"id": "E", "criticality": "Essential", "demand": 20},
            {"id": "H", "criticality": "High", "demand": 20}
        ],
        "profile": "Speed",
        "checkpoint_period": "1s",
        "duration": "30s",
        "initial_mapping": {
            "E": {"mode": "TMR", "tiles": [1, 2, 3]},
            "H": {"mode": "TMR", "tiles": [1, 4, 5]}
        },
        "ladder": {
            "attempts_per_variant": attempts,
            "partial_reconfig_latency": "200ms",
            "full_reboot_latency": "1500ms",
            "full_reconfig": full_reconfig,
            "dissent_threshold": 3,
            "dissent_window": 10
        },
        "faults": [fault],
    }));
    let out = run(&scenario, Some(seed)).map_err(|e| format!("seed {seed}: {e}"))?;
    let mut had_episode = false;
    for tile in targets {
        let mut attempts_in_episode = 0u32;
        let mut open = false;
        for (_, e) in events(&out.trace) {
            match e {
                TraceEvent::RepairStarted { tile: t, .. } if *t == tile => {
                    attempts_in_episode += 1;
                    open = true;
                    had_episode = true;
                }
                TraceEvent::FullRebootStarted { trigger, .. } if *trigger == tile => {
                    attempts_in_episode += 1;
                    open = true;
                }
                TraceEvent::TileHealthy { tile: t }
                | TraceEvent::TilePermanentlyDefective { tile: t, .. }
                    if *t == tile =>
                {
                    if attempts_in_episode > bound {
                        return Err(format!("seed {seed}: tile {tile} took {attempts_in_episode} attempts, bound {bound}"));
                    }
                    attempts_in_episode = 0;
                    open = false;
                }
                _ => {}
            }
        }
        if open {
            return Err(format!(
                "seed {seed}: episode on tile {tile} did not terminate"
            ));
        }
        let health = out.state.tile(tile).unwrap().health;
        if !matches!(
            health,
            TileHealth::Healthy | TileHealth::PermanentlyDefective
        ) {
            return Err(format!("seed {seed}: tile {tile} ended {health:?}"));
        }
        if transient_config && health == TileHealth::PermanentlyDefective {
            return Err(format!(
                "seed {seed}: transient configuration upset left tile {tile} defective"
            ));
        }
    }
    Ok(had_episode)
}

fn ladder_convergence() -> Outcome {
    let results: Vec<Result<bool, String>> = (0..LADDER_EPISODES)
        .into_par_iter()
        .map(ladder_case)
        .collect();
    let failures: Vec<String> = results.iter().filter_map(|r| r.clone().err()).collect();
    let episodes = results.iter().filter(|r| matches!(r, Ok(true))).count();
    Outcome::new(
        &failures,
        format!("{LADDER_EPISODES} scenarios, {episodes} with repair episodes, all within bound"),
    )
}

// Criterion 4.

/// Per class from Essential down: scheduled time share (permille) and
/// replica count, compared lexicographically. Computed independently of the
/// allocator.
fn tiers(m: &SystemMapping, threads: &[ThreadSpec]) -> [(u64, u64); 4] {
    let mut out = [(0, 0); 4];
    for t in threads {
        let k = CLASSES.iter().position(|c| *c == t.criticality).unwrap();
        if let Some(a) = m
            .assignment(&t.id)
            .filter(|a| a.mode != ExecutionMode::Descheduled)
        {
            out[k].0 += a.time_share.permille();
            out[k].1 += a.mode.replication_factor() as u64;
        }
    }
    out
}

/// Order-preserving scalar of the tiers: per class `share * 64 + replicas`,
/// classes as base-2^20 digits, Essential most significant.
fn score(t: &[(u64, u64); 4]) -> u128 {
    let mut v = 0u128;
    for &(share, replicas) in t {
        assert!(replicas < 64 && share * 64 + replicas < 1 << 20);
        v = v * (1 << 20) + (share * 64 + replicas) as u128;
    }
    v
}

fn tier_gap(ours: &[(u64, u64); 4], best: &[(u64, u64); 4]) -> f64 {
    if ours >= best {
        return 0.0;
    }
    1.0 - score(ours) as f64 / score(best) as f64
}

/// A running thread must not sit lower in its attainable mode list than a
/// less critical running thread.
fn monotone(
    m: &SystemMapping,
    threads: &[ThreadSpec],
    profile: &PerformanceProfile,
    usable: usize,
) -> bool {
    let running: Vec<&ThreadSpec> = threads
        .iter()
        .filter(|t| mode_of(m, t.id.as_str()) != ExecutionMode::Descheduled)
        .collect();
    let position = |t: &ThreadSpec| {
        let list: Vec<ExecutionMode> = profile
            .allowed(t.criticality)
            .iter()
            .copied()
            .filter(|m| m.replication_factor() <= usable)
            .collect();
        let mode = mode_of(m, t.id.as_str());
        list.iter().position(|x| *x == mode).unwrap_or(list.len())
    };
    running.iter().all(|a| {
        running
            .iter()
            .all(|b| a.criticality <= b.criticality || position(a) <= position(b))
    })
}

fn heuristic_vs_oracle() -> Outcome {
    // Thread kinds: class x demand x real-time guarantee.
    let mut kinds = Vec::new();
    for class in CLASSES {
        for demand in [30, 60] {
            for rt in [true, false] {
                kinds.push((class, demand, rt));
            }
        }
    }
    // Every multiset of up to five kinds.
    let mut sets: Vec<Vec<usize>> = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..5 {
        let mut next = Vec::new();
        for s in &frontier {
            let from = s.last().copied().unwrap_or(0);
            for k in from..kinds.len() {
                let mut t = s.clone();
                t.push(k);
                next.push(t);
            }
        }
        sets.extend(next.iter().cloned());
        frontier = next;
    }
    sets.remove(0);
    let profiles: Vec<PerformanceProfile> = PerformanceProfile::builtins();
    let mut instances = Vec::new();
    for set in &sets {
        for n_tiles in 1..=6u32 {
            for p in 0..profiles.len() {
                instances.push((set, n_tiles, p));
            }
        }
    }
    let cfg = AllocatorConfig::default();
    let start = Instant::now();
    let results: Vec<Result<(f64, String), String>> = instances
        .par_iter()
        .map(|&(set, n_tiles, p)| {
            let threads: Vec<ThreadSpec> = set
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let (class, demand, rt) = kinds[k];
                    let t = ThreadSpec::new(format!("T{i}"), class, demand);
                    if rt {
                        t
                    } else {
                        t.sporadic()
                    }
                })
                .collect();
            let tiles: Vec<Tile> = (1..=n_tiles).map(|i| Tile::new(i, 100)).collect();
            let profile = &profiles[p];
            let label = || format!("{} on {n_tiles} tiles, kinds {set:?}", profile.name);
            let oracle = brute_force_map_with(&threads, &tiles, profile, &cfg)
                .map_err(|e| format!("{}: {e}", label()))?;
            let heuristic = map_threads_with(&threads, &tiles, profile, &cfg);
            match (&oracle, &heuristic) {
                (Some(_), Err(e)) => {
                    return Err(format!("{}: heuristic infeasible ({e})", label()))
                }
                (None, Ok(_)) => return Err(format!("{}: heuristic beat the oracle", label())),
                _ => {}
            }
            let (Some(best), Ok(m)) = (oracle, heuristic) else {
                return Ok((0.0, String::new()));
            };
            if let Err(e) = m.validate(&tiles, &threads) {
                return Err(format!("{}: invalid mapping: {e}", label()));
            }
            if !monotone(&m, &threads, profile, tiles.len()) {
                return Err(format!("{}: monotonicity violated", label()));
            }
            if !monotone(&best.mapping, &threads, profile, tiles.len()) {
                return Err(format!("{}: oracle mapping not monotone", label()));
            }
            let (h, o) = (tiers(&m, &threads), tiers(&best.mapping, &threads));
            if h > o {
                return Err(format!(
                    "{}: heuristic {h:?} beats the oracle {o:?}",
                    label()
                ));
            }
            Ok((tier_gap(&h, &o), label()))
        })
        .collect();
    let elapsed = start.elapsed();
    let mut failures: Vec<String> = results.iter().filter_map(|r| r.clone().err()).collect();
    let (worst, worst_at) =
        results
            .iter()
            .filter_map(|r| r.as_ref().ok())
            .fold((0.0f64, ""), |a, b| {
                if b.0 > a.0 {
                    (b.0, b.1.as_str())
                } else {
                    a
                }
            });
    let gapped = results
        .iter()
        .filter(|r| matches!(r, Ok((g, _)) if *g > 0.0))
        .count();
    let over = results
        .iter()
        .filter(|r| matches!(r, Ok((g, _)) if *g > SWEEP_MAX_GAP))
        .count();
    if worst > SWEEP_MAX_GAP {
        failures.push(format!(
            "worst gap {:.2}% ({worst_at}), {over} instances over the limit",
            worst * 100.0
        ));
    }
    if elapsed >= SWEEP_MAX_RUNTIME {
        failures.push(format!("sweep took {elapsed:?}"));
    }
    Outcome::new(
        &failures,
        format!(
            "{} instances, worst objective gap {:.2}% ({gapped} instances with a gap)",
            instances.len(),
            worst * 100.0
        ),
    )
}

// Criterion 5.

fn fuzz_instance(
    rng: &mut ChaCha8Rng,
) -> Option<(
    Vec<Tile>,
    Vec<ThreadSpec>,
    PerformanceProfile,
    SystemMapping,
)> {
    let n_tiles: u32 = rng.random_range(2..=8);
    let tiles: Vec<Tile> = (1..=n_tiles).map(|i| Tile::new(i, 100)).collect();
    let threads: Vec<ThreadSpec> = (0..rng.random_range(1..=6))
        .map(|i| {
            let t = ThreadSpec::new(
                format!("T{i}"),
                CLASSES[rng.random_range(0..4)],
                rng.random_range(1..=18) * 5,
            );
            if rng.random_bool(0.3) {
                t.sporadic()
            } else {
                t
            }
        })
        .collect();
    let budget = rng.random_bool(0.25).then(|| rng.random_range(400..=3_000));
    let profile = PerformanceProfile::builtin(BUILTIN_NAMES.choose(rng).unwrap())
        .unwrap()
        .with_budget(budget);
    let mapping = map_threads_with(&threads, &tiles, &profile, &AllocatorConfig::default()).ok()?;
    Some((tiles, threads, profile, mapping))
}

fn fuzz_case(seed: u64, cfg: &AllocatorConfig) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tiles, threads, profile, mapping) = loop {
        if let Some(i) = fuzz_instance(&mut rng) {
            break i;
        }
    };
    let mut state = SystemState::new(tiles.clone(), threads.clone(), mapping);
    let strategies = precompute_replacement_strategies(&state, &profile, cfg);
    let failed = tiles.choose(&mut rng).unwrap().id;
    let lost = LostReplica::on_tile(&state.mapping, failed);
    state.tile_mut(failed).unwrap().health = TileHealth::PermanentlyDefective;
    state.mapping = state.mapping.without_tile(failed);
    let applied = apply_replacement_strategy(
        &state,
        failed,
        strategies.get(&failed),
        &lost,
        &profile,
        cfg,
    );
    let label = format!(
        "case {seed} ({} on {} tiles, {failed} failed)",
        profile.name,
        tiles.len()
    );
    if !applied.precomputed {
        return Err(format!("{label}: precomputed strategy was stale"));
    }
    let remaining: Vec<Tile> = tiles
        .iter()
        .filter(|t| t.id != failed)
        .map(|t| {
            let mut t = t.clone();
            if let Some(f) = applied.freq.get(&t.id) {
                t.freq_level = *f;
            }
            t
        })
        .collect();
    let m = &applied.mapping;
    // Structural invariants, checked without the library's validator.
    for spec in &threads {
        let a = m
            .assignment(&spec.id)
            .ok_or_else(|| format!("{label}: {} missing", spec.id))?;
        if a.tiles.len() != a.mode.replication_factor() {
            return Err(format!(
                "{label}: {} has {} hosts for {}",
                spec.id,
                a.tiles.len(),
                a.mode
            ));
        }
        if let Some(t) = a.tiles.iter().find(|t| !m.active_tiles.contains(t)) {
            return Err(format!("{label}: {} hosted on gated tile {t}", spec.id));
        }
        if spec.rt_guarantee && a.time_share != TimeShare::FULL {
            return Err(format!(
                "{label}: real-time thread {} had its share reduced",
                spec.id
            ));
        }
        if a.tiles.contains(&failed) {
            return Err(format!("{label}: {} still on the failed tile", spec.id));
        }
    }
    for t in &remaining {
        let load: u64 = m
            .assignments
            .iter()
            .filter(|(_, a)| a.tiles.contains(&t.id))
            .map(|(id, a)| {
                threads.iter().find(|s| &s.id == id).unwrap().demand * a.time_share.permille()
            })
            .sum();
        let capacity = t.capacity_nominal * t.freq_level.permille();
        if load > capacity {
            return Err(format!(
                "{label}: tile {} overloaded ({load} > {capacity})",
                t.id
            ));
        }
    }
    if let Some(mw) = profile.power_budget_mw {
        let power = cfg.power.system_power(&remaining, m, &threads);
        if power > budget_uw(mw) {
            return Err(format!("{label}: power over budget"));
        }
    }
    let mut after = tiles.clone();
    after.iter_mut().find(|t| t.id == failed).unwrap().health = TileHealth::PermanentlyDefective;
    let oracle = brute_force_map_with(&threads, &after, &profile, cfg)
        .map_err(|e| format!("{label}: {e}"))?;
    if oracle.is_some() {
        let weakest = profile.weakest(CriticalityClass::Essential).unwrap();
        for spec in threads
            .iter()
            .filter(|t| t.criticality == CriticalityClass::Essential)
        {
            let mode = mode_of(m, spec.id.as_str());
            if mode.replication_factor() < weakest.replication_factor() {
                return Err(format!("{label}: Essential {} dropped to {mode}", spec.id));
            }
        }
    }
    Ok(())
}

fn strategy_fuzz() -> Outcome {
    let cfg = AllocatorConfig::default();
    let results: Vec<Result<(), String>> = (0..FUZZ_CASES as u64)
        .into_par_iter()
        .map(|seed| fuzz_case(seed, &cfg))
        .collect();
    let failures: Vec<String> = results.into_iter().filter_map(Result::err).collect();
    Outcome::new(
        &failures,
        format!("{FUZZ_CASES} (scenario, failed tile) pairs"),
    )
}

// Criterion 6.

fn determinism() -> Outcome {
    let mut failures = Vec::new();
    let mut runs = 0;
    let mut check = |name: &str, scenario: &ScenarioConfig, seed: Option<u64>| {
        let a: RunOutput = run(scenario, seed).expect("runs");
        let b = run(scenario, seed).expect("runs");
        runs += 1;
        if to_ndjson(&a.trace) != to_ndjson(&b.trace) {
            failures.push(format!("{name} seed {seed:?}: traces differ"));
        }
        if a.report != b.report {
            failures.push(format!("{name} seed {seed:?}: reports differ"));
        }
        let totals = recompute_from_trace(&a.trace);
        if totals.energy != a.report.energy {
            failures.push(format!(
                "{name} seed {seed:?}: energy {} != {}",
                totals.energy, a.report.energy
            ));
        }
        for (label, ours, theirs) in [
            ("downtime", &totals.downtime, &a.report.downtime),
            ("exposure", &totals.exposure, &a.report.exposure),
        ] {
            let keys: BTreeSet<&ThreadId> = ours.keys().chain(theirs.keys()).collect();
            for k in keys {
                let x = ours.get(k).copied().unwrap_or_default();
                let y = theirs.get(k).copied().unwrap_or_default();
                if x != y {
                    failures.push(format!("{name} seed {seed:?}: {label} of {k} {x} != {y}"));
                }
            }
        }
    };
    for name in ["fig3a", "fig3b", "fig3c", "baseline"] {
        check(name, &scenario_file(name), None);
    }
    let stochastic = scenario_file("stochastic");
    for seed in 0..DETERMINISM_SEEDS {
        check("stochastic", &stochastic, Some(seed));
    }
    Outcome::new(
        &failures,
        format!("{runs} scenario/seed pairs run twice, trace totals equal the reports"),
    )
}

// Criterion 7.

fn profile_table() -> Outcome {
    use ExecutionMode::*;
    let nmr = Nmr(4);
    // Rows NMR, TMR, DMR, Separate; columns E, H, M, L.
    let table: [(&str, [[bool; 4]; 4]); 4] = [
        (
            "Speed",
            [
                [false, false, false, false],
                [true, true, true, true],
                [false, true, true, true],
                [false, false, false, true],
            ],
        ),
        (
            "Energy",
            [
                [false, false, false, false],
                [true, true, true, false],
                [false, false, true, true],
                [false, false, false, true],
            ],
        ),
        (
            "Robustness",
            [
                [true, true, false, false],
                [false, true, true, true],
                [false, false, true, true],
                [false, false, false, false],
            ],
        ),
        (
            "Function",
            [
                [true, true, false, false],
                [true, true, true, true],
                [false, false, true, true],
                [false, false, false, true],
            ],
        ),
    ];
    let rows = [nmr, Tmr, Dmr, Separate];
    let mut failures = Vec::new();
    let mut cells = 0;
    for (name, matrix) in table {
        let profile = PerformanceProfile::builtin(name).expect("built-in");
        for (c, class) in CLASSES.iter().enumerate() {
            let expected: Vec<ExecutionMode> = rows
                .iter()
                .enumerate()
                .filter(|(r, _)| matrix[*r][c])
                .map(|(_, m)| *m)
                .collect();
            for (r, mode) in rows.iter().enumerate() {
                cells += 1;
                if profile.allows(*class, *mode) != matrix[r][c] {
                    failures.push(format!("{name} {class} {mode}"));
                }
            }
            if profile.allowed(*class) != expected.as_slice() {
                failures.push(format!(
                    "{name} {class}: listed {:?}",
                    profile.allowed(*class)
                ));
            }
        }
    }
    let names: BTreeMap<&str, ()> = BUILTIN_NAMES.iter().map(|n| (*n, ())).collect();
    if names.len() != 4 || table.iter().any(|(n, _)| !names.contains_key(n)) {
        failures.push(format!("built-in names {BUILTIN_NAMES:?}"));
    }
    Outcome::new(&failures, format!("{cells} cells match"))
}
