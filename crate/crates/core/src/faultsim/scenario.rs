//! Scenario files: versioned JSON describing tiles, threads, profile and faults.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};

use crate::allocator::PerformanceProfile;
use crate::energy::PowerModel;
use crate::mapping::{Assignment, SystemMapping};
use crate::model::{FreqLevel, ThreadId, ThreadSpec, Tile, TileId};
use crate::recovery::LadderConfig;
use crate::time::SimDuration;

use super::fault::{FaultEvent, FaultKind, MemoryRegion};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileConfig {
    pub id: u32,
    #[serde(default = "default_capacity")]
    pub capacity: u64,
    #[serde(default = "default_variants")]
    pub variants: u32,
    #[serde(default)]
    pub freq_level: FreqLevel,
}

fn default_capacity() -> u64 {
    100
}

fn default_variants() -> u32 {
    3
}

/// Either a tile count (ids 1..=n) or explicit tiles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TilesSpec {
    Count(u32),
    List(Vec<TileConfig>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Named(String),
    Inline(PerformanceProfile),
}

/// Poisson arrival rates in events per second. Per-tile kinds apply to
/// every tile independently.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultRates {
    pub transient_state: f64,
    pub transient_config: f64,
    pub permanent_logic: f64,
    pub permanent_memory: f64,
    /// Per tile; the MBU spans the tile and its next neighbor.
    pub mbu: f64,
    pub ecc_tile_local: f64,
    pub ecc_validation: f64,
    /// System-wide.
    pub ecc_main_memory: f64,
}

impl FaultRates {
    fn entries(&self) -> [(&'static str, f64); 8] {
        [
            ("transient_state", self.transient_state),
            ("transient_config", self.transient_config),
            ("permanent_logic", self.permanent_logic),
            ("permanent_memory", self.permanent_memory),
            ("mbu", self.mbu),
            ("ecc_tile_local", self.ecc_tile_local),
            ("ecc_validation", self.ecc_validation),
            ("ecc_main_memory", self.ecc_main_memory),
        ]
    }

    pub fn any_positive(&self) -> bool {
        self.entries().iter().any(|(_, r)| *r > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Latencies {
    /// Delay between a mapping change and fresh replacement strategies.
    pub strategy_recompute: SimDuration,
    /// Capacity units of work to copy state into one replica.
    pub sync_cost_units: u64,
}

impl Default for Latencies {
    fn default() -> Self {
        Latencies {
            strategy_recompute: SimDuration::from_millis(10),
            sync_cost_units: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileChange {
    pub at: SimDuration,
    pub profile: ProfileSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    pub tiles: TilesSpec,
    /// Capacity of tiles given as a count.
    #[serde(default = "default_capacity")]
    pub tile_capacity: u64,
    #[serde(default)]
    pub frequency_levels: Option<Vec<FreqLevel>>,
    /// Floorplan neighbor pairs; defaults to the tile-id line.
    #[serde(default)]
    pub adjacency: Option<Vec<(u32, u32)>>,
    pub threads: Vec<ThreadSpec>,
    pub profile: ProfileSpec,
    #[serde(default)]
    pub power_budget_mw: Option<u64>,
    pub checkpoint_period: SimDuration,
    pub duration: SimDuration,
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
    #[serde(default)]
    pub rates: FaultRates,
    #[serde(default)]
    pub rng_seed: Option<u64>,
    #[serde(default)]
    pub latencies: Latencies,
    #[serde(default)]
    pub ladder: LadderConfig,
    #[serde(default)]
    pub initial_mapping: Option<BTreeMap<ThreadId, Assignment>>,
    #[serde(default)]
    pub induced_checkpoints: Vec<SimDuration>,
    #[serde(default)]
    pub profile_changes: Vec<ProfileChange>,
    #[serde(default)]
    pub power: PowerModel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
}

impl ScenarioConfig {
    /// Parses and validates. `seed` stands in for a missing `rng_seed`.
    pub fn from_json(text: &str, seed: Option<u64>) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        cfg.validate(seed)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn build_tiles(&self) -> Vec<Tile> {
        match &self.tiles {
            TilesSpec::Count(n) => (1..=*n).map(|i| Tile::new(i, self.tile_capacity)).collect(),
            TilesSpec::List(list) => list
                .iter()
                .map(|c| {
                    let mut t = Tile::new(c.id, c.capacity);
                    t.variants = c.variants;
                    t.freq_level = c.freq_level;
                    t
                })
                .collect(),
        }
    }

    pub fn build_profile(&self) -> Result<PerformanceProfile, ScenarioError> {
        resolve_profile(&self.profile, self.power_budget_mw).map_err(|m| {
            ScenarioError::Invalid(vec![FieldError {
                field: "profile".into(),
                message: m,
            }])
        })
    }

    pub fn frequency_levels(&self) -> Vec<FreqLevel> {
        self.frequency_levels
            .clone()
            .unwrap_or_else(FreqLevel::default_steps)
    }

    pub fn adjacent(&self, a: TileId, b: TileId) -> bool {
        match &self.adjacency {
            Some(pairs) => pairs.iter().any(|&(x, y)| {
                (TileId(x), TileId(y)) == (a, b) || (TileId(x), TileId(y)) == (b, a)
            }),
            None => a.0.abs_diff(b.0) == 1,
        }
    }

    pub fn initial(&self) -> Option<SystemMapping> {
        let assignments = self.initial_mapping.clone()?;
        let tiles = self.build_tiles();
        let mut m = SystemMapping::with_active(&tiles);
        m.assignments = assignments;
        for t in &self.threads {
            m.assignments
                .entry(t.id.clone())
                .or_insert_with(Assignment::descheduled);
        }
        Some(m)
    }

    pub fn validate(&self, seed: Option<u64>) -> Result<(), ScenarioError> {
        let mut errs = Vec::new();
        let mut err = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.to_string(),
                message,
            })
        };
        if self.schema != SCHEMA_VERSION {
            err(
                "schema",
                format!(
                    "unsupported version {}, expected {SCHEMA_VERSION}",
                    self.schema
                ),
            );
        }
        if self.checkpoint_period == SimDuration::ZERO {
            err("checkpoint_period", "must be positive".into());
        }
        if self.duration == SimDuration::ZERO {
            err("duration", "must be positive".into());
        }
        let tiles = self.build_tiles();
        if tiles.is_empty() {
            err("tiles", "at least one tile is required".into());
        }
        let ids: BTreeSet<TileId> = tiles.iter().map(|t| t.id).collect();
        if ids.len() != tiles.len() {
            err("tiles", "tile ids must be unique".into());
        }
        for t in &tiles {
            if t.capacity_nominal == 0 {
                err("tiles", format!("{} has zero capacity", t.id));
            }
            if t.variants == 0 {
                err("tiles", format!("{} has no configuration variants", t.id));
            }
            if t.freq_level.permille() == 0 {
                err("tiles", format!("{} has zero frequency", t.id));
            }
        }
        if let Some(levels) = &self.frequency_levels {
            if levels.is_empty()
                || levels.windows(2).any(|w| w[0] >= w[1])
                || levels[0].permille() == 0
            {
                err(
                    "frequency_levels",
                    "must be positive and strictly ascending".into(),
                );
            }
        }
        if let Some(pairs) = &self.adjacency {
            for (a, b) in pairs {
                if !ids.contains(&TileId(*a)) || !ids.contains(&TileId(*b)) || a == b {
                    err(
                        "adjacency",
                        format!("pair ({a}, {b}) does not name two declared tiles"),
                    );
                }
            }
        }
        let mut names = BTreeSet::new();
        for t in &self.threads {
            if !names.insert(&t.id) {
                err("threads", format!("duplicate thread id {}", t.id));
            }
            if t.demand == 0 {
                err("threads", format!("thread {} has zero demand", t.id));
            }
        }
        if let Err(m) = resolve_profile(&self.profile, self.power_budget_mw) {
            err("profile", m);
        }
        for (i, c) in self.profile_changes.iter().enumerate() {
            if let Err(m) = resolve_profile(&c.profile, self.power_budget_mw) {
                err(&format!("profile_changes[{i}].profile"), m);
            }
        }
        for (i, f) in self.faults.iter().enumerate() {
            let field = format!("faults[{i}]");
            if f.at > self.duration {
                err(&field, format!("at {} is after the end of the run", f.at));
            }
            match &f.kind {
                FaultKind::Mbu { span } => {
                    if span.len() < 2 {
                        err(&field, "MBU span needs at least two tiles".into());
                    }
                    if let Some(t) = span.iter().find(|t| !ids.contains(t)) {
                        err(&field, format!("unknown {t}"));
                    } else if !self.connected(span) {
                        err(&field, "MBU span is not contiguous in the floorplan".into());
                    }
                }
                FaultKind::EccSyndrome {
                    region: MemoryRegion::MainMemory,
                } => {}
                _ => match f.tile {
                    None => err(&field, "target tile is required".into()),
                    Some(t) if !ids.contains(&t) => err(&field, format!("unknown {t}")),
                    _ => {}
                },
            }
        }
        for (name, rate) in self.rates.entries() {
            if !(rate.is_finite() && rate >= 0.0) {
                err(
                    &format!("rates.{name}"),
                    "must be a finite non-negative rate".into(),
                );
            }
        }
        if self.rates.any_positive() && self.rng_seed.is_none() && seed.is_none() {
            err(
                "rng_seed",
                "required when any stochastic rate is positive".into(),
            );
        }
        if self.ladder.partial_reconfig_latency == SimDuration::ZERO {
            err("ladder.partial_reconfig_latency", "must be positive".into());
        }
        if self.ladder.full_reboot_latency == SimDuration::ZERO {
            err("ladder.full_reboot_latency", "must be positive".into());
        }
        if self.ladder.dissent_threshold == 0 || self.ladder.dissent_window == 0 {
            err(
                "ladder",
                "dissent threshold and window must be positive".into(),
            );
        }
        if self.latencies.strategy_recompute == SimDuration::ZERO {
            err("latencies.strategy_recompute", "must be positive".into());
        }
        if let Some(m) = self.initial() {
            if let Err(v) = m.validate(&tiles, &self.threads) {
                err("initial_mapping", v.to_string());
            }
        }
        for (i, at) in self.induced_checkpoints.iter().enumerate() {
            if *at > self.duration {
                err(
                    &format!("induced_checkpoints[{i}]"),
                    "after the end of the run".into(),
                );
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(errs))
        }
    }

    fn connected(&self, span: &BTreeSet<TileId>) -> bool {
        let Some(&first) = span.iter().next() else {
            return false;
        };
        let mut seen = BTreeSet::from([first]);
        let mut stack = vec![first];
        while let Some(t) = stack.pop() {
            for &u in span {
                if !seen.contains(&u) && self.adjacent(t, u) {
                    seen.insert(u);
                    stack.push(u);
                }
            }
        }
        seen.len() == span.len()
    }

    /// Explicit faults plus faults drawn from the rates with `seed`, ordered
    /// by time (explicit ones first on ties).
    pub fn fault_schedule(&self, seed: u64) -> Vec<FaultEvent> {
        let mut out: Vec<FaultEvent> = self.faults.clone();
        if self.rates.any_positive() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tiles = self.build_tiles();
            let horizon = self.duration.as_secs_f64();
            let arrivals = |rng: &mut ChaCha8Rng, rate: f64| -> Vec<SimDuration> {
                let mut times = Vec::new();
                if rate <= 0.0 {
                    return times;
                }
                let exp = Exp::new(rate).expect("positive rate");
                let mut t = 0.0;
                loop {
                    t += rng.sample(exp);
                    if t > horizon {
                        break;
                    }
                    times.push(SimDuration::from_micros((t * 1e6).round() as u64));
                }
                times
            };
            for tile in &tiles {
                let r = &self.rates;
                let per_tile: [(f64, FaultKind); 6] = [
                    (r.transient_state, FaultKind::TransientState),
                    (r.transient_config, FaultKind::TransientConfig),
                    (
                        r.permanent_logic,
                        FaultKind::PermanentLogic { variants: None },
                    ),
                    (r.permanent_memory, FaultKind::PermanentMemory),
                    (
                        r.ecc_tile_local,
                        FaultKind::EccSyndrome {
                            region: MemoryRegion::TileLocal,
                        },
                    ),
                    (
                        r.ecc_validation,
                        FaultKind::EccSyndrome {
                            region: MemoryRegion::ValidationMemory,
                        },
                    ),
                ];
                for (rate, kind) in per_tile {
                    for at in arrivals(&mut rng, rate) {
                        let kind = match kind {
                            FaultKind::PermanentLogic { .. } => {
                                let mut v: BTreeSet<u32> = (0..tile.variants)
                                    .filter(|_| rng.random_bool(0.5))
                                    .collect();
                                if v.is_empty() {
                                    v.insert(rng.random_range(0..tile.variants));
                                }
                                FaultKind::PermanentLogic { variants: Some(v) }
                            }
                            ref k => k.clone(),
                        };
                        out.push(FaultEvent {
                            at,
                            tile: Some(tile.id),
                            kind,
                            seed_derived: true,
                        });
                    }
                }
                let neighbor = tiles
                    .iter()
                    .map(|t| t.id)
                    .find(|&u| u > tile.id && self.adjacent(tile.id, u));
                let times = arrivals(&mut rng, self.rates.mbu);
                if let Some(u) = neighbor {
                    for at in times {
                        out.push(FaultEvent {
                            at,
                            tile: None,
                            kind: FaultKind::Mbu {
                                span: BTreeSet::from([tile.id, u]),
                            },
                            seed_derived: true,
                        });
                    }
                }
            }
            for at in arrivals(&mut rng, self.rates.ecc_main_memory) {
                out.push(FaultEvent {
                    at,
                    tile: None,
                    kind: FaultKind::EccSyndrome {
                        region: MemoryRegion::MainMemory,
                    },
                    seed_derived: true,
                });
            }
        }
        out.sort_by_key(|f| (f.at, f.seed_derived));
        out
    }
}

fn resolve_profile(spec: &ProfileSpec, budget: Option<u64>) -> Result<PerformanceProfile, String> {
    let p = match spec {
        ProfileSpec::Named(name) => PerformanceProfile::builtin(name).map_err(|e| e.to_string())?,
        ProfileSpec::Inline(p) => {
            p.validate().map_err(|e| e.to_string())?;
            p.clone()
        }
    };
    Ok(match budget {
        Some(mw) => p.with_budget(Some(mw)),
        None => p,
    })
}
