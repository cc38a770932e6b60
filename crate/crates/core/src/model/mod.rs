//! Static and dynamic state of the tiled MPSoC.
//!
//! Capacity arithmetic is exact: demands and nominal capacities are integer
//! capacity units, frequency levels and time shares are stored in
//! thousandths, and every per-tile comparison happens in [`Load`] (thousandths
//! of a capacity unit).

mod state;
mod validation;

use std::fmt;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::time::SimDuration;

pub use state::{replication_level, Metrics, SystemState};
pub use validation::{ValidationEntry, ValidationMemory, WriteViolation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TileId(pub u32);

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tile {}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThreadId(pub String);

impl ThreadId {
    pub fn new(s: impl Into<String>) -> Self {
        ThreadId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ThreadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ThreadId {
    fn from(s: &str) -> Self {
        ThreadId(s.to_string())
    }
}

/// Criticality of an application thread. `Essential > High > Medium > Low`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CriticalityClass {
    Low,
    Medium,
    High,
    Essential,
}

impl CriticalityClass {
    /// Strongest first.
    pub const ALL: [CriticalityClass; 4] = [
        CriticalityClass::Essential,
        CriticalityClass::High,
        CriticalityClass::Medium,
        CriticalityClass::Low,
    ];

    /// 1 for Low up to 4 for Essential.
    pub fn rank(self) -> u32 {
        match self {
            CriticalityClass::Low => 1,
            CriticalityClass::Medium => 2,
            CriticalityClass::High => 3,
            CriticalityClass::Essential => 4,
        }
    }

    pub fn letter(self) -> char {
        match self {
            CriticalityClass::Essential => 'E',
            CriticalityClass::High => 'H',
            CriticalityClass::Medium => 'M',
            CriticalityClass::Low => 'L',
        }
    }
}

impl fmt::Display for CriticalityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Replicated execution mode of a thread.
///
/// Modes are ordered by replication factor; a larger factor is stronger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExecutionMode {
    /// N-modular redundancy with `n >= 4` replicas.
    Nmr(u8),
    Tmr,
    Dmr,
    Separate,
    Descheduled,
}

impl ExecutionMode {
    pub const DEFAULT_NMR_N: u8 = 4;

    pub fn replication_factor(self) -> usize {
        match self {
            ExecutionMode::Nmr(n) => n as usize,
            ExecutionMode::Tmr => 3,
            ExecutionMode::Dmr => 2,
            ExecutionMode::Separate => 1,
            ExecutionMode::Descheduled => 0,
        }
    }

    /// Mode with exactly `replicas` replicas.
    pub fn with_replicas(replicas: usize) -> ExecutionMode {
        match replicas {
            0 => ExecutionMode::Descheduled,
            1 => ExecutionMode::Separate,
            2 => ExecutionMode::Dmr,
            3 => ExecutionMode::Tmr,
            n => ExecutionMode::Nmr(n.min(u8::MAX as usize) as u8),
        }
    }

    /// The next weaker mode, if any.
    pub fn weaker(self) -> Option<ExecutionMode> {
        match self.replication_factor() {
            0 => None,
            n => Some(ExecutionMode::with_replicas(n - 1)),
        }
    }
}

impl PartialOrd for ExecutionMode {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ExecutionMode {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.replication_factor().cmp(&other.replication_factor())
    }
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecutionMode::Nmr(n) => write!(f, "NMR({n})"),
            ExecutionMode::Tmr => f.write_str("TMR"),
            ExecutionMode::Dmr => f.write_str("DMR"),
            ExecutionMode::Separate => f.write_str("Separate"),
            ExecutionMode::Descheduled => f.write_str("Descheduled"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid execution mode `{0}`")]
pub struct ParseModeError(pub String);

impl FromStr for ExecutionMode {
    type Err = ParseModeError;

    /// Accepts `NMR(n)` with `n >= 4`, bare `NMR` (n = 4), `TMR`, `DMR`,
    /// `Separate` and `Descheduled`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseModeError(s.to_string());
        match s.trim() {
            "NMR" => Ok(ExecutionMode::Nmr(Self::DEFAULT_NMR_N)),
            "TMR" => Ok(ExecutionMode::Tmr),
            "DMR" => Ok(ExecutionMode::Dmr),
            "Separate" => Ok(ExecutionMode::Separate),
            "Descheduled" => Ok(ExecutionMode::Descheduled),
            other => {
                let inner = other
                    .strip_prefix("NMR(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(err)?;
                let n: u8 = inner.trim().parse().map_err(|_| err())?;
                if n < 4 {
                    return Err(err());
                }
                Ok(ExecutionMode::Nmr(n))
            }
        }
    }
}

impl Serialize for ExecutionMode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExecutionMode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Thousandths of a capacity unit.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Load(pub u64);

impl Load {
    pub const ZERO: Load = Load(0);

    pub fn from_units(units: u64) -> Load {
        Load(units * 1_000)
    }

    pub fn saturating_sub(self, other: Load) -> Load {
        Load(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for Load {
    type Output = Load;
    fn add(self, rhs: Load) -> Load {
        Load(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Load {
    fn add_assign(&mut self, rhs: Load) {
        self.0 += rhs.0;
    }
}

impl std::ops::Sub for Load {
    type Output = Load;
    fn sub(self, rhs: Load) -> Load {
        Load(self.0 - rhs.0)
    }
}

impl std::iter::Sum for Load {
    fn sum<I: Iterator<Item = Load>>(iter: I) -> Load {
        Load(iter.map(|l| l.0).sum())
    }
}

impl fmt::Display for Load {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 % 1_000 == 0 {
            write!(f, "{}", self.0 / 1_000)
        } else {
            write!(f, "{}", self.0 as f64 / 1_000.0)
        }
    }
}

/// Clock frequency multiplier relative to nominal, in thousandths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FreqLevel(pub u16);

impl FreqLevel {
    pub const NOMINAL: FreqLevel = FreqLevel(1_000);

    pub fn default_steps() -> Vec<FreqLevel> {
        vec![
            FreqLevel(500),
            FreqLevel(1_000),
            FreqLevel(1_250),
            FreqLevel(1_500),
        ]
    }

    pub fn permille(self) -> u64 {
        self.0 as u64
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    /// Nearest representable level; `None` for non-positive or absurd inputs.
    pub fn from_f64(value: f64) -> Option<FreqLevel> {
        if !(value.is_finite() && value > 0.0 && value <= 60.0) {
            return None;
        }
        Some(FreqLevel((value * 1_000.0).round() as u16))
    }
}

impl Default for FreqLevel {
    fn default() -> Self {
        FreqLevel::NOMINAL
    }
}

impl fmt::Display for FreqLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_f64())
    }
}

impl Serialize for FreqLevel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for FreqLevel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(deserializer)?;
        FreqLevel::from_f64(v)
            .ok_or_else(|| de::Error::custom(format!("invalid frequency level {v}")))
    }
}

/// Fraction of a thread's demand it is granted each period, in thousandths.
///
/// Reductions happen in quarter steps down to a 25% floor and apply to every
/// replica of the thread alike, so siblings perform equivalent work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeShare(pub u16);

impl TimeShare {
    pub const FULL: TimeShare = TimeShare(1_000);
    pub const FLOOR: TimeShare = TimeShare(250);
    pub const STEP: u16 = 250;

    pub fn permille(self) -> u64 {
        self.0 as u64
    }

    pub fn is_full(self) -> bool {
        self == TimeShare::FULL
    }

    /// One quarter step lower, or `None` at the floor.
    pub fn reduced(self) -> Option<TimeShare> {
        (self > TimeShare::FLOOR).then(|| TimeShare((self.0 - Self::STEP).max(Self::FLOOR.0)))
    }

    pub fn increased(self) -> Option<TimeShare> {
        (self < TimeShare::FULL).then(|| TimeShare((self.0 + Self::STEP).min(Self::FULL.0)))
    }

    /// All grid values, largest first.
    pub fn grid() -> [TimeShare; 4] {
        [
            TimeShare(1_000),
            TimeShare(750),
            TimeShare(500),
            TimeShare(250),
        ]
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }
}

impl Default for TimeShare {
    fn default() -> Self {
        TimeShare::FULL
    }
}

impl fmt::Display for TimeShare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_f64())
    }
}

impl Serialize for TimeShare {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for TimeShare {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(deserializer)?;
        if !(0.25..=1.0).contains(&v) {
            return Err(de::Error::custom(format!(
                "time share {v} outside [0.25, 1]"
            )));
        }
        Ok(TimeShare((v * 1_000.0).round() as u16))
    }
}

/// A critical application thread.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadSpec {
    pub id: ThreadId,
    pub criticality: CriticalityClass,
    /// Capacity units needed per checkpoint period at nominal frequency.
    pub demand: u64,
    /// `true` when the thread needs a fixed amount of processing time and
    /// therefore can never be time-share reduced.
    #[serde(default = "default_true")]
    pub rt_guarantee: bool,
    /// How long a replica may defer a checkpoint to reach a viable state.
    #[serde(default)]
    pub checkpoint_delay_max: SimDuration,
    /// Modeled time a replica needs to reach a viable state at nominal
    /// frequency. Scales inversely with the host's frequency level.
    #[serde(default)]
    pub viable_delay: SimDuration,
}

fn default_true() -> bool {
    true
}

impl ThreadSpec {
    pub fn new(id: impl Into<String>, criticality: CriticalityClass, demand: u64) -> Self {
        ThreadSpec {
            id: ThreadId::new(id),
            criticality,
            demand,
            rt_guarantee: true,
            checkpoint_delay_max: SimDuration::ZERO,
            viable_delay: SimDuration::ZERO,
        }
    }

    pub fn sporadic(mut self) -> Self {
        self.rt_guarantee = false;
        self
    }

    /// Load one replica places on its host at the given time share.
    pub fn replica_load(&self, share: TimeShare) -> Load {
        Load(self.demand * share.permille())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TileHealth {
    Healthy,
    /// A checksum mismatch was observed and the tile has not been recovered yet.
    Suspect,
    Reconfiguring,
    PermanentlyDefective,
    ClockGated,
}

impl TileHealth {
    /// Whether the tile executes replicas.
    pub fn is_running(self) -> bool {
        matches!(self, TileHealth::Healthy | TileHealth::Suspect)
    }
}

/// A processor compartment: core, local interconnect and peripherals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub id: TileId,
    pub health: TileHealth,
    /// Capacity units per checkpoint period at frequency level 1.0.
    pub capacity_nominal: u64,
    pub freq_level: FreqLevel,
    pub fault_counter: u32,
    pub variant_index: u32,
    /// Number of differently routed configuration variants available.
    pub variants: u32,
}

impl Tile {
    pub fn new(id: u32, capacity_nominal: u64) -> Self {
        Tile {
            id: TileId(id),
            health: TileHealth::Healthy,
            capacity_nominal,
            freq_level: FreqLevel::NOMINAL,
            fault_counter: 0,
            variant_index: 0,
            variants: 3,
        }
    }

    /// Moves the tile to `next`. Leaving `PermanentlyDefective` is refused.
    pub fn set_health(&mut self, next: TileHealth) -> bool {
        if self.health == TileHealth::PermanentlyDefective {
            return next == TileHealth::PermanentlyDefective;
        }
        self.health = next;
        true
    }

    /// Capacity at `freq`, ignoring health.
    pub fn capacity_at(&self, freq: FreqLevel) -> Load {
        Load(self.capacity_nominal * freq.permille())
    }
}

/// Capacity the tile delivers per checkpoint period right now.
pub fn effective_capacity(tile: &Tile) -> Load {
    if tile.health.is_running() {
        tile.capacity_at(tile.freq_level)
    } else {
        Load::ZERO
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(cap: u64, freq: u16, health: TileHealth) -> Tile {
        let mut t = Tile::new(1, cap);
        t.freq_level = FreqLevel(freq);
        t.health = health;
        t
    }

    #[test]
    fn effective_capacity_examples() {
        assert_eq!(
            effective_capacity(&tile(100, 1000, TileHealth::Healthy)),
            Load::from_units(100)
        );
        assert_eq!(
            effective_capacity(&tile(100, 1500, TileHealth::Healthy)),
            Load::from_units(150)
        );
        assert_eq!(
            effective_capacity(&tile(100, 1000, TileHealth::PermanentlyDefective)),
            Load::ZERO
        );
        assert_eq!(
            effective_capacity(&tile(100, 1250, TileHealth::Suspect)),
            Load::from_units(125)
        );
        for h in [TileHealth::Reconfiguring, TileHealth::ClockGated] {
            assert_eq!(effective_capacity(&tile(100, 1000, h)), Load::ZERO);
        }
    }

    #[test]
    fn defective_is_absorbing() {
        let mut t = tile(100, 1000, TileHealth::Healthy);
        assert!(t.set_health(TileHealth::PermanentlyDefective));
        for h in [
            TileHealth::Healthy,
            TileHealth::Suspect,
            TileHealth::Reconfiguring,
            TileHealth::ClockGated,
        ] {
            assert!(!t.set_health(h));
            assert_eq!(t.health, TileHealth::PermanentlyDefective);
        }
    }

    #[test]
    fn criticality_is_totally_ordered() {
        use CriticalityClass::*;
        assert!(Essential > High && High > Medium && Medium > Low);
        let mut v = vec![Low, Essential, Medium, High];
        v.sort();
        assert_eq!(v, vec![Low, Medium, High, Essential]);
    }

    #[test]
    fn modes_order_by_replication() {
        use ExecutionMode::*;
        assert_eq!(Nmr(4).replication_factor(), 4);
        assert_eq!(Tmr.replication_factor(), 3);
        assert_eq!(Dmr.replication_factor(), 2);
        assert_eq!(Separate.replication_factor(), 1);
        assert_eq!(Descheduled.replication_factor(), 0);
        assert!(
            Nmr(5) > Nmr(4)
                && Nmr(4) > Tmr
                && Tmr > Dmr
                && Dmr > Separate
                && Separate > Descheduled
        );
    }

    #[test]
    fn mode_strings_round_trip() {
        use ExecutionMode::*;
        for m in [Nmr(4), Nmr(7), Tmr, Dmr, Separate, Descheduled] {
            assert_eq!(m.to_string().parse::<ExecutionMode>().unwrap(), m);
        }
        assert_eq!("NMR".parse::<ExecutionMode>().unwrap(), Nmr(4));
        assert!("NMR(3)".parse::<ExecutionMode>().is_err());
        assert!("QMR".parse::<ExecutionMode>().is_err());
    }

    #[test]
    fn time_share_steps() {
        assert_eq!(TimeShare::FULL.reduced(), Some(TimeShare(750)));
        assert_eq!(TimeShare(500).reduced(), Some(TimeShare(250)));
        assert_eq!(TimeShare::FLOOR.reduced(), None);
        assert_eq!(TimeShare::FULL.increased(), None);
        assert_eq!(TimeShare(250).increased(), Some(TimeShare(500)));
    }
}
