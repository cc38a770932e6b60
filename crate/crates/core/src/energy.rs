//! Tile power model.
//!
//! Power is `P_static + P_dyn * freq_level * utilization`, where utilization
//! is the tile's load relative to its nominal capacity. All values are exact
//! rationals in microwatts; energy is microwatt-microseconds (picojoules).

use num_rational::Ratio;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::mapping::SystemMapping;
use crate::model::{Load, ThreadSpec, Tile, TileHealth};
use crate::time::SimDuration;

/// Microwatts.
pub type Power = Ratio<i128>;
/// Microwatt-microseconds.
pub type Energy = Ratio<i128>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PowerModel {
    #[serde(default = "default_static")]
    pub static_uw: u64,
    #[serde(default = "default_dynamic")]
    pub dynamic_uw: u64,
}

fn default_static() -> u64 {
    100_000
}

fn default_dynamic() -> u64 {
    250_000
}

impl Default for PowerModel {
    fn default() -> Self {
        PowerModel {
            static_uw: default_static(),
            dynamic_uw: default_dynamic(),
        }
    }
}

/// How a tile's clock is managed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gating {
    None,
    /// The tile gates itself for the idle part of each period.
    Idle,
    /// The tile is switched off.
    Full,
}

impl PowerModel {
    /// Power drawn by `tile` carrying `load`.
    pub fn tile_power(&self, tile: &Tile, load: Load, gating: Gating) -> Power {
        match tile.health {
            TileHealth::PermanentlyDefective | TileHealth::ClockGated => return Power::zero(),
            TileHealth::Reconfiguring => return Power::from_integer(self.static_uw as i128),
            TileHealth::Healthy | TileHealth::Suspect => {}
        }
        if gating == Gating::Full || tile.capacity_nominal == 0 {
            return Power::zero();
        }
        let nominal = tile.capacity_nominal as i128 * 1_000;
        let load = load.0 as i128;
        let f = tile.freq_level.permille() as i128;
        let dynamic = Power::new(self.dynamic_uw as i128 * f * load, 1_000 * nominal);
        let stat = match gating {
            Gating::Idle => {
                let busy =
                    Ratio::new(load, tile.capacity_nominal as i128 * f).min(Ratio::from_integer(1));
                Power::from_integer(self.static_uw as i128) * busy
            }
            _ => Power::from_integer(self.static_uw as i128),
        };
        stat + dynamic
    }

    /// Power of the whole system under `mapping`, using each tile's current
    /// frequency level.
    pub fn system_power(
        &self,
        tiles: &[Tile],
        mapping: &SystemMapping,
        threads: &[ThreadSpec],
    ) -> Power {
        tiles
            .iter()
            .map(|t| {
                let gating = if !mapping.active_tiles.contains(&t.id) {
                    Gating::Full
                } else if mapping.idle_gated.contains(&t.id) {
                    Gating::Idle
                } else {
                    Gating::None
                };
                self.tile_power(t, mapping.tile_load(t.id, threads), gating)
            })
            .sum()
    }

    /// Dynamic energy of `units` of extra work executed on `tile` within one period.
    pub fn work_energy(&self, tile: &Tile, units: u64, period: SimDuration) -> Energy {
        if tile.capacity_nominal == 0 {
            return Energy::zero();
        }
        let f = tile.freq_level.permille() as i128;
        Energy::new(
            self.dynamic_uw as i128 * f * units as i128 * period.as_micros() as i128,
            1_000 * tile.capacity_nominal as i128,
        )
    }
}

pub fn energy_over(power: Power, span: SimDuration) -> Energy {
    power * Ratio::from_integer(span.as_micros() as i128)
}

pub fn to_f64(r: &Ratio<i128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Exact rationals as `"n"` or `"n/d"` strings, which survive buffering
/// inside tagged enums.
pub mod ratio_str {
    use super::Ratio;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Ratio<i128>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&r.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Ratio<i128>, D::Error> {
        let text = String::deserialize(d)?;
        text.parse()
            .map_err(|_| D::Error::custom(format!("not a rational: {text}")))
    }
}

/// Milliwatts to microwatts.
pub fn budget_uw(mw: u64) -> Power {
    Power::from_integer(mw as i128 * 1_000)
}
