use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{CriticalityClass, ExecutionMode};

/// Allowed execution modes per criticality class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerformanceProfile {
    pub name: String,
    /// Strongest first.
    pub allowed: BTreeMap<CriticalityClass, Vec<ExecutionMode>>,
    /// Ceiling on the modeled power draw, in milliwatts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_budget_mw: Option<u64>,
    #[serde(default = "default_nmr")]
    pub nmr_n: u8,
}

fn default_nmr() -> u8 {
    ExecutionMode::DEFAULT_NMR_N
}

pub const BUILTIN_NAMES: [&str; 4] = ["Speed", "Energy", "Robustness", "Function"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProfileError {
    #[error("unknown profile `{0}`")]
    Unknown(String),
    #[error("profile `{profile}`: no modes allowed for {class}")]
    Empty {
        profile: String,
        class: CriticalityClass,
    },
    #[error("profile `{profile}`: modes for {class} are not strictly decreasing")]
    NotDecreasing {
        profile: String,
        class: CriticalityClass,
    },
    #[error("profile `{profile}`: {class} lists Descheduled")]
    Descheduled {
        profile: String,
        class: CriticalityClass,
    },
    #[error("profile `{profile}`: NMR needs at least 4 replicas, got {n}")]
    NmrTooSmall { profile: String, n: u8 },
}

impl PerformanceProfile {
    pub fn builtin(name: &str) -> Result<Self, ProfileError> {
        use CriticalityClass::*;
        use ExecutionMode::*;
        let nmr = Nmr(ExecutionMode::DEFAULT_NMR_N);
        let rows: [(CriticalityClass, Vec<ExecutionMode>); 4] = match name {
            "Speed" => [
                (Essential, vec![Tmr]),
                (High, vec![Tmr, Dmr]),
                (Medium, vec![Tmr, Dmr]),
                (Low, vec![Tmr, Dmr, Separate]),
            ],
            "Energy" => [
                (Essential, vec![Tmr]),
                (High, vec![Tmr]),
                (Medium, vec![Tmr, Dmr]),
                (Low, vec![Dmr, Separate]),
            ],
            "Robustness" => [
                (Essential, vec![nmr]),
                (High, vec![nmr, Tmr]),
                (Medium, vec![Tmr, Dmr]),
                (Low, vec![Tmr, Dmr]),
            ],
            "Function" => [
                (Essential, vec![nmr, Tmr]),
                (High, vec![nmr, Tmr]),
                (Medium, vec![Tmr, Dmr]),
                (Low, vec![Tmr, Dmr, Separate]),
            ],
            other => return Err(ProfileError::Unknown(other.to_string())),
        };
        Ok(PerformanceProfile {
            name: name.to_string(),
            allowed: rows.into_iter().collect(),
            power_budget_mw: None,
            nmr_n: ExecutionMode::DEFAULT_NMR_N,
        })
    }

    pub fn builtins() -> Vec<PerformanceProfile> {
        BUILTIN_NAMES
            .iter()
            .map(|n| Self::builtin(n).expect("built-in"))
            .collect()
    }

    pub fn with_budget(mut self, mw: Option<u64>) -> Self {
        self.power_budget_mw = mw;
        self
    }

    /// Replaces every NMR entry with NMR(`n`).
    pub fn with_nmr(mut self, n: u8) -> Self {
        self.nmr_n = n;
        for modes in self.allowed.values_mut() {
            for m in modes.iter_mut() {
                if let ExecutionMode::Nmr(_) = m {
                    *m = ExecutionMode::Nmr(n);
                }
            }
        }
        self
    }

    pub fn allowed(&self, class: CriticalityClass) -> &[ExecutionMode] {
        self.allowed.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn allows(&self, class: CriticalityClass, mode: ExecutionMode) -> bool {
        self.allowed(class).contains(&mode)
    }

    /// Weakest allowed mode for `class`.
    pub fn weakest(&self, class: CriticalityClass) -> Option<ExecutionMode> {
        self.allowed(class).last().copied()
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.nmr_n < 4 {
            return Err(ProfileError::NmrTooSmall {
                profile: self.name.clone(),
                n: self.nmr_n,
            });
        }
        for class in CriticalityClass::ALL {
            let modes = self.allowed(class);
            let err_ctx = || (self.name.clone(), class);
            if modes.is_empty() {
                let (profile, class) = err_ctx();
                return Err(ProfileError::Empty { profile, class });
            }
            if modes.contains(&ExecutionMode::Descheduled) {
                let (profile, class) = err_ctx();
                return Err(ProfileError::Descheduled { profile, class });
            }
            if modes
                .windows(2)
                .any(|w| w[0].replication_factor() <= w[1].replication_factor())
            {
                let (profile, class) = err_ctx();
                return Err(ProfileError::NotDecreasing { profile, class });
            }
            if let Some(n) = modes.iter().find_map(|m| match m {
                ExecutionMode::Nmr(n) if *n < 4 => Some(*n),
                _ => None,
            }) {
                return Err(ProfileError::NmrTooSmall {
                    profile: self.name.clone(),
                    n,
                });
            }
        }
        Ok(())
    }

    /// One line per class, strongest class first, e.g. `Energy: L → DMR,Separate`.
    pub fn rows(&self) -> Vec<String> {
        CriticalityClass::ALL
            .iter()
            .map(|c| {
                let modes: Vec<String> = self
                    .allowed(*c)
                    .iter()
                    .map(|m| mode_label(*m, self.nmr_n))
                    .collect();
                format!("{}: {} → {}", self.name, c.letter(), modes.join(","))
            })
            .collect()
    }
}

/// Short mode name; NMR at the profile's replication is shown bare.
fn mode_label(mode: ExecutionMode, nmr_n: u8) -> String {
    match mode {
        ExecutionMode::Nmr(n) if n == nmr_n => "NMR".to_string(),
        other => other.to_string(),
    }
}

impl fmt::Display for PerformanceProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_valid() {
        for p in PerformanceProfile::builtins() {
            p.validate().unwrap();
        }
    }

    #[test]
    fn rows_render() {
        let e = PerformanceProfile::builtin("Energy").unwrap();
        assert!(e.rows().contains(&"Energy: L → DMR,Separate".to_string()));
        let s = PerformanceProfile::builtin("Speed").unwrap();
        assert_eq!(s.rows()[0], "Speed: E → TMR");
        let r = PerformanceProfile::builtin("Robustness").unwrap();
        assert_eq!(r.rows()[1], "Robustness: H → NMR,TMR");
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        let mut p = PerformanceProfile::builtin("Speed").unwrap();
        p.allowed.insert(
            CriticalityClass::Low,
            vec![ExecutionMode::Dmr, ExecutionMode::Tmr],
        );
        assert!(matches!(
            p.validate(),
            Err(ProfileError::NotDecreasing { .. })
        ));
        p.allowed.insert(CriticalityClass::Low, vec![]);
        assert!(matches!(p.validate(), Err(ProfileError::Empty { .. })));
        p.allowed.insert(
            CriticalityClass::Essential,
            vec![ExecutionMode::Tmr, ExecutionMode::Descheduled],
        );
        p.allowed
            .insert(CriticalityClass::Low, vec![ExecutionMode::Dmr]);
        assert!(matches!(
            p.validate(),
            Err(ProfileError::Descheduled { .. })
        ));
        assert!(matches!(
            PerformanceProfile::builtin("Turbo"),
            Err(ProfileError::Unknown(_))
        ));
    }

    #[test]
    fn nmr_width_is_adjustable() {
        let p = PerformanceProfile::builtin("Robustness")
            .unwrap()
            .with_nmr(5);
        assert_eq!(
            p.allowed(CriticalityClass::Essential),
            &[ExecutionMode::Nmr(5)]
        );
        assert_eq!(p.rows()[0], "Robustness: E → NMR");
    }

    #[test]
    fn inline_json_round_trips() {
        let p = PerformanceProfile::builtin("Function")
            .unwrap()
            .with_budget(Some(1800));
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<PerformanceProfile>(&s).unwrap(), p);
    }
}
