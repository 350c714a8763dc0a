//! Scenario description. Every random process is optional so that fully
//! scripted scenarios can be written with `script` alone.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::model::DataItem;
use crate::peer::EvictionConfig;

/// A non-negative random quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dist {
    Constant { value: f64 },
    Exponential { mean: f64 },
    Uniform { low: f64, high: f64 },
}

impl Dist {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Dist::Constant { value } => value,
            Dist::Exponential { mean } => Exp::new(1.0 / mean).expect("validated").sample(rng),
            Dist::Uniform { low, high } if low == high => low,
            Dist::Uniform { low, high } => rng.random_range(low..high),
        }
    }

    fn validate(&self, path: &str, require_positive: bool) -> Result<(), SimError> {
        let bad = |why: &str| Err(SimError::Config(format!("{path}: {why}")));
        match *self {
            Dist::Constant { value } if !(value.is_finite() && value >= 0.0) => bad("value must be finite and >= 0"),
            Dist::Constant { value } if require_positive && value <= 0.0 => bad("value must be > 0"),
            Dist::Exponential { mean } if !(mean.is_finite() && mean > 0.0) => bad("mean must be finite and > 0"),
            Dist::Uniform { low, high } if !(low.is_finite() && high.is_finite() && 0.0 <= low && low <= high) => {
                bad("need 0 <= low <= high")
            }
            Dist::Uniform { high, .. } if require_positive && high <= 0.0 => bad("high must be > 0"),
            _ => Ok(()),
        }
    }

    fn within_unit(&self, path: &str) -> Result<(), SimError> {
        let ok = match *self {
            Dist::Constant { value } => value <= 1.0,
            Dist::Uniform { high, .. } => high <= 1.0,
            Dist::Exponential { .. } => false,
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Config(format!("{path}: must stay within [0, 1]")))
        }
    }
}

/// A group of identical terminals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalGroup {
    pub count: u32,
    pub quota_bytes: u64,
    /// What owners believe a fragment left on this terminal survives with.
    pub base_reliability: f64,
    /// What it actually survives with; defaults to `base_reliability`.
    #[serde(default)]
    pub true_reliability: Option<f64>,
    #[serde(default = "yes")]
    pub produces_data: bool,
    #[serde(default = "yes")]
    pub can_fail: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DependencyPattern {
    /// Every item is a fresh, independent item.
    None,
    /// With `update_probability`, a production is a new version of the
    /// owner's latest item that depends on the previous version (a delta).
    Chain { update_probability: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Time between productions on each producing terminal.
    pub production_interval: Dist,
    pub size_bytes: Dist,
    pub priority: Dist,
    pub n: u8,
    pub k: u8,
    #[serde(default = "no_deps")]
    pub dependencies: DependencyPattern,
    /// Relative lifetime; items never expire when absent.
    #[serde(default)]
    pub lifetime: Option<Dist>,
}

fn no_deps() -> DependencyPattern {
    DependencyPattern::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobilitySpec {
    /// Time between contacts started by each terminal; the partner is drawn
    /// uniformly among the others.
    pub inter_contact: Dist,
    pub contact_duration: Dist,
    pub bandwidth_bytes_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfrastructureSpec {
    /// Time between internet windows on each terminal.
    pub window_interval: Dist,
    pub window_duration: Dist,
    pub bandwidth_bytes_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    /// Time from (re)start to the next failure of a terminal that can fail.
    pub time_to_failure: Dist,
    /// Delay between a failure and the owner's restore attempt.
    pub restore_delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptedKind {
    Encounter { a: u32, b: u32, duration: f64, bandwidth: f64 },
    InternetWindow { terminal: u32, duration: f64, bandwidth: f64 },
    DataProduced { item: DataItem },
    TerminalFailure { terminal: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedEvent {
    pub time: f64,
    pub event: ScriptedKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub horizon: f64,
    pub terminals: Vec<TerminalGroup>,
    #[serde(default)]
    pub workload: Option<WorkloadSpec>,
    #[serde(default)]
    pub mobility: Option<MobilitySpec>,
    #[serde(default)]
    pub infrastructure: Option<InfrastructureSpec>,
    #[serde(default)]
    pub failures: Option<FailureSpec>,
    /// Probability that a peer holding a replica later reaches the server;
    /// scales the channel estimates owners use.
    #[serde(default = "one")]
    pub server_reach: f64,
    /// When false, encounters carry no backup traffic.
    #[serde(default = "yes")]
    pub peer_backup: bool,
    /// Evict lower-priority replicas when a peer runs out of memory.
    #[serde(default)]
    pub evict_on_pressure: bool,
    #[serde(default)]
    pub eviction: EvictionConfig,
    /// Carry real encoded bytes and check every peer restore.
    #[serde(default)]
    pub payload_mode: bool,
    #[serde(default)]
    pub occupancy_sample_interval: Option<f64>,
    /// Default restore delay for scripted failures without `failures`.
    #[serde(default)]
    pub restore_delay: Option<f64>,
    #[serde(default)]
    pub script: Vec<ScriptedEvent>,
}

fn one() -> f64 {
    1.0
}

fn unit(path: &str, x: f64) -> Result<(), SimError> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(SimError::Config(format!("{path}: {x} is outside [0, 1]")))
    }
}

fn positive(path: &str, x: f64) -> Result<(), SimError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(SimError::Config(format!("{path}: must be finite and > 0")))
    }
}

impl ScenarioConfig {
    pub fn terminal_count(&self) -> u32 {
        self.terminals.iter().map(|g| g.count).sum()
    }

    /// Per-terminal group, in id order.
    pub fn groups_by_terminal(&self) -> Vec<&TerminalGroup> {
        self.terminals
            .iter()
            .flat_map(|g| std::iter::repeat_n(g, g.count as usize))
            .collect()
    }

    pub fn restore_delay(&self) -> f64 {
        self.failures
            .as_ref()
            .map(|f| f.restore_delay)
            .or(self.restore_delay)
            .unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        positive("horizon", self.horizon)?;
        if self.terminal_count() == 0 {
            return Err(SimError::Config("terminals: need at least one terminal".into()));
        }
        for (i, g) in self.terminals.iter().enumerate() {
            if g.count == 0 {
                return Err(SimError::Config(format!("terminals[{i}].count: must be > 0")));
            }
            unit(&format!("terminals[{i}].base_reliability"), g.base_reliability)?;
            if let Some(t) = g.true_reliability {
                unit(&format!("terminals[{i}].true_reliability"), t)?;
            }
        }
        unit("server_reach", self.server_reach)?;
        if let Some(w) = &self.workload {
            w.production_interval.validate("workload.production_interval", true)?;
            w.size_bytes.validate("workload.size_bytes", true)?;
            w.priority.validate("workload.priority", false)?;
            w.priority.within_unit("workload.priority")?;
            if w.k == 0 || w.k > w.n {
                return Err(SimError::Config(format!("workload: need 1 <= k <= n, got n={} k={}", w.n, w.k)));
            }
            if let Some(l) = &w.lifetime {
                l.validate("workload.lifetime", true)?;
            }
            if let DependencyPattern::Chain { update_probability } = w.dependencies {
                unit("workload.dependencies.update_probability", update_probability)?;
            }
        }
        if let Some(m) = &self.mobility {
            m.inter_contact.validate("mobility.inter_contact", true)?;
            m.contact_duration.validate("mobility.contact_duration", false)?;
            positive("mobility.bandwidth_bytes_per_s", m.bandwidth_bytes_per_s)?;
            if self.terminal_count() < 2 {
                return Err(SimError::Config("mobility: needs at least two terminals".into()));
            }
        }
        if let Some(inf) = &self.infrastructure {
            inf.window_interval.validate("infrastructure.window_interval", true)?;
            inf.window_duration.validate("infrastructure.window_duration", false)?;
            positive("infrastructure.bandwidth_bytes_per_s", inf.bandwidth_bytes_per_s)?;
        }
        if let Some(f) = &self.failures {
            f.time_to_failure.validate("failures.time_to_failure", true)?;
            if !(f.restore_delay.is_finite() && f.restore_delay >= 0.0) {
                return Err(SimError::Config("failures.restore_delay: must be finite and >= 0".into()));
            }
        }
        if let Some(d) = self.restore_delay {
            if !(d.is_finite() && d >= 0.0) {
                return Err(SimError::Config("restore_delay: must be finite and >= 0".into()));
            }
        }
        if let Some(s) = self.occupancy_sample_interval {
            positive("occupancy_sample_interval", s)?;
        }
        let e = &self.eviction;
        for (name, w) in [("w_age", e.w_age), ("w_res", e.w_res), ("w_size", e.w_size)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(SimError::Config(format!("eviction.{name}: must be finite and >= 0")));
            }
        }
        unit("eviction.owner_cap_fraction", e.owner_cap_fraction)?;
        let n = self.terminal_count();
        for (i, ev) in self.script.iter().enumerate() {
            let path = format!("script[{i}]");
            if !(ev.time.is_finite() && ev.time >= 0.0) {
                return Err(SimError::Config(format!("{path}.time: must be finite and >= 0")));
            }
            let known = |t: u32, field: &str| {
                if t < n {
                    Ok(())
                } else {
                    Err(SimError::Config(format!("{path}.{field}: no terminal {t}")))
                }
            };
            match &ev.event {
                ScriptedKind::Encounter { a, b, duration, bandwidth } => {
                    known(*a, "a")?;
                    known(*b, "b")?;
                    if a == b {
                        return Err(SimError::Config(format!("{path}: a terminal cannot meet itself")));
                    }
                    if !(*duration >= 0.0 && duration.is_finite()) {
                        return Err(SimError::Config(format!("{path}.duration: must be finite and >= 0")));
                    }
                    positive(&format!("{path}.bandwidth"), *bandwidth)?;
                }
                ScriptedKind::InternetWindow { terminal, duration, bandwidth } => {
                    known(*terminal, "terminal")?;
                    if !(*duration >= 0.0 && duration.is_finite()) {
                        return Err(SimError::Config(format!("{path}.duration: must be finite and >= 0")));
                    }
                    positive(&format!("{path}.bandwidth"), *bandwidth)?;
                }
                ScriptedKind::DataProduced { item } => {
                    known(item.owner.0, "item.owner")?;
                    item.validate().map_err(|e| SimError::Config(format!("{path}.item: {e}")))?;
                }
                ScriptedKind::TerminalFailure { terminal } => known(*terminal, "terminal")?,
            }
        }
        Ok(())
    }
}
