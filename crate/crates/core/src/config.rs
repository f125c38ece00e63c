//! Scenario files: TOML with one table per module, plus sweep expansion over
//! dotted keys.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::AggregationConfig;
use crate::delegation::DelegationConfig;
use crate::onion::OnionConfig;
use crate::result_return::ReturnConfig;
use crate::sampling::SamplingConfig;
use crate::sim::{ChurnSpec, SimConfig, Tick};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("missing required field `seed`")]
    MissingSeed,
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad sweep `{0}`: expected key=v1,v2,...")]
    BadSweep(String),
}

/// Tick limits that may be unbounded: an integer, or the string `"inf"`.
pub mod ticks_or_inf {
    use super::Tick;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Tick>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(t) => s.serialize_u64(*t),
            None => s.serialize_str("inf"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Tick>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Some(n)),
            Raw::S(s) if s == "inf" => Ok(None),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "expected a tick count or \"inf\", got {s:?}"
            ))),
        }
    }
}

/// Who delegates, when, and with what profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub delegations: usize,
    /// First delegation tick; leave room for peer-sampling warmup.
    pub start_tick: Tick,
    pub spread_ticks: Tick,
    pub profile_dim: usize,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            delegations: 20,
            start_tick: 500,
            spread_ticks: 500,
            profile_dim: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    /// Each node colludes independently with this probability.
    pub colluder_fraction: f64,
    /// Run the passive sniffer over the link trace.
    pub sniffer: bool,
    pub delegate_view: bool,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            colluder_fraction: 0.0,
            sniffer: false,
            delegate_view: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub seed: Option<u64>,
    #[serde(default = "default_nodes")]
    pub n_nodes: usize,
    #[serde(default = "default_ticks")]
    pub sim_ticks: Tick,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub churn: ChurnSpec,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub onion: OnionConfig,
    #[serde(default)]
    pub delegation: DelegationConfig,
    #[serde(default)]
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub aggregation: AggregationConfig,
    #[serde(default)]
    pub result: ReturnConfig,
    #[serde(default)]
    pub adversary: AdversaryConfig,
    /// Dotted key -> values; every combination becomes one cell.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

fn default_nodes() -> usize {
    50
}

fn default_ticks() -> Tick {
    5000
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            seed: Some(1),
            n_nodes: default_nodes(),
            sim_ticks: default_ticks(),
            sim: SimConfig::default(),
            churn: ChurnSpec::default(),
            sampling: SamplingConfig::default(),
            onion: OnionConfig::default(),
            delegation: DelegationConfig::default(),
            workload: WorkloadConfig::default(),
            aggregation: AggregationConfig::default(),
            result: ReturnConfig::default(),
            adversary: AdversaryConfig::default(),
            sweep: BTreeMap::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Defaults with the seed filled in.
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed: Some(seed),
            ..Self::default()
        }
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.seed.ok_or(ConfigError::MissingSeed)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.seed()?;
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_nodes < 2 {
            return bad(format!("n_nodes must be at least 2, got {}", self.n_nodes));
        }
        if self.sim.latency_min > self.sim.latency_max {
            return bad(format!(
                "latency range [{}, {}] is invalid",
                self.sim.latency_min, self.sim.latency_max
            ));
        }
        if !(0.0..=1.0).contains(&self.sim.loss_probability) {
            return bad("sim.loss_probability must lie in [0, 1]".into());
        }
        self.churn
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.onion.validate().map_err(ConfigError::Invalid)?;
        if self.sampling.view_capacity == 0
            || self.sampling.shuffle_size == 0
            || self.sampling.round_interval_ticks == 0
        {
            return bad("sampling sizes and interval must be positive".into());
        }
        if self.delegation.phi_size < self.onion.k_max + 1 {
            return bad(format!(
                "delegation.phi_size ({}) must be at least onion.k_max + 1 ({})",
                self.delegation.phi_size,
                self.onion.k_max + 1
            ));
        }
        if self.delegation.phi_size > self.n_nodes - 1 {
            return bad(format!(
                "delegation.phi_size ({}) exceeds the n_nodes - 1 = {} other peers",
                self.delegation.phi_size,
                self.n_nodes - 1
            ));
        }
        if self.aggregation.epsilon.is_nan()
            || self.aggregation.epsilon <= 0.0
            || self.aggregation.round_interval_ticks == 0
        {
            return bad("aggregation.epsilon and round_interval_ticks must be positive".into());
        }
        if self.result.window_ticks == Some(0) || self.result.probe_backoff_ticks == 0 {
            return bad("result.window_ticks and probe_backoff_ticks must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.adversary.colluder_fraction) {
            return bad("adversary.colluder_fraction must lie in [0, 1]".into());
        }
        if self.adversary.sniffer && !self.sim.record_transmissions {
            return bad("adversary.sniffer needs sim.record_transmissions".into());
        }
        if self.workload.profile_dim == 0 {
            return bad("workload.profile_dim must be positive".into());
        }
        Ok(())
    }

    /// Sets a dotted key, checking it against the schema.
    pub fn with_override(&self, key: &str, value: toml::Value) -> Result<Self, ConfigError> {
        let mut root =
            toml::Value::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut cur = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cur.as_table_mut().ok_or_else(|| {
                ConfigError::Invalid(format!("`{key}` does not name a config field"))
            })?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            cur = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let text = toml::to_string(&root).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Invalid(format!("override `{key}`: {m}")),
            other => other,
        })
    }

    /// Expands `sweep` (plus any extra axes) into concrete cells, in
    /// lexicographic key order with the last key varying fastest.
    pub fn cells(
        &self,
        extra: &[(String, Vec<toml::Value>)],
    ) -> Result<Vec<(String, ScenarioConfig)>, ConfigError> {
        let mut axes: BTreeMap<String, Vec<toml::Value>> = self.sweep.clone();
        for (k, v) in extra {
            axes.insert(k.clone(), v.clone());
        }
        let mut base = self.clone();
        base.sweep.clear();
        let mut cells = vec![(String::new(), base)];
        for (key, values) in &axes {
            if values.is_empty() {
                return Err(ConfigError::BadSweep(key.clone()));
            }
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for (label, cfg) in &cells {
                for v in values {
                    let c = cfg.with_override(key, v.clone())?;
                    let part = format!("{key}={}", render(v));
                    let l = if label.is_empty() {
                        part
                    } else {
                        format!("{label};{part}")
                    };
                    next.push((l, c));
                }
            }
            cells = next;
        }
        for (label, cfg) in &mut cells {
            let base_name = if self.name.is_empty() {
                "scenario"
            } else {
                &self.name
            };
            cfg.name = if label.is_empty() {
                base_name.to_string()
            } else {
                format!("{base_name}[{label}]")
            };
        }
        Ok(cells)
    }
}

fn render(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses `key=v1,v2,...`; each value is read as a TOML literal, falling back
/// to a bare string.
pub fn parse_sweep(arg: &str) -> Result<(String, Vec<toml::Value>), ConfigError> {
    let (key, vals) = arg
        .split_once('=')
        .ok_or_else(|| ConfigError::BadSweep(arg.into()))?;
    let key = key.trim();
    if key.is_empty() || vals.trim().is_empty() {
        return Err(ConfigError::BadSweep(arg.into()));
    }
    let values = vals
        .split(',')
        .map(|raw| {
            let raw = raw.trim();
            #[derive(Deserialize)]
            struct Probe {
                v: toml::Value,
            }
            toml::from_str::<Probe>(&format!("v = {raw}"))
                .map(|p| p.v)
                .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
        })
        .collect();
    Ok((key.to_string(), values))
}
