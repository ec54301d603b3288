//! JSON configuration files and flag overrides.

use std::path::Path;

use qcert::qchannel::NamedChannel;
use qcert::qstate::{self, NamedState};
use qcert::runner::SessionParams;
use qcert::simkit::{ChannelStrategy, DetectorModel, ProtocolParams, SourceModel};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub fn read_json(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Config object from an optional file, or an empty object.
pub fn load_object(path: Option<&Path>) -> anyhow::Result<Map<String, Value>> {
    match path {
        None => Ok(Map::new()),
        Some(p) => match read_json(p)? {
            Value::Object(map) => Ok(map),
            _ => anyhow::bail!("{}: top level must be a JSON object", p.display()),
        },
    }
}

/// Sets `key` when a flag was given.
pub fn override_field<T: Serialize>(map: &mut Map<String, Value>, key: &str, value: Option<T>) -> anyhow::Result<()> {
    if let Some(v) = value {
        map.insert(key.to_string(), serde_json::to_value(v)?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub probe: NamedState,
    pub message: NamedState,
    pub strategy: ChannelStrategy,
    pub detector: DetectorModel,
    pub params: ProtocolParams,
    #[serde(rename = "F_i")]
    pub f_i: f64,
    pub keep_rounds: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            probe: NamedState::Werner { visibility: 0.9929 },
            message: NamedState::Bell { index: 0 },
            strategy: ChannelStrategy::honest(NamedChannel::Identity { dim: 2 }),
            detector: DetectorModel::ideal(),
            params: ProtocolParams::new(100_000, 1.0, 7.0),
            f_i: 0.9943,
            keep_rounds: false,
        }
    }
}

pub fn source_model(probe: NamedState, message: NamedState) -> anyhow::Result<SourceModel> {
    Ok(SourceModel::new(
        qstate::make_named_state(probe)?,
        qstate::make_named_state(message)?,
    )?)
}

/// Shared by both peers; Bob reads only `session` and `detector`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerConfig {
    pub session: SessionParams,
    #[serde(default = "default_probe")]
    pub probe: NamedState,
    #[serde(default = "default_message")]
    pub message: NamedState,
    #[serde(default = "default_strategy")]
    pub strategy: ChannelStrategy,
    #[serde(default)]
    pub detector: DetectorModel,
}

fn default_probe() -> NamedState {
    SimulationConfig::default().probe
}

fn default_message() -> NamedState {
    SimulationConfig::default().message
}

fn default_strategy() -> ChannelStrategy {
    SimulationConfig::default().strategy
}
