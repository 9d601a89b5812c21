//! Scenario configuration: a TOML document where every key is optional and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::AdversaryConfig;
use crate::primitives::Millis;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("configuration file not found: {0}")]
    ConfigNotFound(String),
    #[error("invalid configuration field `{0}`")]
    ConfigInvalid(String),
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("cannot read configuration: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusMode {
    Quico,
    PbftBaseline,
}

impl ConsensusMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConsensusMode::Quico => "quico",
            ConsensusMode::PbftBaseline => "pbft_baseline",
        }
    }
}

impl std::str::FromStr for ConsensusMode {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "quico" => Ok(ConsensusMode::Quico),
            "pbft_baseline" | "pbft" | "baseline" => Ok(ConsensusMode::PbftBaseline),
            _ => Err(ConfigError::ConfigInvalid("consensus".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    /// Side of the square map.
    pub map_size_km: f64,
    pub stations: u32,
    /// Derived from `sensors / sensors_per_gateway` when absent.
    pub gateways: Option<u32>,
    pub sensors: u32,
    pub sensors_per_gateway: u32,
    pub station_altitude_km: f64,
    /// Radio range between sensors.
    pub sensor_range_km: f64,
    pub cluster_radius_km: f64,
    /// Fractional displacement of sensors from their grid points.
    pub grid_jitter: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            map_size_km: 0.664,
            stations: 3,
            gateways: None,
            sensors: 900,
            sensors_per_gateway: 100,
            station_altitude_km: 20.0,
            sensor_range_km: 0.1,
            cluster_radius_km: 0.05,
            grid_jitter: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Block interval.
    pub t_th: Millis,
    /// Creator waiting period.
    pub t_w: Millis,
    pub aggregation_period: Millis,
    pub expiry_horizon: Millis,
    /// Interval between two readings of one sensor.
    pub report_interval: Millis,
    pub tolerance: f64,
    pub neighbor_window: Millis,
    pub near_radius_km: f64,
    pub max_retry_rounds: u32,
    pub max_deferred_ticks: u32,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            t_th: 100,
            t_w: 100,
            aggregation_period: 50,
            expiry_horizon: 1_000,
            report_interval: 20_000,
            tolerance: 0.5,
            neighbor_window: 5_000,
            near_radius_km: 0.1,
            max_retry_rounds: 3,
            max_deferred_ticks: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub mtu: u32,
    /// Link rates in bits per millisecond, by sending node class.
    pub sensor_bandwidth: f64,
    pub gateway_bandwidth: f64,
    pub station_bandwidth: f64,
    /// km per millisecond.
    pub propagation_speed: f64,
    /// Standard deviation of the delay jitter as a fraction of the delay.
    pub jitter: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            mtu: 1500,
            sensor_bandwidth: 250.0,
            gateway_bandwidth: 10_000.0,
            station_bandwidth: 100_000.0,
            propagation_speed: 299.792_458,
            jitter: 0.05,
        }
    }
}

/// Processing cost of one node class, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpuCost {
    pub per_message: u64,
    pub verify: u64,
    pub sign: u64,
    pub hash_per_kb: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpuConfig {
    pub sensor: CpuCost,
    pub gateway: CpuCost,
    pub station: CpuCost,
}

impl Default for CpuConfig {
    fn default() -> Self {
        Self {
            sensor: CpuCost {
                per_message: 200,
                verify: 8_000,
                sign: 4_000,
                hash_per_kb: 500,
            },
            gateway: CpuCost {
                per_message: 50,
                verify: 2_000,
                sign: 1_000,
                hash_per_kb: 40,
            },
            station: CpuCost {
                per_message: 10,
                verify: 50,
                sign: 25,
                hash_per_kb: 3,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub budget_j: f64,
    pub tx_j_per_byte: f64,
    pub rx_j_per_byte: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            budget_j: 1_000.0,
            tx_j_per_byte: 1.67e-6,
            rx_j_per_byte: 1.8e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub value: f64,
    pub noise_sigma: f64,
    pub noise_band: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            value: 20.0,
            noise_sigma: 0.2,
            noise_band: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Simulated duration.
    pub sim_time: Millis,
    /// Extra time after `sim_time` for in-flight rounds to settle; no new
    /// readings or proposals start in it.
    pub drain_time: Millis,
    pub consensus: ConsensusMode,
    pub blockchain_enabled: bool,
    /// Modelled size of one reading on the wire, in bytes.
    pub tx_payload_size: u32,
    pub topology: TopologyConfig,
    pub protocol: ProtocolConfig,
    pub network: NetworkConfig,
    pub cpu: CpuConfig,
    pub energy: EnergyConfig,
    pub env: EnvConfig,
    pub adversary: AdversaryConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            sim_time: 60_000,
            drain_time: 3_000,
            consensus: ConsensusMode::Quico,
            blockchain_enabled: true,
            tx_payload_size: 1_000,
            topology: TopologyConfig::default(),
            protocol: ProtocolConfig::default(),
            network: NetworkConfig::default(),
            cpu: CpuConfig::default(),
            energy: EnergyConfig::default(),
            env: EnvConfig::default(),
            adversary: AdversaryConfig::default(),
        }
    }
}

fn check(ok: bool, field: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::ConfigInvalid(field.into()))
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn gateway_count(&self) -> u32 {
        self.topology
            .gateways
            .unwrap_or_else(|| self.topology.sensors.div_ceil(self.topology.sensors_per_gateway.max(1)))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.topology;
        check(t.map_size_km > 0.0 && t.map_size_km.is_finite(), "topology.map_size_km")?;
        check(t.stations >= 1, "topology.stations")?;
        check(t.sensors >= 1, "topology.sensors")?;
        check(t.sensors_per_gateway >= 1, "topology.sensors_per_gateway")?;
        check(t.gateways.is_none_or(|g| g >= 1), "topology.gateways")?;
        check(t.station_altitude_km >= 0.0, "topology.station_altitude_km")?;
        check(t.sensor_range_km > 0.0, "topology.sensor_range_km")?;
        check(t.cluster_radius_km > 0.0, "topology.cluster_radius_km")?;
        check((0.0..0.5).contains(&t.grid_jitter), "topology.grid_jitter")?;
        let p = &self.protocol;
        check(p.t_th >= 1, "protocol.t_th")?;
        check(p.t_w >= 1, "protocol.t_w")?;
        check(p.aggregation_period >= 1, "protocol.aggregation_period")?;
        check(p.expiry_horizon >= 1, "protocol.expiry_horizon")?;
        check(p.report_interval >= 1, "protocol.report_interval")?;
        check(p.tolerance >= 0.0, "protocol.tolerance")?;
        check(p.near_radius_km > 0.0, "protocol.near_radius_km")?;
        check(p.max_deferred_ticks >= 1, "protocol.max_deferred_ticks")?;
        let n = &self.network;
        check(n.mtu >= 1, "network.mtu")?;
        check(n.sensor_bandwidth > 0.0, "network.sensor_bandwidth")?;
        check(n.gateway_bandwidth > 0.0, "network.gateway_bandwidth")?;
        check(n.station_bandwidth > 0.0, "network.station_bandwidth")?;
        check(n.propagation_speed > 0.0, "network.propagation_speed")?;
        check((0.0..1.0).contains(&n.jitter), "network.jitter")?;
        let e = &self.energy;
        check(e.budget_j > 0.0, "energy.budget_j")?;
        check(e.tx_j_per_byte >= 0.0, "energy.tx_j_per_byte")?;
        check(e.rx_j_per_byte >= 0.0, "energy.rx_j_per_byte")?;
        check(self.env.noise_sigma >= 0.0, "env.noise_sigma")?;
        check(self.env.noise_band >= 0.0, "env.noise_band")?;
        check(self.tx_payload_size >= 1, "tx_payload_size")?;
        let a = &self.adversary;
        check((0.0..1.0).contains(&a.pmn), "adversary.pmn")?;
        check(a.attack_interval > 0, "adversary.attack_interval")?;
        check(a.falsification_offset.is_finite(), "adversary.falsification_offset")?;
        Ok(())
    }
}

pub fn parse_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    if !path.exists() {
        return Err(ConfigError::ConfigNotFound(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path)?;
    ScenarioConfig::from_toml_str(&text)
}
