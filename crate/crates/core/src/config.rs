//! Runtime configuration for detection: vantage point, binning, role
//! classification tables and anonymization parameters, loaded from TOML.

use crate::dates::BinLength;
use crate::error::{Error, Result};
use crate::flow::EstablishedPolicy;
use crate::roles::{AsnMap, Cidr, RoleConfig, DEFAULT_SERVER_PORTS};
use serde::Deserialize;
use std::path::Path;

/// Where the flow records were captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VantageMode {
    /// Inside an access network: all subscriber traffic, no flag filtering.
    Isp,
    /// At an exchange point: partial visibility, scan noise filtered by the
    /// established-TCP predicate, subscribers annotated with their origin AS.
    Ixp,
}

impl std::str::FromStr for VantageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "isp" => Ok(VantageMode::Isp),
            "ixp" => Ok(VantageMode::Ixp),
            other => Err(Error::Config(format!(
                "mode must be `isp` or `ixp`, got `{other}`"
            ))),
        }
    }
}

/// Full detection configuration.
#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub mode: VantageMode,
    pub bin: BinLength,
    /// Evidence fraction override; `None` falls back to each rule's default.
    pub threshold: Option<f64>,
    /// Sampled packets per bin above which a detected device counts as
    /// actively used rather than idle.
    pub packet_threshold: u64,
    pub established: EstablishedPolicy,
    pub roles: RoleConfig,
    pub asn_map: AsnMap,
    /// Aggregation prefix lengths for anonymized prefixes.
    pub v4_prefix_len: u8,
    pub v6_prefix_len: u8,
    /// Anonymization key; must be non-empty to ingest flows.
    pub salt: Vec<u8>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            mode: VantageMode::Isp,
            bin: BinLength::Hour,
            threshold: None,
            packet_threshold: 10,
            established: EstablishedPolicy::default(),
            roles: RoleConfig::default(),
            asn_map: AsnMap::default(),
            v4_prefix_len: 24,
            v6_prefix_len: 56,
            salt: Vec::new(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mode: Option<VantageMode>,
    bin: Option<BinLength>,
    threshold: Option<f64>,
    packet_threshold: Option<u64>,
    established: Option<EstablishedPolicy>,
    server_ports: Option<Vec<u16>>,
    #[serde(default)]
    server_asns: Vec<u32>,
    #[serde(default)]
    subscriber_ranges: Vec<String>,
    v4_prefix_len: Option<u8>,
    v6_prefix_len: Option<u8>,
    #[serde(default)]
    asn: Vec<RawAsnEntry>,
}

#[derive(Deserialize)]
struct RawAsnEntry {
    prefix: String,
    asn: u32,
}

impl DetectorConfig {
    pub fn from_toml_str(text: &str) -> Result<DetectorConfig> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        let mut cfg = DetectorConfig::default();
        if let Some(mode) = raw.mode {
            cfg.mode = mode;
        }
        if let Some(bin) = raw.bin {
            cfg.bin = bin;
        }
        cfg.threshold = raw.threshold;
        if let Some(t) = cfg.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!(
                    "threshold must be in [0, 1], got {t}"
                )));
            }
        }
        if let Some(p) = raw.packet_threshold {
            cfg.packet_threshold = p;
        }
        if let Some(e) = raw.established {
            cfg.established = e;
        }
        cfg.roles.server_ports = raw
            .server_ports
            .map(|v| v.into_iter().collect())
            .unwrap_or_else(|| DEFAULT_SERVER_PORTS.into_iter().collect());
        cfg.roles.server_asns = raw.server_asns.into_iter().collect();
        cfg.roles.subscriber_ranges = raw
            .subscriber_ranges
            .iter()
            .map(|s| s.parse::<Cidr>())
            .collect::<Result<Vec<_>>>()?;
        if let Some(l) = raw.v4_prefix_len {
            if l > 32 {
                return Err(Error::Config(format!("v4_prefix_len /{l} too long")));
            }
            cfg.v4_prefix_len = l;
        }
        if let Some(l) = raw.v6_prefix_len {
            if l > 128 {
                return Err(Error::Config(format!("v6_prefix_len /{l} too long")));
            }
            cfg.v6_prefix_len = l;
        }
        let entries = raw
            .asn
            .iter()
            .map(|e| Ok((e.prefix.parse::<Cidr>()?, e.asn)))
            .collect::<Result<Vec<_>>>()?;
        cfg.asn_map = AsnMap::new(entries);
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<DetectorConfig> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn with_salt(mut self, salt: &str) -> DetectorConfig {
        self.salt = salt.as_bytes().to_vec();
        self
    }
}
