//! Building the detection dictionary: from ground-truth device traffic to
//! hierarchical detection rules with per-day endpoint sets.
//!
//! The pipeline runs in stages, each usable on its own:
//!
//! 1. [`extract_device_domains`] — per-device domain sets and packet rates
//!    from lab ground truth.
//! 2. [`classify_domains`] — split domains into primary (device-identifying),
//!    support (shared vendor services) and generic (ads, telemetry, CDNs).
//! 3. [`build_daily_endpoint_sets`] — map domains to dated endpoint sets via
//!    passive DNS plus certificate expansion.
//! 4. [`prune_shared`] — drop domains on shared infrastructure; a signature
//!    must never fire on an address that also serves unrelated traffic.
//! 5. [`derive_rules`] — fold device signatures into a platform /
//!    manufacturer / product rule hierarchy and attach the endpoint sets.

use crate::cert::{self, CertRecord};
use crate::dates::{hour_start, DateRange};
use crate::error::{Error, Result};
use crate::flow::Protocol;
use crate::lines;
use crate::pdns::{DnsStore, InfraClass};
use crate::psl::SuffixRules;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::net::IpAddr;
use std::path::Path;
use std::str::FromStr;

/// Operating mode of a device during a ground-truth capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Powered and connected, nobody interacting with it.
    Idle,
    /// Under scripted interaction.
    Active,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Idle => write!(f, "idle"),
            Mode::Active => write!(f, "active"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "idle" => Ok(Mode::Idle),
            "active" => Ok(Mode::Active),
            other => Err(Error::Parse {
                field: "mode",
                reason: format!("`{other}` is neither idle nor active"),
            }),
        }
    }
}

/// Header line of the ground-truth CSV format.
pub const GROUND_TRUTH_CSV_HEADER: &str =
    "device_id,timestamp,domain,ip,port,protocol,packets,mode";

/// One observed contact of a lab device with a service endpoint. `domain` is
/// empty when the contact had no preceding DNS resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthEvent {
    pub device_id: String,
    pub timestamp: i64,
    pub domain: String,
    pub ip: IpAddr,
    pub port: u16,
    pub protocol: Protocol,
    pub packets: u64,
    pub mode: Mode,
}

impl GroundTruthEvent {
    pub fn parse_line(line: &str) -> Result<GroundTruthEvent> {
        let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Parse {
                field: "record",
                reason: format!("expected 8 comma-separated fields, got {}", fields.len()),
            });
        }
        let ev = GroundTruthEvent {
            device_id: fields[0].trim().to_string(),
            timestamp: fields[1].trim().parse().map_err(|e| Error::Parse {
                field: "timestamp",
                reason: format!("`{}`: {e}", fields[1]),
            })?,
            domain: fields[2].trim().trim_end_matches('.').to_ascii_lowercase(),
            ip: fields[3].trim().parse().map_err(|_| Error::Parse {
                field: "ip",
                reason: format!("`{}` is not an IP address", fields[3]),
            })?,
            port: fields[4].trim().parse().map_err(|e| Error::Parse {
                field: "port",
                reason: format!("`{}`: {e}", fields[4]),
            })?,
            protocol: fields[5].parse()?,
            packets: fields[6].trim().parse().map_err(|e| Error::Parse {
                field: "packets",
                reason: format!("`{}`: {e}", fields[6]),
            })?,
            mode: fields[7].parse()?,
        };
        if ev.device_id.is_empty() {
            return Err(Error::Parse {
                field: "device_id",
                reason: "empty device id".into(),
            });
        }
        if ev.packets == 0 {
            return Err(Error::Parse {
                field: "packets",
                reason: "event must carry at least one packet".into(),
            });
        }
        Ok(ev)
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.device_id,
            self.timestamp,
            self.domain,
            self.ip,
            self.port,
            self.protocol,
            self.packets,
            self.mode
        )
    }
}

/// Read a ground-truth CSV file.
pub fn read_ground_truth(
    path: &Path,
    lenient: bool,
) -> Result<(Vec<GroundTruthEvent>, lines::Skipped)> {
    lines::read_lines(
        path,
        Some(GROUND_TRUTH_CSV_HEADER),
        lenient,
        GroundTruthEvent::parse_line,
    )
}

/// A (port, protocol) pair a domain was contacted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PortSpec {
    pub port: u16,
    pub protocol: Protocol,
}

/// Observed usage of one domain by one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainUsage {
    /// Average sampled-at-1 packets per hour in idle mode, over the device's
    /// observed idle hours.
    pub idle_pph: f64,
    /// Same for active mode.
    pub active_pph: f64,
    /// Every (port, protocol) the device used for this domain.
    pub ports: BTreeSet<PortSpec>,
}

/// Per-device traffic profile distilled from ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceStats {
    pub domains: BTreeMap<String, DomainUsage>,
    /// Devices contacting fewer than 10 distinct domains: their signatures
    /// are short, so every domain carries more evidential weight.
    pub laconic: bool,
}

/// Distill per-device domain sets and packet rates from ground truth.
///
/// A rate is packets divided by the number of distinct UTC hours in which the
/// *device* produced any event in that mode — domains used in a fraction of
/// the device's hours get proportionally lower rates.
pub fn extract_device_domains(
    events: &[GroundTruthEvent],
) -> Result<BTreeMap<String, DeviceStats>> {
    if events.is_empty() {
        return Err(Error::EmptyInput);
    }
    // (device, mode) -> distinct hours observed.
    let mut hours: HashMap<(&str, Mode), HashSet<i64>> = HashMap::new();
    // (device, domain, mode) -> packet total.
    let mut packets: HashMap<(&str, &str, Mode), u64> = HashMap::new();
    // (device, domain) -> ports.
    let mut ports: HashMap<(&str, &str), BTreeSet<PortSpec>> = HashMap::new();
    for ev in events {
        hours
            .entry((&ev.device_id, ev.mode))
            .or_default()
            .insert(hour_start(ev.timestamp));
        if ev.domain.is_empty() {
            continue;
        }
        *packets
            .entry((&ev.device_id, &ev.domain, ev.mode))
            .or_default() += ev.packets;
        ports.entry((&ev.device_id, &ev.domain)).or_default().insert(PortSpec {
            port: ev.port,
            protocol: ev.protocol,
        });
    }
    let mut out: BTreeMap<String, DeviceStats> = BTreeMap::new();
    for ((device, domain), port_set) in ports {
        let rate = |mode: Mode| -> f64 {
            let n = hours.get(&(device, mode)).map_or(0, |h| h.len());
            if n == 0 {
                return 0.0;
            }
            let p = packets.get(&(device, domain, mode)).copied().unwrap_or(0);
            p as f64 / n as f64
        };
        let usage = DomainUsage {
            idle_pph: rate(Mode::Idle),
            active_pph: rate(Mode::Active),
            ports: port_set,
        };
        out.entry(device.to_string())
            .or_insert_with(|| DeviceStats {
                domains: BTreeMap::new(),
                laconic: false,
            })
            .domains
            .insert(domain.to_string(), usage);
    }
    // Devices that only ever produced domain-less events still exist.
    for ev in events {
        out.entry(ev.device_id.clone()).or_insert_with(|| DeviceStats {
            domains: BTreeMap::new(),
            laconic: false,
        });
    }
    for stats in out.values_mut() {
        stats.laconic = stats.domains.len() < 10;
    }
    Ok(out)
}

/// Functional class of a contacted domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainClass {
    /// Identifies the device type itself; at least one primary match is
    /// mandatory for a detection.
    Primary,
    /// Vendor service shared across that vendor's devices.
    Support,
    /// Third-party noise (ads, telemetry, NTP pools); never part of a rule.
    Generic,
}

impl fmt::Display for DomainClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainClass::Primary => write!(f, "primary"),
            DomainClass::Support => write!(f, "support"),
            DomainClass::Generic => write!(f, "generic"),
        }
    }
}

impl FromStr for DomainClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "primary" => Ok(DomainClass::Primary),
            "support" => Ok(DomainClass::Support),
            "generic" => Ok(DomainClass::Generic),
            other => Err(Error::Parse {
                field: "class",
                reason: format!("`{other}` is not primary/support/generic"),
            }),
        }
    }
}

/// Glob match where `*` spans any run of characters (dots included) and `?`
/// matches exactly one. Case-insensitive, as domains are.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.to_ascii_lowercase().chars().collect();
    let t: Vec<char> = text.to_ascii_lowercase().chars().collect();
    // Iterative matcher with single-star backtracking.
    let (mut pi, mut ti) = (0usize, 0usize);
    let (mut star, mut mark) = (None::<usize>, 0usize);
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some(pi);
            mark = ti;
            pi += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ti = mark;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}

/// Ordered classification patterns plus exact-name overrides.
#[derive(Debug, Clone, Default)]
pub struct ClassifierRules {
    /// Checked in file order; the first match wins.
    pub patterns: Vec<(String, DomainClass)>,
    /// Exact names that win over any pattern.
    pub overrides: BTreeMap<String, DomainClass>,
}

impl ClassifierRules {
    /// Parse a pattern file: `<glob> <class>` per line, `#` comments.
    pub fn parse_patterns(text: &str) -> Result<Vec<(String, DomainClass)>> {
        parse_class_lines(text)
    }

    /// Parse an override file: `<domain> <class>` per line, `#` comments.
    pub fn parse_overrides(text: &str) -> Result<BTreeMap<String, DomainClass>> {
        Ok(parse_class_lines(text)?.into_iter().collect())
    }

    pub fn from_files(patterns: &Path, overrides: Option<&Path>) -> Result<ClassifierRules> {
        let patterns = Self::parse_patterns(&std::fs::read_to_string(patterns)?)?;
        let overrides = match overrides {
            Some(p) => Self::parse_overrides(&std::fs::read_to_string(p)?)?,
            None => BTreeMap::new(),
        };
        Ok(ClassifierRules {
            patterns,
            overrides,
        })
    }
}

fn parse_class_lines(text: &str) -> Result<Vec<(String, DomainClass)>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (name, class) = match (parts.next(), parts.next(), parts.next()) {
            (Some(name), Some(class), None) => (name, class),
            _ => {
                return Err(Error::Parse {
                    field: "pattern",
                    reason: format!("`{line}` is not `<name> <class>`"),
                })
            }
        };
        out.push((name.to_ascii_lowercase(), class.parse()?));
    }
    Ok(out)
}

/// Result of classifying a domain corpus.
#[derive(Debug, Clone)]
pub struct Classification {
    pub classes: BTreeMap<String, DomainClass>,
    /// One entry per domain that matched nothing and fell back to generic.
    pub warnings: Vec<String>,
}

/// Classify every domain: exact overrides first, then the first matching
/// pattern in file order; anything left over is generic (with a warning, so
/// an incomplete pattern file is visible instead of silently shrinking
/// signatures).
pub fn classify_domains(domains: &BTreeSet<String>, rules: &ClassifierRules) -> Classification {
    let mut classes = BTreeMap::new();
    let mut warnings = Vec::new();
    for domain in domains {
        let class = rules.overrides.get(domain).copied().or_else(|| {
            rules
                .patterns
                .iter()
                .find(|(pat, _)| glob_match(pat, domain))
                .map(|(_, c)| *c)
        });
        let class = match class {
            Some(c) => c,
            None => {
                warnings.push(format!(
                    "domain `{domain}` matched no classification pattern; treating as generic"
                ));
                DomainClass::Generic
            }
        };
        classes.insert(domain.clone(), class);
    }
    Classification { classes, warnings }
}

/// A dated service endpoint a rule watches for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub ip: IpAddr,
    pub port: u16,
    pub protocol: Protocol,
}

/// domain -> endpoint set, for one day.
pub type DomainEndpoints = BTreeMap<String, BTreeSet<Endpoint>>;
/// day -> domain -> endpoint set.
pub type DailyEndpoints = BTreeMap<NaiveDate, DomainEndpoints>;

/// Output of [`build_daily_endpoint_sets`].
#[derive(Debug, Clone, Default)]
pub struct EndpointSets {
    pub daily: DailyEndpoints,
    /// Domains whose endpoints came (at least partly) from certificate
    /// expansion; for domains passive DNS could not see at all, this is what
    /// rescues them from the "insufficient" class.
    pub cert_resolved: BTreeSet<String>,
}

/// Map each domain to dated endpoint sets.
///
/// Per day, the domain's passive-DNS addresses are crossed with the (port,
/// protocol) pairs the ground truth observed for it. Certificate expansion
/// runs once over the whole window and its (ip, port) endpoints — TCP by
/// construction, TLS does not run over anything else here — are added to
/// every day: a scan hit proves the deployment exists, not on which day a
/// resolver asked about it.
pub fn build_daily_endpoint_sets(
    domains: &BTreeSet<String>,
    ports: &BTreeMap<String, BTreeSet<PortSpec>>,
    dns: &DnsStore,
    certs: &[CertRecord],
    window: &DateRange,
    rules: &SuffixRules,
    allow_foreign_sans: bool,
) -> Result<EndpointSets> {
    let mut out = EndpointSets::default();
    for domain in domains {
        let cert_endpoints =
            cert::resolve_unmapped(domain, certs, window, rules, allow_foreign_sans)?;
        if cert_endpoints.is_some() {
            out.cert_resolved.insert(domain.clone());
        }
        let fallback_ports: BTreeSet<PortSpec> = [PortSpec {
            port: 443,
            protocol: Protocol::Tcp,
        }]
        .into();
        let port_specs = ports.get(domain).unwrap_or(&fallback_ports);
        for day in window.days() {
            let mut endpoints: BTreeSet<Endpoint> = BTreeSet::new();
            for ip in dns.domain_to_service_ips(domain, day) {
                for spec in port_specs {
                    endpoints.insert(Endpoint {
                        ip,
                        port: spec.port,
                        protocol: spec.protocol,
                    });
                }
            }
            if let Some(pairs) = &cert_endpoints {
                for (ip, port) in pairs {
                    endpoints.insert(Endpoint {
                        ip: *ip,
                        port: *port,
                        protocol: Protocol::Tcp,
                    });
                }
            }
            if !endpoints.is_empty() {
                out.daily
                    .entry(day)
                    .or_default()
                    .insert(domain.clone(), endpoints);
            }
        }
    }
    Ok(out)
}

/// A device dropped during pruning, and why.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcludedDevice {
    pub device_id: String,
    pub reason: String,
}

/// Result of [`prune_shared`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PruneOutcome {
    /// device -> surviving domain set.
    pub retained: BTreeMap<String, BTreeSet<String>>,
    pub excluded: Vec<ExcludedDevice>,
    /// Every domain dropped from at least one signature.
    pub dropped_domains: BTreeSet<String>,
}

/// Drop shared-infrastructure domains from the signatures. Dedicated and
/// insufficient-data domains stay: the latter may still gain endpoints via
/// certificate expansion, and either way they count toward a rule's domain
/// total. Devices left without a single primary domain cannot be detected
/// soundly and are excluded outright.
pub fn prune_shared(
    signatures: &BTreeMap<String, BTreeSet<String>>,
    infra: &BTreeMap<String, InfraClass>,
    classes: &BTreeMap<String, DomainClass>,
) -> PruneOutcome {
    let mut out = PruneOutcome::default();
    for (device, domains) in signatures {
        let mut kept = BTreeSet::new();
        for domain in domains {
            if infra.get(domain) == Some(&InfraClass::Shared) {
                out.dropped_domains.insert(domain.clone());
            } else {
                kept.insert(domain.clone());
            }
        }
        let has_primary = kept
            .iter()
            .any(|d| classes.get(d) == Some(&DomainClass::Primary));
        if has_primary {
            out.retained.insert(device.clone(), kept);
        } else {
            let reason = if kept.is_empty() {
                "no domain survived shared-infrastructure pruning".to_string()
            } else {
                "no primary domain survived shared-infrastructure pruning".to_string()
            };
            out.excluded.push(ExcludedDevice {
                device_id: device.clone(),
                reason,
            });
        }
    }
    out
}

/// Number of distinct matched domains required to fire a rule with `n`
/// monitored domains at evidence fraction `d`.
///
/// `max(1, floor(d * n))`, computed with a small epsilon so a product that is
/// exact in decimal (0.3 * 10) cannot land just below its integer under
/// binary floating point.
pub fn required_domain_count(n: usize, d: f64) -> Result<usize> {
    if n == 0 {
        return Err(Error::DomainCountZero);
    }
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::Config(format!(
            "evidence fraction must be in [0, 1], got {d}"
        )));
    }
    let floored = (d * n as f64 + 1e-9).floor() as usize;
    Ok(floored.max(1))
}

/// Granularity of a detection rule, coarse to fine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleLevel {
    Platform,
    Manufacturer,
    Product,
}

impl fmt::Display for RuleLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleLevel::Platform => write!(f, "platform"),
            RuleLevel::Manufacturer => write!(f, "manufacturer"),
            RuleLevel::Product => write!(f, "product"),
        }
    }
}

/// One entry of the hierarchy configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierarchyEntry {
    pub label: String,
    pub level: RuleLevel,
    #[serde(default)]
    pub parent: Option<String>,
    /// Devices whose signatures this rule unions.
    #[serde(default)]
    pub devices: Vec<String>,
    /// Extra domains characterizing this rule beyond its devices (e.g. the
    /// single voice-service domain that defines a platform).
    #[serde(default)]
    pub specialization_domains: Vec<String>,
    /// Whether the parent's domains are folded in (default). When off, the
    /// rule must already cover its parent's domains on its own.
    #[serde(default = "default_true")]
    pub inherit: bool,
}

fn default_true() -> bool {
    true
}

fn default_threshold() -> f64 {
    0.4
}

/// Hierarchy configuration file: a forest of rule entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierarchyConfig {
    #[serde(default = "default_threshold")]
    pub default_threshold: f64,
    #[serde(default)]
    pub rules: Vec<HierarchyEntry>,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            default_threshold: default_threshold(),
            rules: Vec::new(),
        }
    }
}

impl HierarchyConfig {
    pub fn from_file(path: &Path) -> Result<HierarchyConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: HierarchyConfig = serde_json::from_str(&text)?;
        if !(0.0..=1.0).contains(&cfg.default_threshold) {
            return Err(Error::Config(format!(
                "default_threshold must be in [0, 1], got {}",
                cfg.default_threshold
            )));
        }
        Ok(cfg)
    }
}

/// One detection rule of the finished dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRule {
    pub label: String,
    pub level: RuleLevel,
    pub parent: Option<String>,
    pub primary_domains: BTreeSet<String>,
    pub support_domains: BTreeSet<String>,
    pub default_threshold: f64,
    /// day -> domain -> endpoints; only days and domains with observations.
    pub daily_endpoints: DailyEndpoints,
}

impl DetectionRule {
    /// All monitored domains (primary and support).
    pub fn domains(&self) -> impl Iterator<Item = &String> {
        self.primary_domains.iter().chain(self.support_domains.iter())
    }

    pub fn monitored_count(&self) -> usize {
        self.primary_domains.len() + self.support_domains.len()
    }

    pub fn contains_domain(&self, domain: &str) -> bool {
        self.primary_domains.contains(domain) || self.support_domains.contains(domain)
    }
}

/// The finished detection dictionary: rules keyed by label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoTDictionary {
    /// Study window the endpoint sets were built for.
    pub window: DateRange,
    pub default_threshold: f64,
    pub rules: BTreeMap<String, DetectionRule>,
}

impl IoTDictionary {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain struct serializes");
        s.push('\n');
        s
    }

    pub fn from_file(path: &Path) -> Result<IoTDictionary> {
        let dict: IoTDictionary = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        dict.validate()?;
        Ok(dict)
    }

    /// Structural invariants: parents resolve, no cycles, every rule keeps at
    /// least one primary domain, endpoint domains belong to their rule.
    pub fn validate(&self) -> Result<()> {
        for (label, rule) in &self.rules {
            if label != &rule.label {
                return Err(Error::Config(format!(
                    "rule keyed `{label}` labels itself `{}`",
                    rule.label
                )));
            }
            if rule.primary_domains.is_empty() {
                return Err(Error::Config(format!(
                    "rule `{label}` has no primary domain"
                )));
            }
            if let Some(parent) = &rule.parent {
                if !self.rules.contains_key(parent) {
                    return Err(Error::UnknownLabel(parent.clone()));
                }
            }
            for domains in rule.daily_endpoints.values() {
                for domain in domains.keys() {
                    if !rule.contains_domain(domain) {
                        return Err(Error::Config(format!(
                            "rule `{label}` has endpoints for unmonitored domain `{domain}`"
                        )));
                    }
                }
            }
        }
        // Cycle check over the parent relation.
        for label in self.rules.keys() {
            let mut seen = BTreeSet::new();
            let mut cur = Some(label.clone());
            while let Some(l) = cur {
                if !seen.insert(l.clone()) {
                    return Err(Error::HierarchyCycle(l));
                }
                cur = self.rules.get(&l).and_then(|r| r.parent.clone());
            }
        }
        Ok(())
    }

    /// Ancestor chain of `label`, nearest first.
    pub fn ancestors(&self, label: &str) -> Vec<&DetectionRule> {
        let mut out = Vec::new();
        let mut cur = self.rules.get(label).and_then(|r| r.parent.as_deref());
        while let Some(l) = cur {
            match self.rules.get(l) {
                Some(rule) => {
                    out.push(rule);
                    cur = rule.parent.as_deref();
                }
                None => break,
            }
        }
        out
    }

    /// Whether `a` is a strict ancestor of `b`.
    pub fn is_ancestor(&self, a: &str, b: &str) -> bool {
        self.ancestors(b).iter().any(|r| r.label == a)
    }

    /// Days for which at least one rule has endpoints.
    pub fn days(&self) -> BTreeSet<NaiveDate> {
        self.rules
            .values()
            .flat_map(|r| r.daily_endpoints.keys().copied())
            .collect()
    }
}

/// Output of [`derive_rules`].
#[derive(Debug)]
pub struct RuleBuild {
    pub dictionary: IoTDictionary,
    pub warnings: Vec<String>,
}

/// Fold pruned device signatures into the configured rule hierarchy.
///
/// Each entry unions its member devices' signatures plus its explicit
/// specialization domains; inheriting entries add their parent's full set, so
/// a product is always a superset of its manufacturer, which contains its
/// platform. Devices no entry references become flat manufacturer-level
/// rules of their own. Rules whose monitored sets come out identical are
/// indistinguishable at detection time and get merged (an ancestor absorbs
/// its equal descendants; unrelated equals collapse into one combined rule).
pub fn derive_rules(
    signatures: &BTreeMap<String, BTreeSet<String>>,
    classes: &BTreeMap<String, DomainClass>,
    daily: &DailyEndpoints,
    hierarchy: &HierarchyConfig,
    window: DateRange,
) -> Result<RuleBuild> {
    let mut warnings = Vec::new();

    // ---- validate the configuration graph -------------------------------
    let mut by_label: BTreeMap<&str, &HierarchyEntry> = BTreeMap::new();
    for entry in &hierarchy.rules {
        if by_label.insert(&entry.label, entry).is_some() {
            return Err(Error::Config(format!(
                "duplicate hierarchy label `{}`",
                entry.label
            )));
        }
    }
    for entry in &hierarchy.rules {
        if let Some(parent) = &entry.parent {
            if !by_label.contains_key(parent.as_str()) {
                return Err(Error::Config(format!(
                    "rule `{}` names unknown parent `{parent}`",
                    entry.label
                )));
            }
        }
    }
    // Cycle detection over the parent relation.
    for entry in &hierarchy.rules {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let mut cur: Option<&str> = Some(&entry.label);
        while let Some(l) = cur {
            if !seen.insert(l) {
                return Err(Error::HierarchyCycle(l.to_string()));
            }
            cur = by_label.get(l).and_then(|e| e.parent.as_deref());
        }
    }

    // ---- topological order (parents first) ------------------------------
    let mut order: Vec<&str> = Vec::new();
    {
        let mut placed: BTreeSet<&str> = BTreeSet::new();
        let mut remaining: Vec<&HierarchyEntry> = hierarchy.rules.iter().collect();
        while !remaining.is_empty() {
            let before = remaining.len();
            remaining.retain(|e| {
                let ready = match &e.parent {
                    Some(p) => placed.contains(p.as_str()),
                    None => true,
                };
                if ready {
                    order.push(&e.label);
                    placed.insert(&e.label);
                }
                !ready
            });
            debug_assert!(remaining.len() < before, "cycle detection missed a cycle");
        }
    }

    // ---- full monitored sets in topo order ------------------------------
    let mut full: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut resolved_parent: BTreeMap<String, Option<String>> = BTreeMap::new();
    let mut skipped: BTreeSet<String> = BTreeSet::new();
    let referenced: BTreeSet<&str> = hierarchy
        .rules
        .iter()
        .flat_map(|e| e.devices.iter().map(|d| d.as_str()))
        .collect();

    for label in &order {
        let entry = by_label[label];
        let mut own: BTreeSet<String> = BTreeSet::new();
        for device in &entry.devices {
            match signatures.get(device) {
                Some(domains) => own.extend(domains.iter().cloned()),
                None => warnings.push(format!(
                    "rule `{label}`: device `{device}` has no usable signature; ignored"
                )),
            }
        }
        for domain in &entry.specialization_domains {
            let domain = domain.to_ascii_lowercase();
            match classes.get(&domain) {
                Some(DomainClass::Primary | DomainClass::Support) => {
                    own.insert(domain);
                }
                Some(DomainClass::Generic) => warnings.push(format!(
                    "rule `{label}`: specialization domain `{domain}` is generic; dropped"
                )),
                None => warnings.push(format!(
                    "rule `{label}`: specialization domain `{domain}` is unclassified; dropped"
                )),
            }
        }
        // Nearest ancestor that was not skipped.
        let mut parent = entry.parent.clone();
        while let Some(p) = parent.clone() {
            if skipped.contains(&p) {
                parent = resolved_parent.get(&p).cloned().flatten();
            } else {
                break;
            }
        }
        if let Some(p) = &parent {
            let parent_set = full.get(p).cloned().unwrap_or_default();
            if entry.inherit {
                own.extend(parent_set);
            } else if !parent_set.is_subset(&own) {
                return Err(Error::ChildNotSuperset {
                    child: entry.label.clone(),
                    parent: p.clone(),
                });
            }
        }
        let has_primary = own
            .iter()
            .any(|d| classes.get(d) == Some(&DomainClass::Primary));
        resolved_parent.insert(entry.label.clone(), parent.clone());
        if !has_primary {
            warnings.push(format!(
                "rule `{label}` retains no primary domain; dropped from the dictionary"
            ));
            skipped.insert(entry.label.clone());
            continue;
        }
        full.insert(entry.label.clone(), own);
    }

    // ---- flat rules for unreferenced devices ----------------------------
    let mut levels: BTreeMap<String, RuleLevel> = hierarchy
        .rules
        .iter()
        .map(|e| (e.label.clone(), e.level))
        .collect();
    for (device, domains) in signatures {
        if referenced.contains(device.as_str()) {
            continue;
        }
        if by_label.contains_key(device.as_str()) {
            return Err(Error::Config(format!(
                "device `{device}` collides with a hierarchy label"
            )));
        }
        let has_primary = domains
            .iter()
            .any(|d| classes.get(d) == Some(&DomainClass::Primary));
        if !has_primary {
            // prune_shared normally excludes these; double-checked here
            // because derive_rules accepts arbitrary signature maps.
            warnings.push(format!(
                "device `{device}` has no primary domain; no flat rule emitted"
            ));
            continue;
        }
        full.insert(device.clone(), domains.clone());
        resolved_parent.insert(device.clone(), None);
        levels.insert(device.clone(), RuleLevel::Manufacturer);
    }

    // ---- merge rules with identical monitored sets ----------------------
    let mut groups: BTreeMap<Vec<String>, Vec<String>> = BTreeMap::new();
    for (label, set) in &full {
        groups
            .entry(set.iter().cloned().collect())
            .or_default()
            .push(label.clone());
    }
    // old label -> replacement label after merging.
    let mut replaced: BTreeMap<String, String> = BTreeMap::new();
    let mut merged_new: BTreeMap<String, (BTreeSet<String>, Option<String>, RuleLevel)> =
        BTreeMap::new();
    let is_anc = |a: &str, b: &str| -> bool {
        let mut cur = resolved_parent.get(b).cloned().flatten();
        while let Some(l) = cur {
            if l == a {
                return true;
            }
            cur = resolved_parent.get(&l).cloned().flatten();
        }
        false
    };
    for (set, members) in &groups {
        if members.len() < 2 {
            continue;
        }
        let all_related = members.iter().all(|a| {
            members
                .iter()
                .all(|b| a == b || is_anc(a, b) || is_anc(b, a))
        });
        if all_related {
            // Keep the one that is ancestor of all the others (the coarsest).
            let keep = members
                .iter()
                .find(|a| members.iter().all(|b| *a == b || is_anc(a, b)))
                .expect("a fully related group has a top element")
                .clone();
            for m in members {
                if *m != keep {
                    warnings.push(format!(
                        "rule `{m}` monitors the same domains as its ancestor `{keep}`; collapsed"
                    ));
                    replaced.insert(m.clone(), keep.clone());
                }
            }
        } else {
            let combined = members.join("+");
            warnings.push(format!(
                "rules {} are indistinguishable (identical domain sets); merged as `{combined}`",
                members
                    .iter()
                    .map(|m| format!("`{m}`"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
            // Parent: shared resolved parent if all members agree, else none.
            let parents: BTreeSet<Option<String>> = members
                .iter()
                .map(|m| resolved_parent.get(m).cloned().flatten())
                .collect();
            let parent = if parents.len() == 1 {
                parents.into_iter().next().unwrap()
            } else {
                None
            };
            for m in members {
                replaced.insert(m.clone(), combined.clone());
            }
            merged_new.insert(
                combined,
                (set.iter().cloned().collect(), parent, RuleLevel::Platform),
            );
        }
    }
    for old in replaced.keys() {
        full.remove(old);
    }
    for (label, (set, parent, level)) in &merged_new {
        full.insert(label.clone(), set.clone());
        resolved_parent.insert(label.clone(), parent.clone());
        levels.insert(label.clone(), *level);
    }
    // Remap parent pointers that went through a replaced or skipped rule.
    let remap = |mut parent: Option<String>| -> Option<String> {
        loop {
            match parent {
                Some(p) => {
                    if let Some(new) = replaced.get(&p) {
                        parent = Some(new.clone());
                        // A merged rule may not point at itself.
                    } else if !full.contains_key(&p) {
                        parent = resolved_parent.get(&p).cloned().flatten();
                    } else {
                        return Some(p);
                    }
                }
                None => return None,
            }
        }
    };

    // ---- assemble the dictionary ----------------------------------------
    let mut rules: BTreeMap<String, DetectionRule> = BTreeMap::new();
    for (label, set) in &full {
        let parent = {
            let p = remap(resolved_parent.get(label).cloned().flatten());
            // Self-parenting can appear when a merged rule absorbed its own
            // parent; cut the link.
            if p.as_deref() == Some(label.as_str()) {
                None
            } else {
                p
            }
        };
        let mut primary = BTreeSet::new();
        let mut support = BTreeSet::new();
        for domain in set {
            match classes.get(domain) {
                Some(DomainClass::Primary) => {
                    primary.insert(domain.clone());
                }
                Some(DomainClass::Support) => {
                    support.insert(domain.clone());
                }
                Some(DomainClass::Generic) | None => {
                    warnings.push(format!(
                        "rule `{label}`: domain `{domain}` is not primary or support; dropped"
                    ));
                }
            }
        }
        let mut daily_endpoints: DailyEndpoints = BTreeMap::new();
        for (day, by_domain) in daily {
            if !window.contains(*day) {
                continue;
            }
            let mut for_day: DomainEndpoints = BTreeMap::new();
            for domain in primary.iter().chain(support.iter()) {
                if let Some(eps) = by_domain.get(domain) {
                    if !eps.is_empty() {
                        for_day.insert(domain.clone(), eps.clone());
                    }
                }
            }
            if !for_day.is_empty() {
                daily_endpoints.insert(*day, for_day);
            }
        }
        rules.insert(
            label.clone(),
            DetectionRule {
                label: label.clone(),
                level: *levels.get(label).unwrap_or(&RuleLevel::Manufacturer),
                parent,
                primary_domains: primary,
                support_domains: support,
                default_threshold: hierarchy.default_threshold,
                daily_endpoints,
            },
        );
    }

    let dictionary = IoTDictionary {
        window,
        default_threshold: hierarchy.default_threshold,
        rules,
    };
    dictionary.validate()?;
    Ok(RuleBuild {
        dictionary,
        warnings,
    })
}

/// A pair of unrelated rules sharing monitored domains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapPair {
    pub a: String,
    pub b: String,
    pub shared: BTreeSet<String>,
}

/// List every pair of rules that are not ancestor-related yet share monitored
/// domains. Such overlap makes detections ambiguous; an empty result is the
/// healthy state.
pub fn disjointness_check(dict: &IoTDictionary) -> Vec<OverlapPair> {
    let labels: Vec<&String> = dict.rules.keys().collect();
    let mut out = Vec::new();
    for (i, a) in labels.iter().enumerate() {
        for b in labels.iter().skip(i + 1) {
            if dict.is_ancestor(a, b) || dict.is_ancestor(b, a) {
                continue;
            }
            let ra = &dict.rules[*a];
            let rb = &dict.rules[*b];
            let shared: BTreeSet<String> = ra
                .domains()
                .filter(|d| rb.contains_domain(d))
                .cloned()
                .collect();
            if !shared.is_empty() {
                out.push(OverlapPair {
                    a: (**a).clone(),
                    b: (**b).clone(),
                    shared,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn ground_truth_roundtrip() {
        let line = "cam-1,1573776000,stream.vendor.com,198.18.0.10,443,TCP,12,idle";
        let ev = GroundTruthEvent::parse_line(line).unwrap();
        assert_eq!(ev.device_id, "cam-1");
        assert_eq!(ev.mode, Mode::Idle);
        assert_eq!(ev.to_csv_line(), line);
        // Empty domain allowed (no preceding DNS).
        let ev = GroundTruthEvent::parse_line("cam-1,1573776000,,198.18.0.10,123,UDP,1,active")
            .unwrap();
        assert!(ev.domain.is_empty());
        assert!(GroundTruthEvent::parse_line("x,y").is_err());
        assert!(GroundTruthEvent::parse_line(
            ",1573776000,d.com,198.18.0.10,443,TCP,1,idle"
        )
        .is_err());
    }

    #[test]
    fn rates_average_over_device_hours() {
        let mk = |ts: i64, domain: &str, packets: u64, mode: &str| {
            GroundTruthEvent::parse_line(&format!(
                "dev,{ts},{domain},198.18.0.1,443,TCP,{packets},{mode}"
            ))
            .unwrap()
        };
        let events = vec![
            // Two distinct idle hours; a.com used in both, b.com in one.
            mk(1_573_776_000, "a.com", 6, "idle"),
            mk(1_573_779_600, "a.com", 4, "idle"),
            mk(1_573_779_700, "b.com", 20, "idle"),
            // One active hour.
            mk(1_573_790_000, "a.com", 30, "active"),
        ];
        let stats = extract_device_domains(&events).unwrap();
        let dev = &stats["dev"];
        assert_eq!(dev.domains["a.com"].idle_pph, 5.0); // 10 packets / 2 hours
        assert_eq!(dev.domains["b.com"].idle_pph, 10.0); // 20 / 2 (device hours!)
        assert_eq!(dev.domains["a.com"].active_pph, 30.0);
        assert_eq!(dev.domains["b.com"].active_pph, 0.0);
        assert!(dev.laconic);
        assert!(extract_device_domains(&[]).is_err());
    }

    #[test]
    fn laconic_boundary_is_ten_domains() {
        let mut events = Vec::new();
        for i in 0..10 {
            events.push(
                GroundTruthEvent::parse_line(&format!(
                    "chatty,1573776000,d{i}.vendor.com,198.18.0.1,443,TCP,1,idle"
                ))
                .unwrap(),
            );
        }
        let stats = extract_device_domains(&events).unwrap();
        assert!(!stats["chatty"].laconic);
        events.pop();
        let stats = extract_device_domains(&events).unwrap();
        assert!(stats["chatty"].laconic);
    }

    #[test]
    fn glob_semantics() {
        assert!(glob_match("*.vendor.com", "dev.vendor.com"));
        assert!(glob_match("*.vendor.com", "a.b.vendor.com")); // * spans dots
        assert!(!glob_match("*.vendor.com", "vendor.com"));
        assert!(glob_match("avs.*", "avs.voice.example"));
        assert!(glob_match("cam-??.vendor.com", "cam-01.vendor.com"));
        assert!(!glob_match("cam-??.vendor.com", "cam-1.vendor.com"));
        assert!(glob_match("exact.com", "EXACT.com"));
        assert!(glob_match("*", "anything.at.all"));
        assert!(!glob_match("", "x"));
        assert!(glob_match("a*c*e", "abcde"));
        assert!(!glob_match("a*c*e", "abcdx"));
    }

    #[test]
    fn classification_order_and_overrides() {
        let rules = ClassifierRules {
            patterns: ClassifierRules::parse_patterns(
                "# device services first\n\
                 stream.*.com primary\n\
                 *.vendor.com support\n\
                 *.ads.example generic\n",
            )
            .unwrap(),
            overrides: ClassifierRules::parse_overrides("stream.vendor.com generic\n").unwrap(),
        };
        let domains: BTreeSet<String> = [
            "stream.vendor.com",  // override wins over both patterns
            "stream.other.com",   // first pattern
            "api.vendor.com",     // second pattern
            "t.ads.example",      // third pattern
            "unmatched.example",  // fallback
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let got = classify_domains(&domains, &rules);
        assert_eq!(got.classes["stream.vendor.com"], DomainClass::Generic);
        assert_eq!(got.classes["stream.other.com"], DomainClass::Primary);
        assert_eq!(got.classes["api.vendor.com"], DomainClass::Support);
        assert_eq!(got.classes["t.ads.example"], DomainClass::Generic);
        assert_eq!(got.classes["unmatched.example"], DomainClass::Generic);
        assert_eq!(got.warnings.len(), 1);
        assert!(got.warnings[0].contains("unmatched.example"));
    }

    #[test]
    fn pattern_file_rejects_malformed_lines() {
        assert!(ClassifierRules::parse_patterns("just-a-name\n").is_err());
        assert!(ClassifierRules::parse_patterns("a.com nothing\n").is_err());
        assert!(ClassifierRules::parse_patterns("a.com primary extra\n").is_err());
    }

    #[test]
    fn required_count_formula() {
        // floor at work.
        assert_eq!(required_domain_count(10, 0.4).unwrap(), 4);
        assert_eq!(required_domain_count(7, 0.4).unwrap(), 2); // floor(2.8)
        assert_eq!(required_domain_count(1, 0.4).unwrap(), 1); // max(1, 0)
        assert_eq!(required_domain_count(3, 0.1).unwrap(), 1);
        assert_eq!(required_domain_count(34, 1.0).unwrap(), 34);
        // The decimal trap: 0.3 * 10 is 2.999... in binary; must be 3.
        assert_eq!(required_domain_count(10, 0.3).unwrap(), 3);
        assert_eq!(required_domain_count(100, 0.07).unwrap(), 7);
        // D = 0 is a degenerate but legal fraction: one domain suffices.
        assert_eq!(required_domain_count(10, 0.0).unwrap(), 1);
        assert!(required_domain_count(0, 0.4).is_err());
        assert!(required_domain_count(10, 1.5).is_err());
        assert!(required_domain_count(10, -0.1).is_err());
    }

    fn classes_of(pairs: &[(&str, DomainClass)]) -> BTreeMap<String, DomainClass> {
        pairs.iter().map(|(d, c)| (d.to_string(), *c)).collect()
    }

    fn sig(pairs: &[(&str, &[&str])]) -> BTreeMap<String, BTreeSet<String>> {
        pairs
            .iter()
            .map(|(dev, doms)| {
                (
                    dev.to_string(),
                    doms.iter().map(|s| s.to_string()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn pruning_drops_shared_only() {
        use DomainClass::*;
        let signatures = sig(&[
            ("cam", &["p1.cam.com", "s1.cam.com", "cdn.shared.net"]),
            ("bulb", &["p1.bulb.com"]),
            ("doomed", &["p1.doomed.com", "s1.doomed.com"]),
            // Primary known only through certificates: no pDNS verdict at all.
            ("ghost", &["p1.ghost.com"]),
        ]);
        let infra: BTreeMap<String, InfraClass> = [
            ("p1.cam.com", InfraClass::Dedicated),
            ("s1.cam.com", InfraClass::Insufficient),
            ("cdn.shared.net", InfraClass::Shared),
            ("p1.bulb.com", InfraClass::Dedicated),
            ("p1.doomed.com", InfraClass::Shared),
            ("s1.doomed.com", InfraClass::Insufficient),
            // p1.ghost.com absent from the map entirely.
        ]
        .iter()
        .map(|(d, c)| (d.to_string(), *c))
        .collect();
        let classes = classes_of(&[
            ("p1.cam.com", Primary),
            ("s1.cam.com", Support),
            ("cdn.shared.net", Support),
            ("p1.bulb.com", Primary),
            ("p1.doomed.com", Primary),
            ("s1.doomed.com", Support),
            ("p1.ghost.com", Primary),
        ]);
        let out = prune_shared(&signatures, &infra, &classes);
        assert_eq!(out.retained.len(), 3);
        // Insufficient-data domains survive: they still count toward N.
        assert_eq!(out.retained["cam"].len(), 2);
        assert!(out.retained["cam"].contains("s1.cam.com"));
        assert!(!out.retained["cam"].contains("cdn.shared.net"));
        assert_eq!(out.retained["ghost"].len(), 1);
        // Only the shared Primary was dropped, leaving support-only: excluded.
        assert_eq!(out.excluded.len(), 1);
        assert_eq!(out.excluded[0].device_id, "doomed");
        assert!(out.dropped_domains.contains("cdn.shared.net"));
        assert!(out.dropped_domains.contains("p1.doomed.com"));
        assert!(!out.dropped_domains.contains("s1.doomed.com"));
    }

    fn window() -> DateRange {
        DateRange::new(d("2019-11-15"), d("2019-11-16")).unwrap()
    }

    fn entry(
        label: &str,
        level: RuleLevel,
        parent: Option<&str>,
        devices: &[&str],
        extra: &[&str],
    ) -> HierarchyEntry {
        HierarchyEntry {
            label: label.to_string(),
            level,
            parent: parent.map(|s| s.to_string()),
            devices: devices.iter().map(|s| s.to_string()).collect(),
            specialization_domains: extra.iter().map(|s| s.to_string()).collect(),
            inherit: true,
        }
    }

    #[test]
    fn hierarchy_nesting_and_flat_fallback() {
        use DomainClass::*;
        // Voice platform: one specialization domain, no devices.
        // Speaker manufacturer under it; tv product under the manufacturer.
        // One extra unreferenced device becomes a flat rule.
        let signatures = sig(&[
            ("speaker", &["p.speaker.com", "s.speaker.com"]),
            ("tv", &["p.speaker.com", "s.speaker.com", "p.tv.com"]),
            ("lone", &["p.lone.com"]),
        ]);
        let classes = classes_of(&[
            ("voice.platform.com", Primary),
            ("p.speaker.com", Primary),
            ("s.speaker.com", Support),
            ("p.tv.com", Primary),
            ("p.lone.com", Primary),
        ]);
        let hierarchy = HierarchyConfig {
            default_threshold: 0.4,
            rules: vec![
                entry("voice", RuleLevel::Platform, None, &[], &["voice.platform.com"]),
                entry("speakers", RuleLevel::Manufacturer, Some("voice"), &["speaker"], &[]),
                entry("smart-tv", RuleLevel::Product, Some("speakers"), &["tv"], &[]),
            ],
        };
        let build = derive_rules(&signatures, &classes, &BTreeMap::new(), &hierarchy, window())
            .unwrap();
        let dict = build.dictionary;
        assert_eq!(dict.rules.len(), 4);
        assert_eq!(dict.rules["voice"].monitored_count(), 1);
        // Manufacturer = own 2 + platform 1.
        assert_eq!(dict.rules["speakers"].monitored_count(), 3);
        // Product = own 3 + inherited 3 (overlapping) + 1 platform = 4.
        assert_eq!(dict.rules["smart-tv"].monitored_count(), 4);
        assert!(dict.rules["smart-tv"]
            .primary_domains
            .contains("voice.platform.com"));
        assert_eq!(dict.rules["lone"].level, RuleLevel::Manufacturer);
        assert!(dict.is_ancestor("voice", "smart-tv"));
        assert!(!dict.is_ancestor("smart-tv", "voice"));
        // Supersets along the chain.
        let anc: BTreeSet<String> = dict.rules["speakers"].domains().cloned().collect();
        let desc: BTreeSet<String> = dict.rules["smart-tv"].domains().cloned().collect();
        assert!(anc.is_subset(&desc));
    }

    #[test]
    fn empty_hierarchy_gives_flat_rules() {
        use DomainClass::*;
        let signatures = sig(&[("a", &["p.a.com"]), ("b", &["p.b.com"])]);
        let classes = classes_of(&[("p.a.com", Primary), ("p.b.com", Primary)]);
        let build = derive_rules(
            &signatures,
            &classes,
            &BTreeMap::new(),
            &HierarchyConfig::default(),
            window(),
        )
        .unwrap();
        assert_eq!(build.dictionary.rules.len(), 2);
        assert!(build.dictionary.rules.values().all(|r| r.level == RuleLevel::Manufacturer
            && r.parent.is_none()));
    }

    #[test]
    fn hierarchy_cycle_detected() {
        use DomainClass::*;
        let signatures = sig(&[("a", &["p.a.com"])]);
        let classes = classes_of(&[("p.a.com", Primary)]);
        let hierarchy = HierarchyConfig {
            default_threshold: 0.4,
            rules: vec![
                entry("x", RuleLevel::Platform, Some("y"), &["a"], &[]),
                entry("y", RuleLevel::Manufacturer, Some("x"), &[], &[]),
            ],
        };
        let err =
            derive_rules(&signatures, &classes, &BTreeMap::new(), &hierarchy, window())
                .unwrap_err();
        assert!(matches!(err, Error::HierarchyCycle(_)));
    }

    #[test]
    fn non_inheriting_child_must_cover_parent() {
        use DomainClass::*;
        let signatures = sig(&[("child-dev", &["p.child.com"])]);
        let classes = classes_of(&[("p.child.com", Primary), ("p.parent.com", Primary)]);
        let mut child = entry(
            "child",
            RuleLevel::Product,
            Some("parent"),
            &["child-dev"],
            &[],
        );
        child.inherit = false;
        let hierarchy = HierarchyConfig {
            default_threshold: 0.4,
            rules: vec![
                entry("parent", RuleLevel::Manufacturer, None, &[], &["p.parent.com"]),
                child,
            ],
        };
        let err =
            derive_rules(&signatures, &classes, &BTreeMap::new(), &hierarchy, window())
                .unwrap_err();
        assert!(matches!(err, Error::ChildNotSuperset { .. }));
    }

    #[test]
    fn identical_related_rules_collapse_to_ancestor() {
        use DomainClass::*;
        // Child adds nothing over its parent -> collapsed into the parent.
        let signatures = sig(&[("dev", &["p.a.com"])]);
        let classes = classes_of(&[("p.a.com", Primary)]);
        let hierarchy = HierarchyConfig {
            default_threshold: 0.4,
            rules: vec![
                entry("parent", RuleLevel::Manufacturer, None, &["dev"], &[]),
                entry("child", RuleLevel::Product, Some("parent"), &["dev"], &[]),
            ],
        };
        let build =
            derive_rules(&signatures, &classes, &BTreeMap::new(), &hierarchy, window()).unwrap();
        assert_eq!(build.dictionary.rules.len(), 1);
        assert!(build.dictionary.rules.contains_key("parent"));
        assert!(build.warnings.iter().any(|w| w.contains("collapsed")));
    }

    #[test]
    fn identical_unrelated_rules_merge() {
        use DomainClass::*;
        let signatures = sig(&[("dev1", &["p.same.com"]), ("dev2", &["p.same.com"])]);
        let classes = classes_of(&[("p.same.com", Primary)]);
        let build = derive_rules(
            &signatures,
            &classes,
            &BTreeMap::new(),
            &HierarchyConfig::default(),
            window(),
        )
        .unwrap();
        assert_eq!(build.dictionary.rules.len(), 1);
        let rule = build.dictionary.rules.values().next().unwrap();
        assert_eq!(rule.label, "dev1+dev2");
        assert_eq!(rule.level, RuleLevel::Platform);
        assert!(build.warnings.iter().any(|w| w.contains("indistinguishable")));
    }

    #[test]
    fn daily_endpoints_attach_to_owning_rules() {
        use DomainClass::*;
        let signatures = sig(&[("a", &["p.a.com"]), ("b", &["p.b.com"])]);
        let classes = classes_of(&[("p.a.com", Primary), ("p.b.com", Primary)]);
        let ep = Endpoint {
            ip: "198.18.0.1".parse().unwrap(),
            port: 443,
            protocol: Protocol::Tcp,
        };
        let mut daily: DailyEndpoints = BTreeMap::new();
        daily
            .entry(d("2019-11-15"))
            .or_default()
            .insert("p.a.com".into(), [ep].into());
        // A day outside the window must not leak in.
        daily
            .entry(d("2019-12-01"))
            .or_default()
            .insert("p.a.com".into(), [ep].into());
        let build = derive_rules(
            &signatures,
            &classes,
            &daily,
            &HierarchyConfig::default(),
            window(),
        )
        .unwrap();
        let ra = &build.dictionary.rules["a"];
        assert_eq!(ra.daily_endpoints.len(), 1);
        assert!(ra.daily_endpoints[&d("2019-11-15")].contains_key("p.a.com"));
        assert!(build.dictionary.rules["b"].daily_endpoints.is_empty());
    }

    #[test]
    fn dictionary_json_roundtrip_is_stable() {
        use DomainClass::*;
        let signatures = sig(&[("a", &["p.a.com", "s.a.com"])]);
        let classes = classes_of(&[("p.a.com", Primary), ("s.a.com", Support)]);
        let build = derive_rules(
            &signatures,
            &classes,
            &BTreeMap::new(),
            &HierarchyConfig::default(),
            window(),
        )
        .unwrap();
        let json = build.dictionary.to_json_string();
        let back: IoTDictionary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, build.dictionary);
        assert_eq!(back.to_json_string(), json);
    }

    #[test]
    fn disjointness_reports_unrelated_overlap_only() {
        use DomainClass::*;
        let signatures = sig(&[
            ("a", &["p.shared.com", "p.a.com"]),
            ("b", &["p.shared.com", "p.b.com"]),
        ]);
        let classes = classes_of(&[
            ("p.shared.com", Primary),
            ("p.a.com", Primary),
            ("p.b.com", Primary),
        ]);
        let build = derive_rules(
            &signatures,
            &classes,
            &BTreeMap::new(),
            &HierarchyConfig::default(),
            window(),
        )
        .unwrap();
        let overlaps = disjointness_check(&build.dictionary);
        assert_eq!(overlaps.len(), 1);
        assert_eq!(overlaps[0].shared.len(), 1);
        assert!(overlaps[0].shared.contains("p.shared.com"));

        // Related rules sharing domains are exempt.
        let hierarchy = HierarchyConfig {
            default_threshold: 0.4,
            rules: vec![
                entry("parent", RuleLevel::Manufacturer, None, &["a"], &[]),
                entry("child", RuleLevel::Product, Some("parent"), &["b"], &[]),
            ],
        };
        let build =
            derive_rules(&signatures, &classes, &BTreeMap::new(), &hierarchy, window()).unwrap();
        assert!(disjointness_check(&build.dictionary).is_empty());
    }
}
