//! Synthetic traffic generation and packet sampling, plus the crosscheck
//! experiment that measures detection delay and false positives under
//! sparse sampling.
//!
//! The generator models one device as a set of domains it talks to.
//! Sessions toward each domain arrive as a Poisson process whose hourly
//! rate follows the device's idle/active packet rates and a diurnal shape;
//! each session carries a geometric burst of packets. Sessions are merged
//! into exporter-style flow records over tumbling windows, and the sampler
//! thins each flow binomially the way 1-in-N packet sampling does.

use crate::dates::{day_start, format_ts};
use crate::detector::{
    accumulate_evidence, delay_from_evidence, evaluate, index_endpoints, resolve_hierarchy,
    EndpointIndex, StateStore,
};
use crate::dictionary::{GroundTruthEvent, IoTDictionary, Mode, RuleLevel};
use crate::config::DetectorConfig;
use crate::error::{Error, Result};
use crate::flow::{FlowRecord, Protocol};
use crate::roles::SubscriberId;
use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, Geometric, Poisson};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::IpAddr;

/// One domain a simulated device talks to, with its service endpoint and
/// mode-dependent packet rates (packets per hour).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTraffic {
    pub domain: String,
    pub ip: IpAddr,
    pub port: u16,
    pub protocol: Protocol,
    pub idle_pph: f64,
    pub active_pph: f64,
}

/// A simulated device on one subscriber line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: String,
    /// Dictionary rule this device should be detected as.
    pub rule_label: String,
    pub subscriber_addr: IpAddr,
    pub domains: Vec<DomainTraffic>,
    /// Hour-of-day rate multipliers; must average to 1 so the configured
    /// packets-per-hour stay the daily mean.
    #[serde(default = "DeviceProfile::flat_diurnal")]
    pub diurnal: [f64; 24],
    /// Mean packets per session (>= 1); also stretches session arrivals so
    /// the hourly packet budget is conserved.
    #[serde(default = "default_burst_mean")]
    pub burst_mean: f64,
}

fn default_burst_mean() -> f64 {
    1.0
}

impl DeviceProfile {
    /// A flat diurnal profile (every hour at the mean rate).
    pub fn flat_diurnal() -> [f64; 24] {
        [1.0; 24]
    }

    pub fn validate(&self) -> Result<()> {
        if self.device_id.is_empty() {
            return Err(Error::Config("profile device_id is empty".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config(format!(
                "profile {} has no domains",
                self.device_id
            )));
        }
        let mean: f64 = self.diurnal.iter().sum::<f64>() / 24.0;
        if (mean - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "profile {}: diurnal shape must average 1.0, got {mean}",
                self.device_id
            )));
        }
        if self.diurnal.iter().any(|&x| x < 0.0) {
            return Err(Error::Config(format!(
                "profile {}: negative diurnal multiplier",
                self.device_id
            )));
        }
        if !(self.burst_mean >= 1.0) {
            return Err(Error::Config(format!(
                "profile {}: burst mean must be >= 1, got {}",
                self.device_id, self.burst_mean
            )));
        }
        for d in &self.domains {
            if d.domain.is_empty() {
                return Err(Error::Config(format!(
                    "profile {}: empty domain name",
                    self.device_id
                )));
            }
            if d.idle_pph < 0.0 || d.active_pph < 0.0 {
                return Err(Error::Config(format!(
                    "profile {}: negative packet rate for {}",
                    self.device_id, d.domain
                )));
            }
        }
        Ok(())
    }
}

/// Idle/active state of the simulated devices over time. In JSON: a plain
/// mode string, or an array cycled hour by hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrafficSchedule {
    Constant(Mode),
    /// One mode per hour, cycled over the run.
    Hourly(Vec<Mode>),
}

impl TrafficSchedule {
    pub fn mode_at(&self, hour: u32) -> Mode {
        match self {
            TrafficSchedule::Constant(m) => *m,
            TrafficSchedule::Hourly(v) => v[hour as usize % v.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let TrafficSchedule::Hourly(v) = self {
            if v.is_empty() {
                return Err(Error::Config("hourly schedule is empty".into()));
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for TrafficSchedule {
    type Err = Error;

    /// `active`, `idle`, or a comma-separated hourly cycle like
    /// `idle,idle,active`.
    fn from_str(s: &str) -> Result<TrafficSchedule> {
        let parse_mode = |tok: &str| tok.trim().parse::<Mode>();
        if s.contains(',') {
            let modes: Result<Vec<Mode>> = s.split(',').map(parse_mode).collect();
            let sched = TrafficSchedule::Hourly(modes?);
            sched.validate()?;
            Ok(sched)
        } else {
            Ok(TrafficSchedule::Constant(parse_mode(s)?))
        }
    }
}

/// Stable per-(device, domain) ephemeral source port, so a device's flows
/// toward one domain keep one 5-tuple across the run. FNV-1a.
fn ephemeral_port(device_id: &str, domain: &str) -> u16 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in device_id.bytes().chain([0u8]).chain(domain.bytes()) {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    40_000 + (hash % 20_000) as u16
}

const BYTES_PER_PACKET: u64 = 500;
/// PSH|ACK: the flag pattern of an established data exchange.
const DATA_FLAGS: u8 = 0x18;

/// Default epoch for simulated runs: 2019-11-15T00:00:00Z.
pub const DEFAULT_START: i64 = 1_573_776_000;

/// Generate per-session ground truth and the unsampled flow records an
/// exporter would emit for it.
///
/// Session arrivals per domain are Poisson within each minute at rate
/// `pph(mode) * diurnal[hour] / burst_mean / 60`; each session carries
/// `1 + Geometric(1/burst_mean)` packets, so the expected packet rate is
/// the configured packets-per-hour. Sessions of one (device, domain) pair
/// falling in the same tumbling `flow_window_secs` window merge into one
/// flow record stamped with the window's first session.
pub fn generate_ground_truth(
    profiles: &[DeviceProfile],
    duration_hours: u32,
    schedule: &TrafficSchedule,
    seed: u64,
    start_timestamp: i64,
    flow_window_secs: u32,
) -> Result<(Vec<GroundTruthEvent>, Vec<FlowRecord>)> {
    if duration_hours == 0 {
        return Err(Error::Config("duration must be at least one hour".into()));
    }
    if flow_window_secs == 0 {
        return Err(Error::Config("flow window must be at least one second".into()));
    }
    schedule.validate()?;
    for p in profiles {
        p.validate()?;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let window = flow_window_secs as i64;
    let mut events: Vec<GroundTruthEvent> = Vec::new();
    // (window start, profile idx, domain idx) -> (first ts, packet sum).
    let mut merged: BTreeMap<(i64, usize, usize), (i64, u64)> = BTreeMap::new();
    for hour in 0..duration_hours {
        let mode = schedule.mode_at(hour);
        let hour_base = start_timestamp + hour as i64 * 3600;
        let shape_idx = (hour % 24) as usize;
        for (pi, profile) in profiles.iter().enumerate() {
            let burst = Geometric::new(1.0 / profile.burst_mean)
                .map_err(|e| Error::Config(format!("burst distribution: {e}")))?;
            for (di, domain) in profile.domains.iter().enumerate() {
                let pph = match mode {
                    Mode::Idle => domain.idle_pph,
                    Mode::Active => domain.active_pph,
                };
                let per_minute = pph * profile.diurnal[shape_idx] / profile.burst_mean / 60.0;
                if per_minute <= 0.0 {
                    continue;
                }
                let arrivals = Poisson::new(per_minute)
                    .map_err(|e| Error::Config(format!("arrival rate {per_minute}: {e}")))?;
                for minute in 0..60i64 {
                    let sessions = arrivals.sample(&mut rng) as u64;
                    for _ in 0..sessions {
                        let ts = hour_base + minute * 60 + rng.random_range(0..60);
                        let packets = 1 + burst.sample(&mut rng);
                        events.push(GroundTruthEvent {
                            device_id: profile.device_id.clone(),
                            timestamp: ts,
                            domain: domain.domain.clone(),
                            ip: domain.ip,
                            port: domain.port,
                            protocol: domain.protocol,
                            packets,
                            mode,
                        });
                        let key = (ts - ts.rem_euclid(window), pi, di);
                        let slot = merged.entry(key).or_insert((ts, 0));
                        slot.0 = slot.0.min(ts);
                        slot.1 += packets;
                    }
                }
            }
        }
    }
    events.sort_by(|a, b| {
        (a.timestamp, &a.device_id, &a.domain).cmp(&(b.timestamp, &b.device_id, &b.domain))
    });
    let mut flows: Vec<FlowRecord> = merged
        .into_iter()
        .map(|((_, pi, di), (first_ts, packets))| {
            let profile = &profiles[pi];
            let domain = &profile.domains[di];
            FlowRecord {
                timestamp: first_ts,
                src_addr: profile.subscriber_addr,
                dst_addr: domain.ip,
                src_port: ephemeral_port(&profile.device_id, &domain.domain),
                dst_port: domain.port,
                protocol: domain.protocol,
                packets,
                bytes: packets * BYTES_PER_PACKET,
                tcp_flags: if domain.protocol == Protocol::Tcp {
                    DATA_FLAGS
                } else {
                    0
                },
                sampling_denominator: 1,
            }
        })
        .collect();
    flows.sort_by_key(|f| {
        (
            f.timestamp,
            f.src_addr,
            f.dst_addr,
            f.src_port,
            f.dst_port,
        )
    });
    Ok((events, flows))
}

/// Packet sampling parameters: each packet survives independently with
/// probability `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub q: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Config(format!(
                "sampling probability must be in (0, 1], got {}",
                self.q
            )));
        }
        Ok(())
    }
}

/// Thin a flow stream the way 1-in-N packet sampling does: each flow keeps
/// `Binomial(packets, q)` packets, flows with no surviving packet disappear,
/// bytes scale proportionally, and the denominator records `round(1/q)`.
pub fn sample_stream(flows: &[FlowRecord], cfg: &SamplerConfig) -> Result<Vec<FlowRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let denominator = ((1.0 / cfg.q).round() as u64).max(1);
    let mut out = Vec::new();
    for flow in flows {
        let binomial = Binomial::new(flow.packets, cfg.q)
            .map_err(|e| Error::Config(format!("sampler: {e}")))?;
        let kept = binomial.sample(&mut rng);
        if kept == 0 {
            continue;
        }
        let scaled =
            ((flow.bytes as f64 * kept as f64 / flow.packets as f64).round() as u64).max(kept);
        let mut sampled = flow.clone();
        sampled.packets = kept;
        sampled.bytes = scaled;
        sampled.sampling_denominator = denominator;
        out.push(sampled);
    }
    Ok(out)
}

/// Probability that at least one of a flow's `n` packets survives sampling
/// at probability `q`: `1 - (1 - q)^n`.
pub fn visibility_probability(n: u64, q: f64) -> f64 {
    1.0 - (1.0 - q).powf(n as f64)
}

/// Parameters of the crosscheck experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Evidence-fraction grid to evaluate delays at.
    pub d_grid: Vec<f64>,
    /// Packet sampling probability.
    pub q: f64,
    pub duration_hours: u32,
    /// One generation run per seed.
    pub seeds: Vec<u64>,
    #[serde(default = "default_schedule")]
    pub schedule: TrafficSchedule,
    /// Device ids enabled in the false-positive run; devices not listed stay
    /// silent and their rules must not fire. `None` enables the first half
    /// of the profiles (sorted by device id).
    #[serde(default)]
    pub subset: Option<Vec<String>>,
    #[serde(default = "default_start")]
    pub start_timestamp: i64,
    #[serde(default = "default_flow_window")]
    pub flow_window_secs: u32,
}

fn default_schedule() -> TrafficSchedule {
    TrafficSchedule::Constant(Mode::Active)
}

fn default_start() -> i64 {
    DEFAULT_START
}

fn default_flow_window() -> u32 {
    60
}

impl Default for ExperimentSpec {
    fn default() -> ExperimentSpec {
        ExperimentSpec {
            d_grid: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            q: 0.001,
            duration_hours: 24,
            seeds: vec![1],
            schedule: TrafficSchedule::Constant(Mode::Active),
            subset: None,
            start_timestamp: DEFAULT_START,
            flow_window_secs: 60,
        }
    }
}

/// Time to detection for one rule at one threshold, in one seeded run.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayRow {
    pub rule: String,
    pub level: RuleLevel,
    pub d: f64,
    pub seed: u64,
    /// Seconds from the start of generation; `None` when the run never
    /// accumulated enough evidence.
    pub delay: Option<i64>,
}

/// A rule that fired although no enabled device explains it.
#[derive(Debug, Clone, PartialEq)]
pub struct FalsePositive {
    pub seed: u64,
    pub d: f64,
    pub rule: String,
    pub subscriber: SubscriberId,
    pub bin_start: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CrosscheckReport {
    pub delays: Vec<DelayRow>,
    pub false_positives: Vec<FalsePositive>,
}

/// Mix generation and sampling seeds apart so the two streams are
/// independent draws.
const SAMPLER_SEED_MIX: u64 = 0x5eed_0f_5a17_ab1e;

/// Run the crosscheck experiment: generate traffic for every profile, thin
/// it through the sampler, and measure detection delay per rule across the
/// threshold grid; then rerun with only a subset of the devices enabled and
/// flag any detection of a silent, unrelated rule as a false positive.
///
/// Rules of silent devices only count as false positives when their
/// monitored domains are disjoint from every enabled rule's, so legitimate
/// shared evidence (an enabled child's ancestor, overlapping platforms)
/// never inflates the count.
pub fn run_crosscheck(
    profiles: &[DeviceProfile],
    dict: &IoTDictionary,
    spec: &ExperimentSpec,
    det_cfg: &DetectorConfig,
) -> Result<CrosscheckReport> {
    if profiles.is_empty() {
        return Err(Error::EmptyInput);
    }
    for d in &spec.d_grid {
        if !(0.0..=1.0).contains(d) {
            return Err(Error::Config(format!(
                "threshold grid value out of [0, 1]: {d}"
            )));
        }
    }
    for p in profiles {
        if !dict.rules.contains_key(&p.rule_label) {
            return Err(Error::UnknownLabel(p.rule_label.clone()));
        }
    }
    let mut labels: Vec<&str> = profiles.iter().map(|p| p.rule_label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();

    let mut report = CrosscheckReport::default();
    for &seed in &spec.seeds {
        let (_, flows) = generate_ground_truth(
            profiles,
            spec.duration_hours,
            &spec.schedule,
            seed,
            spec.start_timestamp,
            spec.flow_window_secs,
        )?;
        let sampled = sample_stream(
            &flows,
            &SamplerConfig {
                q: spec.q,
                seed: seed ^ SAMPLER_SEED_MIX,
            },
        )?;
        let evidence = accumulate_evidence(&sampled, dict, det_cfg)?;
        for &label in &labels {
            let rule = &dict.rules[label];
            let n = rule.monitored_count();
            for &d in &spec.d_grid {
                let delay = match evidence.get(label) {
                    Some(ev) => delay_from_evidence(ev, n, d, spec.start_timestamp)?,
                    None => {
                        // Still validate d against this rule's domain count.
                        crate::dictionary::required_domain_count(n, d)?;
                        None
                    }
                };
                report.delays.push(DelayRow {
                    rule: label.to_string(),
                    level: rule.level,
                    d,
                    seed,
                    delay,
                });
            }
        }
        report
            .false_positives
            .extend(false_positive_run(profiles, dict, spec, det_cfg, seed)?);
    }
    Ok(report)
}

/// The subset experiment for one seed: silence part of the fleet, detect on
/// the sampled remainder, and report firings of silent unrelated rules.
fn false_positive_run(
    profiles: &[DeviceProfile],
    dict: &IoTDictionary,
    spec: &ExperimentSpec,
    det_cfg: &DetectorConfig,
    seed: u64,
) -> Result<Vec<FalsePositive>> {
    let enabled_ids: BTreeSet<String> = match &spec.subset {
        Some(ids) => ids.iter().cloned().collect(),
        None => {
            let mut ids: Vec<&str> = profiles.iter().map(|p| p.device_id.as_str()).collect();
            ids.sort_unstable();
            ids.truncate((ids.len() / 2).max(1));
            ids.into_iter().map(String::from).collect()
        }
    };
    for id in &enabled_ids {
        if !profiles.iter().any(|p| &p.device_id == id) {
            return Err(Error::Config(format!("subset names unknown device {id}")));
        }
    }
    let enabled: Vec<DeviceProfile> = profiles
        .iter()
        .filter(|p| enabled_ids.contains(&p.device_id))
        .cloned()
        .collect();
    if enabled.is_empty() || enabled.len() == profiles.len() {
        return Ok(Vec::new()); // Nothing silenced: no experiment to run.
    }
    let enabled_domains: BTreeSet<&String> = enabled
        .iter()
        .flat_map(|p| dict.rules[&p.rule_label].domains())
        .collect();
    // Silent rules eligible as false positives: no domain overlap with any
    // enabled rule, so no legitimate path to evidence.
    let eligible: BTreeSet<&str> = profiles
        .iter()
        .filter(|p| !enabled_ids.contains(&p.device_id))
        .map(|p| p.rule_label.as_str())
        .filter(|label| {
            dict.rules[*label]
                .domains()
                .all(|d| !enabled_domains.contains(d))
        })
        .collect();
    if eligible.is_empty() {
        return Ok(Vec::new());
    }
    let (_, flows) = generate_ground_truth(
        &enabled,
        spec.duration_hours,
        &spec.schedule,
        seed,
        spec.start_timestamp,
        spec.flow_window_secs,
    )?;
    let sampled = sample_stream(
        &flows,
        &SamplerConfig {
            q: spec.q,
            seed: seed ^ SAMPLER_SEED_MIX,
        },
    )?;
    // Ingest once, then sweep the threshold grid over the same state.
    let mut store = StateStore::new(det_cfg.bin);
    let mut indexes: HashMap<NaiveDate, Option<EndpointIndex>> = HashMap::new();
    for flow in &sampled {
        let date = crate::dates::date_of(flow.timestamp);
        let index = indexes
            .entry(date)
            .or_insert_with(|| index_endpoints(dict, date).ok());
        if let Some(index) = index {
            store.ingest(flow, index, det_cfg)?;
        }
    }
    let mut out = Vec::new();
    for &d in &spec.d_grid {
        let events = evaluate(&store, dict, Some(d), det_cfg.packet_threshold)?;
        let events = resolve_hierarchy(events, dict, Some(d))?;
        for ev in events {
            if eligible.contains(ev.rule.as_str()) {
                out.push(FalsePositive {
                    seed,
                    d,
                    rule: ev.rule,
                    subscriber: ev.subscriber,
                    bin_start: ev.bin_start,
                });
            }
        }
    }
    Ok(out)
}

/// `rule,level,D,seed,delay_seconds` with `NOT_DETECTED` for misses.
pub fn delays_csv(report: &CrosscheckReport) -> String {
    let mut out = String::from("rule,level,D,seed,delay_seconds\n");
    for row in &report.delays {
        let delay = row
            .delay
            .map_or_else(|| "NOT_DETECTED".to_string(), |d| d.to_string());
        out.push_str(&format!(
            "{},{},{},{},{delay}\n",
            row.rule, row.level, row.d, row.seed
        ));
    }
    out
}

/// `seed,rule,D,subscriber,bin`
pub fn false_positives_csv(report: &CrosscheckReport) -> String {
    let mut out = String::from("seed,rule,D,subscriber,bin\n");
    for fp in &report.false_positives {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fp.seed,
            fp.rule,
            fp.d,
            fp.subscriber,
            format_ts(fp.bin_start)
        ));
    }
    out
}

/// Daily mean of `1 - (1 - q)^n` over a flow stream grouped by day:
/// the expected fraction of flows that survive sampling.
pub fn expected_daily_visibility(flows: &[FlowRecord], q: f64) -> BTreeMap<i64, f64> {
    let mut sums: BTreeMap<i64, (f64, u64)> = BTreeMap::new();
    for flow in flows {
        let slot = sums.entry(day_start(flow.timestamp)).or_insert((0.0, 0));
        slot.0 += visibility_probability(flow.packets, q);
        slot.1 += 1;
    }
    sums.into_iter()
        .map(|(day, (sum, n))| (day, sum / n as f64))
        .collect()
}
