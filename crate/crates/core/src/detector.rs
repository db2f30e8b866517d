//! The detector: matching sampled flows against dictionary endpoints,
//! accumulating per-subscriber evidence in time bins, and emitting detection
//! events with hierarchy resolution.
//!
//! Sparse sampling means almost every individual flow is invisible; what the
//! detector counts is *distinct monitored domains* seen per subscriber and
//! bin. A rule fires when the subscriber touched at least `max(1, floor(D·N))`
//! of the rule's `N` domains, among them at least one primary domain.

use crate::config::{DetectorConfig, VantageMode};
use crate::dates::{date_of, BinLength};
use crate::dictionary::{
    required_domain_count, DetectionRule, Endpoint, IoTDictionary, RuleLevel,
};
use crate::error::{Error, Result};
use crate::flow::{is_established_tcp_with, FlowRecord};
use crate::roles::{anonymize, anonymize_prefix, classify_endpoint, EndpointRole, PrefixId, SubscriberId};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};

/// One (rule, domain) pair watching an endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedEntry {
    pub label: String,
    pub domain: String,
    pub primary: bool,
}

/// Inverted endpoint index for a single day: service endpoint -> watchers.
#[derive(Debug)]
pub struct EndpointIndex {
    pub day: NaiveDate,
    entries: HashMap<Endpoint, Vec<IndexedEntry>>,
}

impl EndpointIndex {
    pub fn lookup(&self, endpoint: &Endpoint) -> &[IndexedEntry] {
        self.entries.get(endpoint).map_or(&[], |v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Build the inverted index of every rule's endpoints for `day`.
/// Fails when the dictionary holds no endpoints at all for that day.
pub fn index_endpoints(dict: &IoTDictionary, day: NaiveDate) -> Result<EndpointIndex> {
    let mut entries: HashMap<Endpoint, Vec<IndexedEntry>> = HashMap::new();
    for rule in dict.rules.values() {
        if let Some(by_domain) = rule.daily_endpoints.get(&day) {
            for (domain, endpoints) in by_domain {
                let primary = rule.primary_domains.contains(domain);
                for ep in endpoints {
                    entries.entry(*ep).or_default().push(IndexedEntry {
                        label: rule.label.clone(),
                        domain: domain.clone(),
                        primary,
                    });
                }
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::MissingDay(day));
    }
    Ok(EndpointIndex { day, entries })
}

/// Evidence accumulated for one rule within one (subscriber, bin) state.
#[derive(Debug, Clone, Default)]
pub struct RuleEvidence {
    /// Distinct monitored domains matched so far.
    pub matched: BTreeSet<String>,
    pub primary_seen: bool,
    /// Sampled packets over the matching flows.
    pub packets: u64,
    /// Timestamp of the first matching flow.
    pub first_match: i64,
}

/// Per-(subscriber, bin) evidence across all rules.
#[derive(Debug, Clone)]
pub struct SubscriberWindowState {
    pub subscriber: SubscriberId,
    pub bin_start: i64,
    pub evidence: BTreeMap<String, RuleEvidence>,
    /// Subscriber origin AS (annotated at exchange-point vantage).
    pub asn: Option<u32>,
}

/// All window states of a detection run, plus the subscriber -> prefix map
/// needed for prefix-level aggregation.
#[derive(Debug)]
pub struct StateStore {
    pub bin: BinLength,
    states: BTreeMap<(i64, SubscriberId), SubscriberWindowState>,
    pub prefixes: BTreeMap<SubscriberId, PrefixId>,
}

impl StateStore {
    pub fn new(bin: BinLength) -> StateStore {
        StateStore {
            bin,
            states: BTreeMap::new(),
            prefixes: BTreeMap::new(),
        }
    }

    pub fn states(&self) -> impl Iterator<Item = &SubscriberWindowState> {
        self.states.values()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Ingest one flow against the day-matching endpoint index.
    ///
    /// At exchange-point vantage, non-established TCP is dropped first (scan
    /// noise would otherwise dominate). The subscriber side is the endpoint
    /// classified into a subscriber range; the other side is looked up in the
    /// index regardless of its own classification, since device services may
    /// run on unclassified ports. Flows with no subscriber side, or two, or
    /// no matching index entry leave no state behind.
    pub fn ingest(
        &mut self,
        flow: &FlowRecord,
        index: &EndpointIndex,
        cfg: &DetectorConfig,
    ) -> Result<()> {
        if cfg.mode == VantageMode::Ixp && !is_established_tcp_with(flow, cfg.established) {
            return Ok(());
        }
        let src_role = classify_endpoint(flow.src_addr, flow.src_port, &cfg.asn_map, &cfg.roles);
        let dst_role = classify_endpoint(flow.dst_addr, flow.dst_port, &cfg.asn_map, &cfg.roles);
        use EndpointRole::Subscriber;
        let (sub_addr, srv_addr, srv_port) = match (src_role, dst_role) {
            (Subscriber, Subscriber) => return Ok(()),
            (Subscriber, _) => (flow.src_addr, flow.dst_addr, flow.dst_port),
            (_, Subscriber) => (flow.dst_addr, flow.src_addr, flow.src_port),
            _ => return Ok(()),
        };
        let key = Endpoint {
            ip: srv_addr,
            port: srv_port,
            protocol: flow.protocol,
        };
        let hits = index.lookup(&key);
        if hits.is_empty() {
            return Ok(());
        }
        let subscriber = anonymize(sub_addr, &cfg.salt)?;
        let prefix = anonymize_prefix(sub_addr, &cfg.salt, cfg.v4_prefix_len, cfg.v6_prefix_len)?;
        self.prefixes.entry(subscriber).or_insert(prefix);
        let bin_start = self.bin.floor(flow.timestamp);
        let state = self
            .states
            .entry((bin_start, subscriber))
            .or_insert_with(|| SubscriberWindowState {
                subscriber,
                bin_start,
                evidence: BTreeMap::new(),
                asn: None,
            });
        if cfg.mode == VantageMode::Ixp && state.asn.is_none() {
            state.asn = cfg.asn_map.lookup(sub_addr);
        }
        let mut packets_counted: BTreeSet<&str> = BTreeSet::new();
        for hit in hits {
            let ev = state
                .evidence
                .entry(hit.label.clone())
                .or_insert_with(|| RuleEvidence {
                    first_match: flow.timestamp,
                    ..RuleEvidence::default()
                });
            ev.matched.insert(hit.domain.clone());
            ev.primary_seen |= hit.primary;
            ev.first_match = ev.first_match.min(flow.timestamp);
            // Packets count once per rule per flow, not once per domain.
            if packets_counted.insert(hit.label.as_str()) {
                ev.packets += flow.packets;
            }
        }
        Ok(())
    }
}

/// Usage state of a detected device within its bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Usage {
    Unknown,
    Idle,
    Active,
}

/// One detection: a rule fired for a subscriber in a bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub subscriber: SubscriberId,
    pub rule: String,
    pub level: RuleLevel,
    pub bin_start: i64,
    pub bin: BinLength,
    pub matched_count: usize,
    pub required_count: usize,
    pub matched_domains: BTreeSet<String>,
    /// Seconds from bin start to the first matching flow.
    pub first_match_offset: i64,
    pub usage: Usage,
    /// No detected descendant rule in the same (subscriber, bin): this is the
    /// most specific statement the evidence supports.
    pub terminal: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub asn: Option<u32>,
}

fn usage_of(packets: u64, detected: bool, packet_threshold: u64) -> Usage {
    if !detected {
        Usage::Unknown
    } else if packets > packet_threshold {
        Usage::Active
    } else {
        Usage::Idle
    }
}

/// Usage classification for one rule in one window state, recomputing the
/// detection verdict the usage depends on.
pub fn detect_activity(
    state: &SubscriberWindowState,
    rule: &DetectionRule,
    threshold: Option<f64>,
    packet_threshold: u64,
) -> Result<Usage> {
    let ev = match state.evidence.get(&rule.label) {
        Some(ev) => ev,
        None => return Ok(Usage::Unknown),
    };
    let required = required_domain_count(
        rule.monitored_count(),
        threshold.unwrap_or(rule.default_threshold),
    )?;
    let detected = ev.primary_seen && ev.matched.len() >= required;
    Ok(usage_of(ev.packets, detected, packet_threshold))
}

/// Evaluate every window state against the dictionary.
///
/// `threshold` overrides each rule's default evidence fraction when given.
/// Events come out sorted by (bin, rule, subscriber).
pub fn evaluate(
    store: &StateStore,
    dict: &IoTDictionary,
    threshold: Option<f64>,
    packet_threshold: u64,
) -> Result<Vec<DetectionEvent>> {
    let mut out = Vec::new();
    for state in store.states() {
        for (label, ev) in &state.evidence {
            let rule = match dict.rules.get(label) {
                Some(r) => r,
                None => continue, // stale state from another dictionary
            };
            let required = required_domain_count(
                rule.monitored_count(),
                threshold.unwrap_or(rule.default_threshold),
            )?;
            if !ev.primary_seen || ev.matched.len() < required {
                continue;
            }
            out.push(DetectionEvent {
                subscriber: state.subscriber,
                rule: rule.label.clone(),
                level: rule.level,
                bin_start: state.bin_start,
                bin: store.bin,
                matched_count: ev.matched.len(),
                required_count: required,
                matched_domains: ev.matched.clone(),
                first_match_offset: ev.first_match - state.bin_start,
                usage: usage_of(ev.packets, true, packet_threshold),
                terminal: true, // resolved against the hierarchy later
                asn: state.asn,
            });
        }
    }
    sort_events(&mut out);
    Ok(out)
}

/// Close the event set under the rule hierarchy.
///
/// A detected product implies its manufacturer and platform even when their
/// own thresholds were not independently met — the ancestors are added
/// unconditionally, carrying the evidence that is theirs (the child's matched
/// domains intersected with their domain sets, extended by their own direct
/// evidence if they fired themselves). Terminal flags then mark the most
/// specific detection per (subscriber, bin) chain.
pub fn resolve_hierarchy(
    events: Vec<DetectionEvent>,
    dict: &IoTDictionary,
    threshold: Option<f64>,
) -> Result<Vec<DetectionEvent>> {
    // Group by (bin_start, subscriber).
    let mut groups: BTreeMap<(i64, SubscriberId), BTreeMap<String, DetectionEvent>> =
        BTreeMap::new();
    for ev in events {
        groups
            .entry((ev.bin_start, ev.subscriber))
            .or_default()
            .insert(ev.rule.clone(), ev);
    }
    let mut out = Vec::new();
    for ((bin_start, subscriber), mut by_rule) in groups {
        let direct: Vec<String> = by_rule.keys().cloned().collect();
        for label in &direct {
            let child = by_rule[label].clone();
            for anc in dict.ancestors(label) {
                let inherited: BTreeSet<String> = child
                    .matched_domains
                    .iter()
                    .filter(|d| anc.contains_domain(d))
                    .cloned()
                    .collect();
                match by_rule.get_mut(&anc.label) {
                    Some(existing) => {
                        existing.matched_domains.extend(inherited);
                        existing.matched_count = existing.matched_domains.len();
                        existing.usage = existing.usage.max(child.usage);
                        existing.first_match_offset =
                            existing.first_match_offset.min(child.first_match_offset);
                    }
                    None => {
                        let required = required_domain_count(
                            anc.monitored_count(),
                            threshold.unwrap_or(anc.default_threshold),
                        )?;
                        by_rule.insert(
                            anc.label.clone(),
                            DetectionEvent {
                                subscriber,
                                rule: anc.label.clone(),
                                level: anc.level,
                                bin_start,
                                bin: child.bin,
                                matched_count: inherited.len(),
                                required_count: required,
                                matched_domains: inherited,
                                first_match_offset: child.first_match_offset,
                                usage: child.usage,
                                terminal: false,
                                asn: child.asn,
                            },
                        );
                    }
                }
            }
        }
        // Terminal = no detected strict descendant in the same group.
        let labels: Vec<String> = by_rule.keys().cloned().collect();
        for label in &labels {
            let has_descendant = labels
                .iter()
                .any(|other| other != label && dict.is_ancestor(label, other));
            by_rule.get_mut(label).unwrap().terminal = !has_descendant;
        }
        out.extend(by_rule.into_values());
    }
    sort_events(&mut out);
    Ok(out)
}

fn sort_events(events: &mut [DetectionEvent]) {
    events.sort_by(|a, b| {
        (a.bin_start, &a.rule, a.subscriber).cmp(&(b.bin_start, &b.rule, b.subscriber))
    });
}

/// Result of a full detection run.
#[derive(Debug)]
pub struct DetectionRun {
    pub store: StateStore,
    pub events: Vec<DetectionEvent>,
    /// Flows falling on days the dictionary has no endpoints for.
    pub flows_without_day: u64,
}

/// Ingest a flow stream, evaluate, and resolve the hierarchy in one call.
///
/// Flows on days the dictionary does not cover are counted and skipped — a
/// dictionary legitimately covers a subset of a capture.
pub fn run_detection<'a>(
    flows: impl IntoIterator<Item = &'a FlowRecord>,
    dict: &IoTDictionary,
    cfg: &DetectorConfig,
) -> Result<DetectionRun> {
    let mut store = StateStore::new(cfg.bin);
    let mut indexes: HashMap<NaiveDate, Option<EndpointIndex>> = HashMap::new();
    let mut flows_without_day = 0u64;
    for flow in flows {
        let day = date_of(flow.timestamp);
        let index = indexes.entry(day).or_insert_with(|| {
            match index_endpoints(dict, day) {
                Ok(ix) => Some(ix),
                Err(Error::MissingDay(_)) => None,
                // Index construction has no other failure mode today.
                Err(_) => None,
            }
        });
        match index {
            Some(ix) => store.ingest(flow, ix, cfg)?,
            None => flows_without_day += 1,
        }
    }
    let events = evaluate(&store, dict, cfg.threshold, cfg.packet_threshold)?;
    let events = resolve_hierarchy(events, dict, cfg.threshold)?;
    Ok(DetectionRun {
        store,
        events,
        flows_without_day,
    })
}

/// Cumulative first-sighting evidence for one rule over a whole stream.
#[derive(Debug, Clone, Default)]
pub struct CumulativeEvidence {
    /// domain -> timestamp of its first matching flow.
    pub domain_first: BTreeMap<String, i64>,
    /// Timestamp of the first primary-domain match.
    pub primary_first: Option<i64>,
}

/// Accumulate cumulative evidence per rule over a time-ordered replay of
/// `flows`, ignoring bin boundaries (detection-delay semantics: evidence
/// never expires). Subscriber sides are required but not distinguished — a
/// delay experiment replays one line's traffic.
pub fn accumulate_evidence(
    flows: &[FlowRecord],
    dict: &IoTDictionary,
    cfg: &DetectorConfig,
) -> Result<BTreeMap<String, CumulativeEvidence>> {
    let mut order: Vec<&FlowRecord> = flows.iter().collect();
    order.sort_by_key(|f| f.timestamp);
    let mut indexes: HashMap<NaiveDate, Option<EndpointIndex>> = HashMap::new();
    let mut out: BTreeMap<String, CumulativeEvidence> = BTreeMap::new();
    for flow in order {
        if cfg.mode == VantageMode::Ixp && !is_established_tcp_with(flow, cfg.established) {
            continue;
        }
        let src_role = classify_endpoint(flow.src_addr, flow.src_port, &cfg.asn_map, &cfg.roles);
        let dst_role = classify_endpoint(flow.dst_addr, flow.dst_port, &cfg.asn_map, &cfg.roles);
        use EndpointRole::Subscriber;
        let (srv_addr, srv_port) = match (src_role, dst_role) {
            (Subscriber, Subscriber) => continue,
            (Subscriber, _) => (flow.dst_addr, flow.dst_port),
            (_, Subscriber) => (flow.src_addr, flow.src_port),
            _ => continue,
        };
        let day = date_of(flow.timestamp);
        let index = indexes
            .entry(day)
            .or_insert_with(|| index_endpoints(dict, day).ok());
        let index = match index {
            Some(ix) => ix,
            None => continue,
        };
        let key = Endpoint {
            ip: srv_addr,
            port: srv_port,
            protocol: flow.protocol,
        };
        for hit in index.lookup(&key) {
            let ev = out.entry(hit.label.clone()).or_default();
            ev.domain_first
                .entry(hit.domain.clone())
                .or_insert(flow.timestamp);
            if hit.primary && ev.primary_first.is_none() {
                ev.primary_first = Some(flow.timestamp);
            }
        }
    }
    Ok(out)
}

/// Earliest detection time implied by cumulative evidence for a rule with
/// `n` monitored domains at evidence fraction `d`, as seconds after `origin`.
pub fn delay_from_evidence(
    evidence: &CumulativeEvidence,
    n: usize,
    d: f64,
    origin: i64,
) -> Result<Option<i64>> {
    let required = required_domain_count(n, d)?;
    let primary_ts = match evidence.primary_first {
        Some(ts) => ts,
        None => return Ok(None),
    };
    if evidence.domain_first.len() < required {
        return Ok(None);
    }
    let mut firsts: Vec<i64> = evidence.domain_first.values().copied().collect();
    firsts.sort_unstable();
    let kth = firsts[required - 1];
    Ok(Some(kth.max(primary_ts) - origin))
}

/// Time from `origin` (default: the stream's first flow) until `rule_label`
/// would fire on a cumulative replay of `flows`. `Ok(None)` means the stream
/// never satisfies the rule.
pub fn detection_delay(
    flows: &[FlowRecord],
    dict: &IoTDictionary,
    rule_label: &str,
    threshold: Option<f64>,
    cfg: &DetectorConfig,
    origin: Option<i64>,
) -> Result<Option<i64>> {
    let rule = dict
        .rules
        .get(rule_label)
        .ok_or_else(|| Error::UnknownLabel(rule_label.to_string()))?;
    if flows.is_empty() {
        return Ok(None);
    }
    let origin = origin.unwrap_or_else(|| flows.iter().map(|f| f.timestamp).min().unwrap());
    let evidence = accumulate_evidence(flows, dict, cfg)?;
    match evidence.get(rule_label) {
        Some(ev) => delay_from_evidence(
            ev,
            rule.monitored_count(),
            threshold.unwrap_or(rule.default_threshold),
            origin,
        ),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dates::DateRange;
    use crate::dictionary::{DailyEndpoints, DomainClass, HierarchyConfig, HierarchyEntry};
    use std::collections::BTreeSet;
    use std::net::IpAddr;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn ep(ip: &str, port: u16) -> Endpoint {
        Endpoint {
            ip: ip.parse().unwrap(),
            port,
            protocol: crate::flow::Protocol::Tcp,
        }
    }

    /// Dictionary with one product chain (platform -> manufacturer -> product)
    /// and one flat rule, with endpoints on 2019-11-15.
    ///
    /// voice: {voice.platform.com}                                    N=1
    /// maker: voice + {p1.maker.com, p2.maker.com, s1.maker.com}      N=4
    /// box:   maker + {p1.box.com}                                    N=5
    /// lone:  {p1.lone.com, p2.lone.com}                              N=2
    fn fixture_dict() -> IoTDictionary {
        use DomainClass::*;
        let classes: BTreeMap<String, DomainClass> = [
            ("voice.platform.com", Primary),
            ("p1.maker.com", Primary),
            ("p2.maker.com", Primary),
            ("s1.maker.com", Support),
            ("p1.box.com", Primary),
            ("p1.lone.com", Primary),
            ("p2.lone.com", Primary),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
        let signatures: BTreeMap<String, BTreeSet<String>> = [
            (
                "maker-dev",
                vec!["p1.maker.com", "p2.maker.com", "s1.maker.com"],
            ),
            (
                "box-dev",
                vec!["p1.maker.com", "p2.maker.com", "s1.maker.com", "p1.box.com"],
            ),
            ("lone", vec!["p1.lone.com", "p2.lone.com"]),
        ]
        .into_iter()
        .map(|(k, v)| {
            (
                k.to_string(),
                v.into_iter().map(|s| s.to_string()).collect(),
            )
        })
        .collect();
        let hierarchy = HierarchyConfig {
            default_threshold: 0.4,
            rules: vec![
                HierarchyEntry {
                    label: "voice".into(),
                    level: RuleLevel::Platform,
                    parent: None,
                    devices: vec![],
                    specialization_domains: vec!["voice.platform.com".into()],
                    inherit: true,
                },
                HierarchyEntry {
                    label: "maker".into(),
                    level: RuleLevel::Manufacturer,
                    parent: Some("voice".into()),
                    devices: vec!["maker-dev".into()],
                    specialization_domains: vec![],
                    inherit: true,
                },
                HierarchyEntry {
                    label: "box".into(),
                    level: RuleLevel::Product,
                    parent: Some("maker".into()),
                    devices: vec!["box-dev".into()],
                    specialization_domains: vec![],
                    inherit: true,
                },
            ],
        };
        let mut daily: DailyEndpoints = BTreeMap::new();
        let day = d("2019-11-15");
        let eps = [
            ("voice.platform.com", ep("198.18.0.1", 443)),
            ("p1.maker.com", ep("198.18.0.2", 443)),
            ("p2.maker.com", ep("198.18.0.3", 443)),
            ("s1.maker.com", ep("198.18.0.4", 443)),
            ("p1.box.com", ep("198.18.0.5", 8883)),
            ("p1.lone.com", ep("198.18.0.6", 443)),
            ("p2.lone.com", ep("198.18.0.7", 443)),
        ];
        for (dom, e) in eps {
            daily
                .entry(day)
                .or_default()
                .insert(dom.to_string(), [e].into());
        }
        let window = DateRange::new(day, d("2019-11-16")).unwrap();
        crate::dictionary::derive_rules(&signatures, &classes, &daily, &hierarchy, window)
            .unwrap()
            .dictionary
    }

    fn test_cfg() -> DetectorConfig {
        let mut cfg = DetectorConfig::from_toml_str(
            r#"
            subscriber_ranges = ["100.64.0.0/10"]
            [[asn]]
            prefix = "100.64.0.0/10"
            asn = 65000
            "#,
        )
        .unwrap();
        cfg.salt = b"test-salt".to_vec();
        cfg
    }

    fn flow(ts: i64, src: &str, dst: &str, dport: u16, packets: u64) -> FlowRecord {
        FlowRecord {
            timestamp: ts,
            src_addr: src.parse::<IpAddr>().unwrap(),
            dst_addr: dst.parse::<IpAddr>().unwrap(),
            src_port: 49152,
            dst_port: dport,
            protocol: crate::flow::Protocol::Tcp,
            packets,
            bytes: packets * 500,
            tcp_flags: 0x18,
            sampling_denominator: 1000,
        }
    }

    const T0: i64 = 1_573_776_000; // 2019-11-15T00:00:00Z
    const SUB: &str = "100.64.3.7";

    #[test]
    fn index_covers_all_rules_and_flags_missing_days() {
        let dict = fixture_dict();
        let ix = index_endpoints(&dict, d("2019-11-15")).unwrap();
        assert_eq!(ix.len(), 7);
        // p1.maker.com is watched by maker and box (inherited).
        let hits = ix.lookup(&ep("198.18.0.2", 443));
        let labels: BTreeSet<&str> = hits.iter().map(|h| h.label.as_str()).collect();
        assert_eq!(labels, ["box", "maker"].into());
        assert!(hits.iter().all(|h| h.primary));
        assert!(matches!(
            index_endpoints(&dict, d("2019-11-20")),
            Err(Error::MissingDay(_))
        ));
    }

    #[test]
    fn detection_needs_required_count_and_primary() {
        let dict = fixture_dict();
        let cfg = test_cfg();
        let ix = index_endpoints(&dict, d("2019-11-15")).unwrap();
        // lone: N=2, D=0.4 -> required 1. One primary contact fires.
        let mut store = StateStore::new(BinLength::Hour);
        store
            .ingest(&flow(T0 + 10, SUB, "198.18.0.6", 443, 3), &ix, &cfg)
            .unwrap();
        let events = evaluate(&store, &dict, None, 10).unwrap();
        assert_eq!(events.len(), 1);
        let ev = &events[0];
        assert_eq!(ev.rule, "lone");
        assert_eq!(ev.matched_count, 1);
        assert_eq!(ev.required_count, 1);
        assert_eq!(ev.first_match_offset, 10);
        assert_eq!(ev.usage, Usage::Idle); // 3 packets <= 10

        // maker: N=4, D=0.4 -> required 1, but a support-only match must not
        // fire (no primary domain seen).
        let mut store = StateStore::new(BinLength::Hour);
        store
            .ingest(&flow(T0, SUB, "198.18.0.4", 443, 3), &ix, &cfg)
            .unwrap();
        let events = evaluate(&store, &dict, None, 10).unwrap();
        assert!(events.iter().all(|e| e.rule != "maker"));

        // At D=0.6, maker needs floor(2.4)=2 domains.
        let mut store = StateStore::new(BinLength::Hour);
        store
            .ingest(&flow(T0, SUB, "198.18.0.2", 443, 3), &ix, &cfg)
            .unwrap();
        let only_one = evaluate(&store, &dict, Some(0.6), 10).unwrap();
        assert!(only_one.iter().all(|e| e.rule != "maker"));
        store
            .ingest(&flow(T0 + 60, SUB, "198.18.0.3", 443, 3), &ix, &cfg)
            .unwrap();
        let two = evaluate(&store, &dict, Some(0.6), 10).unwrap();
        assert!(two.iter().any(|e| e.rule == "maker" && e.matched_count == 2));
    }

    #[test]
    fn repeat_contacts_do_not_double_count_domains() {
        let dict = fixture_dict();
        let cfg = test_cfg();
        let ix = index_endpoints(&dict, d("2019-11-15")).unwrap();
        let mut store = StateStore::new(BinLength::Hour);
        for i in 0..5 {
            store
                .ingest(&flow(T0 + i * 7, SUB, "198.18.0.6", 443, 3), &ix, &cfg)
                .unwrap();
        }
        let events = evaluate(&store, &dict, None, 10).unwrap();
        let ev = events.iter().find(|e| e.rule == "lone").unwrap();
        assert_eq!(ev.matched_count, 1);
        // But packets accumulate: 5 * 3 = 15 > 10 -> active.
        assert_eq!(ev.usage, Usage::Active);
        assert_eq!(ev.first_match_offset, 0);
    }

    #[test]
    fn bins_partition_evidence() {
        let dict = fixture_dict();
        let cfg = test_cfg();
        let ix = index_endpoints(&dict, d("2019-11-15")).unwrap();
        let mut store = StateStore::new(BinLength::Hour);
        // Two contacts in different hours: evidence must not pool across bins.
        store
            .ingest(&flow(T0 + 100, SUB, "198.18.0.2", 443, 1), &ix, &cfg)
            .unwrap();
        store
            .ingest(&flow(T0 + 3700, SUB, "198.18.0.3", 443, 1), &ix, &cfg)
            .unwrap();
        let events = evaluate(&store, &dict, Some(0.6), 10).unwrap();
        assert!(events.iter().all(|e| e.rule != "maker"));
        // Same two contacts under day bins pool together.
        let mut store = StateStore::new(BinLength::Day);
        store
            .ingest(&flow(T0 + 100, SUB, "198.18.0.2", 443, 1), &ix, &cfg)
            .unwrap();
        store
            .ingest(&flow(T0 + 3700, SUB, "198.18.0.3", 443, 1), &ix, &cfg)
            .unwrap();
        let events = evaluate(&store, &dict, Some(0.6), 10).unwrap();
        assert!(events.iter().any(|e| e.rule == "maker"));
    }

    #[test]
    fn orientation_and_role_rules() {
        let dict = fixture_dict();
        let cfg = test_cfg();
        let ix = index_endpoints(&dict, d("2019-11-15")).unwrap();
        let mut store = StateStore::new(BinLength::Hour);
        // Reversed direction (server -> subscriber) still attributes to the
        // subscriber side.
        let mut f = flow(T0, "198.18.0.6", SUB, 49152, 2);
        f.src_port = 443;
        store.ingest(&f, &ix, &cfg).unwrap();
        assert_eq!(store.len(), 1);
        // No subscriber side: ignored.
        store
            .ingest(&flow(T0, "192.0.2.1", "198.18.0.6", 443, 2), &ix, &cfg)
            .unwrap();
        assert_eq!(store.len(), 1);
        // Unmonitored endpoint: no state.
        store
            .ingest(&flow(T0, SUB, "198.18.9.9", 443, 2), &ix, &cfg)
            .unwrap();
        assert_eq!(store.len(), 1);
        // Port must match the endpoint (box endpoint is 8883).
        store
            .ingest(&flow(T0, SUB, "198.18.0.5", 443, 2), &ix, &cfg)
            .unwrap();
        let events = evaluate(&store, &dict, None, 10).unwrap();
        assert!(events.iter().all(|e| e.rule != "box"));
        // Non-well-known port still matches via the index. One domain out of
        // box's five satisfies a 0.2 evidence fraction.
        store
            .ingest(&flow(T0, SUB, "198.18.0.5", 8883, 2), &ix, &cfg)
            .unwrap();
        let events = evaluate(&store, &dict, Some(0.2), 10).unwrap();
        assert!(events.iter().any(|e| e.rule == "box"));
    }

    #[test]
    fn ixp_mode_filters_syn_only_and_annotates_asn() {
        let dict = fixture_dict();
        let mut cfg = test_cfg();
        cfg.mode = VantageMode::Ixp;
        let ix = index_endpoints(&dict, d("2019-11-15")).unwrap();
        let mut store = StateStore::new(BinLength::Hour);
        // SYN-only scan: dropped at exchange-point vantage.
        let mut syn = flow(T0, SUB, "198.18.0.6", 443, 1);
        syn.tcp_flags = crate::flow::FLAG_SYN;
        store.ingest(&syn, &ix, &cfg).unwrap();
        assert!(store.is_empty());
        // Established flow passes and carries the subscriber's AS.
        store
            .ingest(&flow(T0, SUB, "198.18.0.6", 443, 2), &ix, &cfg)
            .unwrap();
        let state = store.states().next().unwrap();
        assert_eq!(state.asn, Some(65000));
        let events = evaluate(&store, &dict, None, 10).unwrap();
        assert_eq!(events[0].asn, Some(65000));
        // Same SYN flow is accepted at ISP vantage.
        let cfg_isp = test_cfg();
        let mut store = StateStore::new(BinLength::Hour);
        store.ingest(&syn, &ix, &cfg_isp).unwrap();
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn hierarchy_closure_adds_ancestors_and_marks_terminal() {
        let dict = fixture_dict();
        let cfg = test_cfg();
        let ix = index_endpoints(&dict, d("2019-11-15")).unwrap();
        let mut store = StateStore::new(BinLength::Hour);
        // Hit two maker primaries + the box primary: box fires at D=0.4
        // (N=5 -> required 2).
        store
            .ingest(&flow(T0, SUB, "198.18.0.2", 443, 20), &ix, &cfg)
            .unwrap();
        store
            .ingest(&flow(T0 + 5, SUB, "198.18.0.3", 443, 20), &ix, &cfg)
            .unwrap();
        store
            .ingest(&flow(T0 + 9, SUB, "198.18.0.5", 8883, 20), &ix, &cfg)
            .unwrap();
        let events = evaluate(&store, &dict, None, 10).unwrap();
        let resolved = resolve_hierarchy(events, &dict, None).unwrap();
        let rules: Vec<&str> = resolved.iter().map(|e| e.rule.as_str()).collect();
        // voice never matched directly (its endpoint was not contacted), but
        // the box detection implies maker and voice.
        assert_eq!(rules, vec!["box", "maker", "voice"]);
        let by_rule: BTreeMap<&str, &DetectionEvent> =
            resolved.iter().map(|e| (e.rule.as_str(), e)).collect();
        assert!(by_rule["box"].terminal);
        assert!(!by_rule["maker"].terminal);
        assert!(!by_rule["voice"].terminal);
        // The implied platform has no matched domains of its own evidence.
        assert_eq!(by_rule["voice"].matched_count, 0);
        assert_eq!(by_rule["voice"].usage, by_rule["box"].usage);
        // Implied ancestors inherit the child's evidence restricted to their
        // domain set: maker gets the two maker primaries, not p1.box.com.
        assert_eq!(by_rule["maker"].matched_count, 2);
        assert!(by_rule["maker"].matched_domains.contains("p1.maker.com"));
        assert!(!by_rule["maker"].matched_domains.contains("p1.box.com"));
    }

    #[test]
    fn run_detection_end_to_end_with_uncovered_days() {
        let dict = fixture_dict();
        let cfg = test_cfg();
        let flows = vec![
            flow(T0 + 3, SUB, "198.18.0.6", 443, 2),
            // A day the dictionary has no endpoints for.
            flow(T0 + 10 * 86_400, SUB, "198.18.0.6", 443, 2),
        ];
        let run = run_detection(&flows, &dict, &cfg).unwrap();
        assert_eq!(run.flows_without_day, 1);
        assert_eq!(run.events.len(), 1);
        assert_eq!(run.events[0].rule, "lone");
        assert!(run.store.prefixes.len() == 1);
    }

    #[test]
    fn empty_salt_fails_ingest() {
        let dict = fixture_dict();
        let mut cfg = test_cfg();
        cfg.salt.clear();
        let flows = vec![flow(T0, SUB, "198.18.0.6", 443, 2)];
        let err = run_detection(&flows, &dict, &cfg).unwrap_err();
        assert!(matches!(err, Error::EmptySalt));
    }

    #[test]
    fn delay_is_time_to_kth_domain_with_primary() {
        let dict = fixture_dict();
        let cfg = test_cfg();
        // maker at D=0.6 needs 2 of its 4 domains plus a primary.
        let flows = vec![
            flow(T0, SUB, "198.18.0.9", 443, 1),          // noise
            flow(T0 + 30, SUB, "198.18.0.4", 443, 1),     // support s1.maker.com
            flow(T0 + 90, SUB, "198.18.0.2", 443, 1),     // primary p1 -> 2 domains+primary
            flow(T0 + 500, SUB, "198.18.0.3", 443, 1),    // more evidence, irrelevant
        ];
        let delay = detection_delay(&flows, &dict, "maker", Some(0.6), &cfg, None)
            .unwrap()
            .unwrap();
        assert_eq!(delay, 90);
        // With an explicit origin.
        let delay = detection_delay(&flows, &dict, "maker", Some(0.6), &cfg, Some(T0 - 100))
            .unwrap()
            .unwrap();
        assert_eq!(delay, 190);
        // Primary-gate: support evidence alone never detects, regardless of D.
        let support_only = vec![flow(T0 + 5, SUB, "198.18.0.4", 443, 1)];
        assert!(detection_delay(&support_only, &dict, "maker", Some(0.1), &cfg, None)
            .unwrap()
            .is_none());
        // Unknown rule is an error.
        assert!(matches!(
            detection_delay(&flows, &dict, "ghost", None, &cfg, None),
            Err(Error::UnknownLabel(_))
        ));
        // Delay ignores bin boundaries: spread the evidence over two hours.
        let spread = vec![
            flow(T0 + 100, SUB, "198.18.0.2", 443, 1),
            flow(T0 + 4000, SUB, "198.18.0.3", 443, 1),
        ];
        let delay = detection_delay(&spread, &dict, "maker", Some(0.6), &cfg, None)
            .unwrap()
            .unwrap();
        assert_eq!(delay, 3900);
    }

    /// Literal replay oracle for the analytic delay computation: walk the
    /// sorted stream, re-checking the rule after every flow.
    fn replay_delay_oracle(
        flows: &[FlowRecord],
        dict: &IoTDictionary,
        label: &str,
        d: f64,
        cfg: &DetectorConfig,
        origin: i64,
    ) -> Option<i64> {
        let rule = &dict.rules[label];
        let required = required_domain_count(rule.monitored_count(), d).unwrap();
        let mut sorted: Vec<&FlowRecord> = flows.iter().collect();
        sorted.sort_by_key(|f| f.timestamp);
        let mut matched: BTreeSet<String> = BTreeSet::new();
        let mut primary = false;
        for f in sorted {
            let prefix = std::slice::from_ref(f);
            let ev = accumulate_evidence(prefix, dict, cfg).unwrap();
            if let Some(e) = ev.get(label) {
                for dom in e.domain_first.keys() {
                    matched.insert(dom.clone());
                    if rule.primary_domains.contains(dom) {
                        primary = true;
                    }
                }
            }
            if primary && matched.len() >= required {
                return Some(f.timestamp - origin);
            }
        }
        None
    }

    #[test]
    fn analytic_delay_matches_replay_oracle_on_random_streams() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let dict = fixture_dict();
        let cfg = test_cfg();
        let endpoints = [
            ("198.18.0.1", 443u16),
            ("198.18.0.2", 443),
            ("198.18.0.3", 443),
            ("198.18.0.4", 443),
            ("198.18.0.5", 8883),
            ("198.18.0.6", 443),
            ("198.18.0.7", 443),
            ("198.18.0.99", 443), // noise
        ];
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(0..25);
            let flows: Vec<FlowRecord> = (0..n)
                .map(|_| {
                    let (dst, port) = endpoints[rng.random_range(0..endpoints.len())];
                    flow(T0 + rng.random_range(0..7200), SUB, dst, port, 1)
                })
                .collect();
            for label in ["voice", "maker", "box", "lone"] {
                for d_frac in [0.2, 0.4, 0.6, 1.0] {
                    let got = detection_delay(&flows, &dict, label, Some(d_frac), &cfg, Some(T0))
                        .unwrap();
                    let want = if flows.is_empty() {
                        None
                    } else {
                        replay_delay_oracle(&flows, &dict, label, d_frac, &cfg, T0)
                    };
                    assert_eq!(got, want, "label={label} d={d_frac} flows={}", flows.len());
                }
            }
        }
    }
}
