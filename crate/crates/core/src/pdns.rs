//! Passive-DNS history: indexed resolution records, CNAME closures, and the
//! per-IP exclusivity test that separates dedicated from shared hosting.
//!
//! The detection signatures are only as good as the mapping from device
//! domains to service IPs. Two hosting patterns complicate it: a vendor
//! domain that CNAMEs into cloud infrastructure the vendor controls (the IP
//! is still dedicated to that vendor), and a vendor domain that CNAMEs into a
//! CDN serving many customers (the IP proves nothing). This module tells
//! those apart from the resolution history alone: an IP is *exclusive* on a
//! day when every name resolving to it that day traces back, through CNAME
//! chains, to registrable domains of a single operator.

use crate::dates::DateRange;
use crate::error::{Error, Result};
use crate::lines;
use crate::psl::{SldKey, SuffixRules};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::net::IpAddr;
use std::path::Path;

/// Resource record types carried by the history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RrType {
    A,
    #[serde(rename = "AAAA")]
    Aaaa,
    #[serde(rename = "CNAME")]
    Cname,
}

/// Record data, already parsed according to the record type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RData {
    Addr(IpAddr),
    Name(String),
}

/// One aggregated passive-DNS record: `rrname` resolved to `rdata` on every
/// day of the inclusive `[time_first, time_last]` window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsRecord {
    pub rrname: String,
    pub rrtype: RrType,
    pub rdata: RData,
    pub time_first: NaiveDate,
    pub time_last: NaiveDate,
}

/// Wire form of a record in the JSONL exchange format.
#[derive(Serialize, Deserialize)]
struct RawDnsRecord {
    rrname: String,
    rrtype: String,
    rdata: String,
    time_first: NaiveDate,
    time_last: NaiveDate,
}

impl DnsRecord {
    pub fn parse_json(line: &str) -> Result<DnsRecord> {
        let raw: RawDnsRecord = serde_json::from_str(line)?;
        let rrname = normalize_name(&raw.rrname);
        if rrname.is_empty() {
            return Err(Error::Parse {
                field: "rrname",
                reason: "empty name".into(),
            });
        }
        if raw.time_first > raw.time_last {
            return Err(Error::Parse {
                field: "time_first",
                reason: format!("{} after time_last {}", raw.time_first, raw.time_last),
            });
        }
        let (rrtype, rdata) = match raw.rrtype.to_ascii_uppercase().as_str() {
            "A" => {
                let ip: IpAddr = parse_rdata_addr(&raw.rdata)?;
                if !ip.is_ipv4() {
                    return Err(Error::Parse {
                        field: "rdata",
                        reason: format!("`{}` is not IPv4 for an A record", raw.rdata),
                    });
                }
                (RrType::A, RData::Addr(ip))
            }
            "AAAA" => {
                let ip: IpAddr = parse_rdata_addr(&raw.rdata)?;
                if !ip.is_ipv6() {
                    return Err(Error::Parse {
                        field: "rdata",
                        reason: format!("`{}` is not IPv6 for an AAAA record", raw.rdata),
                    });
                }
                (RrType::Aaaa, RData::Addr(ip))
            }
            "CNAME" => {
                let target = normalize_name(&raw.rdata);
                if target.is_empty() {
                    return Err(Error::Parse {
                        field: "rdata",
                        reason: "empty CNAME target".into(),
                    });
                }
                (RrType::Cname, RData::Name(target))
            }
            other => {
                return Err(Error::Parse {
                    field: "rrtype",
                    reason: format!("unsupported record type `{other}`"),
                })
            }
        };
        Ok(DnsRecord {
            rrname,
            rrtype,
            rdata,
            time_first: raw.time_first,
            time_last: raw.time_last,
        })
    }

    pub fn to_json(&self) -> String {
        let rdata = match &self.rdata {
            RData::Addr(a) => a.to_string(),
            RData::Name(n) => n.clone(),
        };
        let rrtype = match self.rrtype {
            RrType::A => "A",
            RrType::Aaaa => "AAAA",
            RrType::Cname => "CNAME",
        };
        serde_json::to_string(&RawDnsRecord {
            rrname: self.rrname.clone(),
            rrtype: rrtype.to_string(),
            rdata,
            time_first: self.time_first,
            time_last: self.time_last,
        })
        .expect("plain struct serializes")
    }

    /// Whether the record was active on `day`.
    pub fn active(&self, day: NaiveDate) -> bool {
        self.time_first <= day && day <= self.time_last
    }

    fn active_in(&self, window: &DateRange) -> bool {
        window.overlaps(self.time_first, self.time_last)
    }
}

fn normalize_name(name: &str) -> String {
    name.trim().trim_end_matches('.').to_ascii_lowercase()
}

fn parse_rdata_addr(s: &str) -> Result<IpAddr> {
    s.trim().parse().map_err(|_| Error::Parse {
        field: "rdata",
        reason: format!("`{s}` is not an IP address"),
    })
}

/// Whether a name resolving to an IP identifies one operator or many.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IpExclusivity {
    /// Every resolution chain to the IP that day starts at these registrable
    /// domains (exactly one operator key when meaningful).
    ExclusiveTo(BTreeSet<SldKey>),
    /// Chains from more than one registrable domain reach the IP that day.
    Shared,
    /// No name resolved to the IP that day.
    Unobserved,
}

/// Infrastructure class of a domain over a study window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfraClass {
    /// Every IP the domain used, on every day it used it, was exclusive to
    /// the domain's operator.
    Dedicated,
    /// Some IP on some day also served another operator.
    Shared,
    /// The domain never resolved to an address in the window.
    Insufficient,
}

/// An indexed set of passive-DNS records.
#[derive(Debug, Default)]
pub struct DnsStore {
    records: Vec<DnsRecord>,
    /// A/AAAA record indexes by resolved address.
    by_addr: HashMap<IpAddr, Vec<usize>>,
    /// A/AAAA record indexes by owner name.
    addr_by_name: HashMap<String, Vec<usize>>,
    /// CNAME record indexes by owner name (forward: name -> target).
    cname_fwd: HashMap<String, Vec<usize>>,
    /// CNAME record indexes by target name (reverse: target -> name).
    cname_rev: HashMap<String, Vec<usize>>,
}

impl DnsStore {
    pub fn new(records: Vec<DnsRecord>) -> DnsStore {
        let mut store = DnsStore {
            records,
            ..DnsStore::default()
        };
        for (i, rec) in store.records.iter().enumerate() {
            match (&rec.rrtype, &rec.rdata) {
                (RrType::A | RrType::Aaaa, RData::Addr(ip)) => {
                    store.by_addr.entry(*ip).or_default().push(i);
                    store
                        .addr_by_name
                        .entry(rec.rrname.clone())
                        .or_default()
                        .push(i);
                }
                (RrType::Cname, RData::Name(target)) => {
                    store
                        .cname_fwd
                        .entry(rec.rrname.clone())
                        .or_default()
                        .push(i);
                    store.cname_rev.entry(target.clone()).or_default().push(i);
                }
                _ => unreachable!("rdata validated against rrtype at parse"),
            }
        }
        store
    }

    /// Load a JSONL file (one record per line).
    pub fn from_jsonl(path: &Path, lenient: bool) -> Result<(DnsStore, lines::Skipped)> {
        let (records, skipped) = lines::read_lines(path, None, lenient, DnsRecord::parse_json)?;
        Ok((DnsStore::new(records), skipped))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All names connected to `start` by CNAME records active in `window`,
    /// following chains in both directions (aliases of aliases, and names
    /// aliased to the same target). Includes `start`. Cycle-safe.
    pub fn cname_closure(&self, start: &str, window: &DateRange) -> BTreeSet<String> {
        let start = normalize_name(start);
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut queue: VecDeque<String> = VecDeque::new();
        seen.insert(start.clone());
        queue.push_back(start);
        while let Some(name) = queue.pop_front() {
            let visit = |idx: &usize, seen: &mut BTreeSet<String>, queue: &mut VecDeque<String>| {
                let rec = &self.records[*idx];
                if !rec.active_in(window) {
                    return;
                }
                let next = match (&rec.rdata, rec.rrname.as_str()) {
                    (RData::Name(target), owner) if owner == name => target.clone(),
                    (RData::Name(_), owner) => owner.to_string(),
                    _ => return,
                };
                if seen.insert(next.clone()) {
                    queue.push_back(next);
                }
            };
            if let Some(idxs) = self.cname_fwd.get(&name) {
                for idx in idxs {
                    visit(idx, &mut seen, &mut queue);
                }
            }
            if let Some(idxs) = self.cname_rev.get(&name) {
                for idx in idxs {
                    visit(idx, &mut seen, &mut queue);
                }
            }
        }
        seen
    }

    /// Names that had an A/AAAA record resolving to `ip` on `day`.
    pub fn names_with_address(&self, ip: IpAddr, day: NaiveDate) -> BTreeSet<&str> {
        self.by_addr
            .get(&ip)
            .into_iter()
            .flatten()
            .filter(|i| self.records[**i].active(day))
            .map(|i| self.records[*i].rrname.as_str())
            .collect()
    }

    /// Service addresses `domain` resolved to on `day`, following CNAME
    /// chains active that day.
    pub fn domain_to_service_ips(&self, domain: &str, day: NaiveDate) -> BTreeSet<IpAddr> {
        let window = DateRange { start: day, end: day };
        let names = self.cname_closure(domain, &window);
        let mut out = BTreeSet::new();
        for name in &names {
            if let Some(idxs) = self.addr_by_name.get(name) {
                for i in idxs {
                    let rec = &self.records[*i];
                    if rec.active(day) {
                        if let RData::Addr(ip) = rec.rdata {
                            out.insert(ip);
                        }
                    }
                }
            }
        }
        out
    }

    /// Chain roots of the CNAME component containing `name` on `day`: the
    /// members with no incoming CNAME from another member. A pure cycle has
    /// no such member; then every member counts as a root.
    fn chain_roots(&self, component: &BTreeSet<String>, day: NaiveDate) -> BTreeSet<String> {
        let roots: BTreeSet<String> = component
            .iter()
            .filter(|member| {
                let incoming = self
                    .cname_rev
                    .get(*member)
                    .into_iter()
                    .flatten()
                    .any(|i| {
                        let rec = &self.records[*i];
                        rec.active(day)
                            && rec.rrname != **member
                            && component.contains(&rec.rrname)
                    });
                !incoming
            })
            .cloned()
            .collect();
        if roots.is_empty() {
            component.clone()
        } else {
            roots
        }
    }

    /// Decide whether `ip` served a single operator on `day`.
    ///
    /// Every name resolving to the IP is expanded to its CNAME component;
    /// the components' chain roots are reduced to registrable domains. One
    /// distinct key means the IP was exclusive to that operator; more than
    /// one means shared; no resolving name at all means unobserved.
    pub fn ip_exclusivity(
        &self,
        ip: IpAddr,
        day: NaiveDate,
        rules: &SuffixRules,
    ) -> IpExclusivity {
        let names = self.names_with_address(ip, day);
        if names.is_empty() {
            return IpExclusivity::Unobserved;
        }
        let window = DateRange { start: day, end: day };
        let mut keys: BTreeSet<SldKey> = BTreeSet::new();
        let mut covered: BTreeSet<String> = BTreeSet::new();
        for name in names {
            if covered.contains(name) {
                continue;
            }
            let component = self.cname_closure(name, &window);
            covered.extend(component.iter().cloned());
            for root in self.chain_roots(&component, day) {
                keys.insert(rules.sld_or_self(&root));
            }
        }
        if keys.len() == 1 {
            IpExclusivity::ExclusiveTo(keys)
        } else {
            IpExclusivity::Shared
        }
    }

    /// Classify the hosting of `domain` across `days`.
    ///
    /// Days where the domain resolved to nothing are non-constraining: a
    /// signature can tolerate gaps in the history. But every address the
    /// domain did use must have been exclusive to the domain's own operator
    /// on that day for the domain to count as dedicated.
    pub fn classify_domain_infra(
        &self,
        domain: &str,
        days: &[NaiveDate],
        rules: &SuffixRules,
    ) -> InfraClass {
        let own_key = rules.sld_or_self(domain);
        let mut resolved_any = false;
        for day in days {
            for ip in self.domain_to_service_ips(domain, *day) {
                resolved_any = true;
                match self.ip_exclusivity(ip, *day, rules) {
                    IpExclusivity::Shared => return InfraClass::Shared,
                    IpExclusivity::ExclusiveTo(keys) => {
                        if !keys.contains(&own_key) {
                            return InfraClass::Shared;
                        }
                    }
                    IpExclusivity::Unobserved => {}
                }
            }
        }
        if resolved_any {
            InfraClass::Dedicated
        } else {
            InfraClass::Insufficient
        }
    }
}
