//! TLS certificate and banner scans: expanding a device domain to the full
//! set of service endpoints presenting the same certificate.
//!
//! Passive DNS misses endpoints no resolver happened to ask about. A scan
//! dataset fills the gap: when a domain can be tied to a certificate (the
//! *anchor*), every other endpoint presenting the identical certificate *and*
//! the identical service banner is the same deployment and joins the
//! domain's endpoint set. Requiring both digests keeps a re-used certificate
//! on an unrelated service (a load balancer fronting something else) from
//! dragging foreign endpoints in.

use crate::dates::DateRange;
use crate::error::{Error, Result};
use crate::lines;
use crate::psl::SuffixRules;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::net::IpAddr;
use std::path::Path;

/// One observation of a certificate + banner on an endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertRecord {
    pub ip: IpAddr,
    pub port: u16,
    /// Subject common name as presented (may be a `*.` wildcard).
    pub subject_name: String,
    /// Subject alternative names as presented.
    pub san_list: Vec<String>,
    pub cert_sha256: [u8; 32],
    /// Opaque digest of the service banner behind the certificate.
    pub banner_checksum: String,
    pub observed_date: NaiveDate,
}

#[derive(Serialize, Deserialize)]
struct RawCertRecord {
    ip: IpAddr,
    port: u16,
    subject_name: String,
    san_list: Vec<String>,
    cert_sha256: String,
    banner_checksum: String,
    observed_date: NaiveDate,
}

impl CertRecord {
    pub fn parse_json(line: &str) -> Result<CertRecord> {
        let raw: RawCertRecord = serde_json::from_str(line)?;
        let digest = hex::decode(&raw.cert_sha256).map_err(|_| Error::Parse {
            field: "cert_sha256",
            reason: format!("`{}` is not hex", raw.cert_sha256),
        })?;
        let cert_sha256: [u8; 32] = digest.try_into().map_err(|_| Error::Parse {
            field: "cert_sha256",
            reason: "digest is not 32 bytes".into(),
        })?;
        Ok(CertRecord {
            ip: raw.ip,
            port: raw.port,
            subject_name: normalize(&raw.subject_name),
            san_list: raw.san_list.iter().map(|s| normalize(s)).collect(),
            cert_sha256,
            banner_checksum: raw.banner_checksum,
            observed_date: raw.observed_date,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&RawCertRecord {
            ip: self.ip,
            port: self.port,
            subject_name: self.subject_name.clone(),
            san_list: self.san_list.clone(),
            cert_sha256: hex::encode(self.cert_sha256),
            banner_checksum: self.banner_checksum.clone(),
            observed_date: self.observed_date,
        })
        .expect("plain struct serializes")
    }

    /// Every name on the certificate (subject first, then SANs).
    fn names(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.subject_name.as_str()).chain(self.san_list.iter().map(|s| s.as_str()))
    }
}

fn normalize(name: &str) -> String {
    name.trim().trim_end_matches('.').to_ascii_lowercase()
}

/// Load a cert-scan JSONL file (one record per line).
pub fn read_certs(path: &Path, lenient: bool) -> Result<(Vec<CertRecord>, lines::Skipped)> {
    lines::read_lines(path, None, lenient, CertRecord::parse_json)
}

/// Whether a certificate name (possibly `*.`-wildcarded) covers `domain`.
///
/// A wildcard only matches one extra label, and only when its base is itself
/// at or below a registrable domain — `*.vendor.com` covers `dev.vendor.com`
/// but `*.com` covers nothing.
fn name_covers(pattern: &str, domain: &str, rules: &SuffixRules) -> bool {
    if pattern == domain {
        return true;
    }
    if let Some(base) = pattern.strip_prefix("*.") {
        if rules.sld_of(base).is_err() {
            return false; // wildcard above the registrable boundary
        }
        if let Some(label) = domain.strip_suffix(base).and_then(|p| p.strip_suffix('.')) {
            return !label.is_empty() && !label.contains('.');
        }
    }
    false
}

/// Whether `record` can anchor expansion for `domain`.
///
/// The subject or a SAN must cover the domain, and every name on the
/// certificate must stay inside the domain's registrable family — a
/// certificate listing foreign operators' names is multi-tenant
/// infrastructure and proves nothing about this domain. The family check can
/// be waived for vendors known to mix their own brands on one certificate.
pub fn cert_matches_domain(
    record: &CertRecord,
    domain: &str,
    rules: &SuffixRules,
    allow_foreign_sans: bool,
) -> bool {
    let domain = normalize(domain);
    if !record.names().any(|n| name_covers(n, &domain, rules)) {
        return false;
    }
    if allow_foreign_sans {
        return true;
    }
    let family = rules.sld_or_self(&domain);
    record.names().all(|n| {
        let bare = n.strip_prefix("*.").unwrap_or(n);
        rules.sld_or_self(bare) == family
    })
}

/// Expand from one anchoring observation to every endpoint in `dataset`
/// presenting the same certificate digest *and* the same banner checksum
/// within `window`. The anchor's own endpoint is always included.
pub fn expand_ips_by_cert(
    anchor: &CertRecord,
    domain: &str,
    dataset: &[CertRecord],
    window: &DateRange,
    rules: &SuffixRules,
    allow_foreign_sans: bool,
) -> Result<BTreeSet<(IpAddr, u16)>> {
    if !cert_matches_domain(anchor, domain, rules, allow_foreign_sans) {
        return Err(Error::NoAnchor(domain.to_string()));
    }
    let mut out: BTreeSet<(IpAddr, u16)> = BTreeSet::new();
    out.insert((anchor.ip, anchor.port));
    for rec in dataset {
        if rec.cert_sha256 == anchor.cert_sha256
            && rec.banner_checksum == anchor.banner_checksum
            && window.contains(rec.observed_date)
        {
            out.insert((rec.ip, rec.port));
        }
    }
    Ok(out)
}

/// Resolve a domain that passive DNS could not map: use every in-window
/// record matching the domain as an anchor and union the expansions.
/// `None` means the scan data has no anchor for the domain at all.
pub fn resolve_unmapped(
    domain: &str,
    dataset: &[CertRecord],
    window: &DateRange,
    rules: &SuffixRules,
    allow_foreign_sans: bool,
) -> Result<Option<BTreeSet<(IpAddr, u16)>>> {
    let mut out: BTreeSet<(IpAddr, u16)> = BTreeSet::new();
    let mut found = false;
    for rec in dataset {
        if !window.contains(rec.observed_date) {
            continue;
        }
        if cert_matches_domain(rec, domain, rules, allow_foreign_sans) {
            found = true;
            out.extend(expand_ips_by_cert(
                rec,
                domain,
                dataset,
                window,
                rules,
                allow_foreign_sans,
            )?);
        }
    }
    Ok(if found { Some(out) } else { None })
}
