//! Endpoint role classification and subscriber anonymization.
//!
//! A flow has two endpoints; detection needs to know which side is the
//! subscriber line and which is a service endpoint. Classification is purely
//! positional: well-known service ports and cloud/CDN origin ASes mark the
//! server side, configured address ranges mark the subscriber side, and
//! anything else stays unknown. Subscriber addresses never leave the process
//! un-hashed — they are replaced by a keyed digest at ingest time.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;

/// Which side of a flow an endpoint is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointRole {
    Subscriber,
    Server,
    Unknown,
}

/// An IP network in CIDR notation, IPv4 or IPv6.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cidr {
    base: IpAddr,
    prefix_len: u8,
}

impl Cidr {
    pub fn new(addr: IpAddr, prefix_len: u8) -> Result<Self> {
        let max = match addr {
            IpAddr::V4(_) => 32,
            IpAddr::V6(_) => 128,
        };
        if prefix_len > max {
            return Err(Error::Config(format!(
                "prefix length /{prefix_len} too long for {addr}"
            )));
        }
        Ok(Cidr {
            base: mask_addr(addr, prefix_len),
            prefix_len,
        })
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix_len
    }

    pub fn contains(&self, addr: IpAddr) -> bool {
        match (self.base, addr) {
            (IpAddr::V4(_), IpAddr::V4(_)) | (IpAddr::V6(_), IpAddr::V6(_)) => {
                mask_addr(addr, self.prefix_len) == self.base
            }
            _ => false,
        }
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.base, self.prefix_len)
    }
}

impl FromStr for Cidr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (addr, len) = s.split_once('/').ok_or_else(|| {
            Error::Config(format!("`{s}` is not CIDR notation (missing `/len`)"))
        })?;
        let addr: IpAddr = addr
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("`{addr}` is not an IP address")))?;
        let len: u8 = len
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("`{len}` is not a prefix length")))?;
        Cidr::new(addr, len)
    }
}

/// Zero out the host bits of `addr` below `prefix_len`.
fn mask_addr(addr: IpAddr, prefix_len: u8) -> IpAddr {
    match addr {
        IpAddr::V4(v4) => {
            let bits = u32::from(v4);
            let mask = if prefix_len == 0 {
                0
            } else {
                u32::MAX << (32 - prefix_len as u32)
            };
            IpAddr::from((bits & mask).to_be_bytes())
        }
        IpAddr::V6(v6) => {
            let bits = u128::from(v6);
            let mask = if prefix_len == 0 {
                0
            } else {
                u128::MAX << (128 - prefix_len as u32)
            };
            IpAddr::from((bits & mask).to_be_bytes())
        }
    }
}

/// Longest-prefix-match table from address prefixes to origin AS numbers.
#[derive(Debug, Clone, Default)]
pub struct AsnMap {
    entries: Vec<(Cidr, u32)>,
}

impl AsnMap {
    pub fn new(entries: Vec<(Cidr, u32)>) -> Self {
        let mut entries = entries;
        // Longest prefix first so lookup can take the first hit.
        entries.sort_by(|a, b| b.0.prefix_len().cmp(&a.0.prefix_len()));
        AsnMap { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, addr: IpAddr) -> Option<u32> {
        self.entries
            .iter()
            .find(|(cidr, _)| cidr.contains(addr))
            .map(|(_, asn)| *asn)
    }
}

/// Which side of a flow counts as the service side, and where subscribers live.
#[derive(Debug, Clone)]
pub struct RoleConfig {
    /// Destination/source ports that mark the server side of a flow.
    pub server_ports: BTreeSet<u16>,
    /// Origin ASes (cloud, CDN) whose addresses are always service endpoints.
    pub server_asns: BTreeSet<u32>,
    /// Address ranges assigned to subscriber lines.
    pub subscriber_ranges: Vec<Cidr>,
}

/// Ports that mark a service endpoint out of the box: web (80, 443, 8080),
/// NTP (123) and DNS (53).
pub const DEFAULT_SERVER_PORTS: [u16; 5] = [80, 443, 8080, 123, 53];

impl Default for RoleConfig {
    fn default() -> Self {
        RoleConfig {
            server_ports: DEFAULT_SERVER_PORTS.into_iter().collect(),
            server_asns: BTreeSet::new(),
            subscriber_ranges: Vec::new(),
        }
    }
}

/// Classify one endpoint of a flow.
///
/// Server evidence (well-known port, or an address from a configured service
/// AS) takes precedence over subscriber ranges, so a subscriber talking *to*
/// port 443 inside a misconfigured overlap still resolves to Server.
pub fn classify_endpoint(
    addr: IpAddr,
    port: u16,
    asn_map: &AsnMap,
    cfg: &RoleConfig,
) -> EndpointRole {
    if cfg.server_ports.contains(&port) {
        return EndpointRole::Server;
    }
    if let Some(asn) = asn_map.lookup(addr) {
        if cfg.server_asns.contains(&asn) {
            return EndpointRole::Server;
        }
    }
    if cfg.subscriber_ranges.iter().any(|c| c.contains(addr)) {
        return EndpointRole::Subscriber;
    }
    EndpointRole::Unknown
}

/// A subscriber line identifier: a 128-bit keyed digest of the address.
///
/// The digest is the truncated SHA-256 of `salt || tag || address bytes`, so
/// identifiers are stable within one salt, unlinkable across salts, and the
/// raw address cannot be recovered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubscriberId([u8; 16]);

/// An anonymized aggregation prefix (e.g. an IPv4 /24), same digest scheme
/// with a distinct domain-separation tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PrefixId([u8; 16]);

fn keyed_digest(salt: &[u8], tag: u8, payload: &[u8]) -> Result<[u8; 16]> {
    if salt.is_empty() {
        return Err(Error::EmptySalt);
    }
    let mut hasher = Sha256::new();
    hasher.update(salt);
    hasher.update([tag]);
    hasher.update(payload);
    let digest = hasher.finalize();
    let mut out = [0u8; 16];
    out.copy_from_slice(&digest[..16]);
    Ok(out)
}

/// Replace a subscriber address by its keyed digest.
pub fn anonymize(addr: IpAddr, salt: &[u8]) -> Result<SubscriberId> {
    let bytes = addr_bytes(addr);
    Ok(SubscriberId(keyed_digest(salt, 0x01, &bytes)?))
}

/// Digest of the enclosing prefix of a subscriber address (`v4_len` bits for
/// IPv4, `v6_len` for IPv6). Addresses in the same prefix share the result.
pub fn anonymize_prefix(
    addr: IpAddr,
    salt: &[u8],
    v4_len: u8,
    v6_len: u8,
) -> Result<PrefixId> {
    let len = match addr {
        IpAddr::V4(_) => v4_len,
        IpAddr::V6(_) => v6_len,
    };
    let masked = mask_addr(addr, len);
    let mut payload = addr_bytes(masked);
    payload.push(len);
    Ok(PrefixId(keyed_digest(salt, 0x02, &payload)?))
}

fn addr_bytes(addr: IpAddr) -> Vec<u8> {
    match addr {
        IpAddr::V4(v4) => v4.octets().to_vec(),
        IpAddr::V6(v6) => v6.octets().to_vec(),
    }
}

macro_rules! hex_id {
    ($ty:ident) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", hex::encode(self.0))
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let bytes = hex::decode(s).map_err(|_| Error::Parse {
                    field: "subscriber",
                    reason: format!("`{s}` is not a hex identifier"),
                })?;
                let arr: [u8; 16] = bytes.try_into().map_err(|_| Error::Parse {
                    field: "subscriber",
                    reason: format!("`{s}` is not 16 bytes"),
                })?;
                Ok($ty(arr))
            }
        }

        impl Serialize for $ty {
            fn serialize<S: serde::Serializer>(
                &self,
                serializer: S,
            ) -> std::result::Result<S::Ok, S::Error> {
                serializer.serialize_str(&self.to_string())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: serde::Deserializer<'de>>(
                deserializer: D,
            ) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_id!(SubscriberId);
hex_id!(PrefixId);

#[cfg(test)]
mod tests {
    use super::*;

    fn ip(s: &str) -> IpAddr {
        s.parse().unwrap()
    }

    #[test]
    fn cidr_membership() {
        let c: Cidr = "100.64.0.0/10".parse().unwrap();
        assert!(c.contains(ip("100.64.0.1")));
        assert!(c.contains(ip("100.127.255.255")));
        assert!(!c.contains(ip("100.128.0.0")));
        assert!(!c.contains(ip("2001:db8::1")));
        let v6: Cidr = "2001:db8::/32".parse().unwrap();
        assert!(v6.contains(ip("2001:db8:ffff::1")));
        assert!(!v6.contains(ip("2001:db9::1")));
        // Non-canonical base gets masked.
        let c: Cidr = "10.1.2.3/8".parse().unwrap();
        assert_eq!(c.to_string(), "10.0.0.0/8");
        assert!("10.0.0.0/33".parse::<Cidr>().is_err());
        assert!("10.0.0.0".parse::<Cidr>().is_err());
    }

    #[test]
    fn asn_longest_prefix_wins() {
        let map = AsnMap::new(vec![
            ("198.18.0.0/15".parse().unwrap(), 64500),
            ("198.18.4.0/24".parse().unwrap(), 64501),
        ]);
        assert_eq!(map.lookup(ip("198.18.4.9")), Some(64501));
        assert_eq!(map.lookup(ip("198.18.5.9")), Some(64500));
        assert_eq!(map.lookup(ip("192.0.2.1")), None);
    }

    #[test]
    fn classification_precedence() {
        let cfg = RoleConfig {
            server_asns: [64500].into(),
            subscriber_ranges: vec!["100.64.0.0/10".parse().unwrap()],
            ..RoleConfig::default()
        };
        let map = AsnMap::new(vec![("198.18.0.0/15".parse().unwrap(), 64500)]);
        // Well-known port → Server even from an unknown address.
        assert_eq!(
            classify_endpoint(ip("192.0.2.1"), 443, &map, &cfg),
            EndpointRole::Server
        );
        // Service-AS address on an ephemeral port → Server.
        assert_eq!(
            classify_endpoint(ip("198.18.3.3"), 49152, &map, &cfg),
            EndpointRole::Server
        );
        // Subscriber range → Subscriber.
        assert_eq!(
            classify_endpoint(ip("100.64.9.9"), 49152, &map, &cfg),
            EndpointRole::Subscriber
        );
        // Server evidence beats subscriber range.
        assert_eq!(
            classify_endpoint(ip("100.64.9.9"), 443, &map, &cfg),
            EndpointRole::Server
        );
        // Nothing known.
        assert_eq!(
            classify_endpoint(ip("192.0.2.1"), 49152, &map, &cfg),
            EndpointRole::Unknown
        );
    }

    #[test]
    fn anonymization_is_stable_and_keyed() {
        let a = anonymize(ip("100.64.3.7"), b"salt-1").unwrap();
        let b = anonymize(ip("100.64.3.7"), b"salt-1").unwrap();
        let c = anonymize(ip("100.64.3.8"), b"salt-1").unwrap();
        let d = anonymize(ip("100.64.3.7"), b"salt-2").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a.to_string().len(), 32); // 128 bits in hex
        assert!(anonymize(ip("100.64.3.7"), b"").is_err());
    }

    #[test]
    fn prefix_digest_groups_neighbors() {
        let salt = b"s";
        let a = anonymize_prefix(ip("100.64.3.7"), salt, 24, 56).unwrap();
        let b = anonymize_prefix(ip("100.64.3.200"), salt, 24, 56).unwrap();
        let c = anonymize_prefix(ip("100.64.4.7"), salt, 24, 56).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Prefix digests never collide with address digests (domain separation).
        let full = anonymize(ip("100.64.3.0"), salt).unwrap();
        assert_ne!(full.to_string(), a.to_string());
    }

    #[test]
    fn id_roundtrips_through_hex() {
        let a = anonymize(ip("2001:db8::1"), b"k").unwrap();
        let s = a.to_string();
        let back: SubscriberId = s.parse().unwrap();
        assert_eq!(a, back);
        assert!("zz".parse::<SubscriberId>().is_err());
    }
}
