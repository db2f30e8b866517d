//! Sampled flow records: the CSV exchange format, validity invariants, and
//! the established-TCP predicate used at exchange-point vantage.
//!
//! A record describes one unidirectional flow as exported under 1-in-`s`
//! packet sampling: the packet and byte counters are the *sampled* counts,
//! and `tcp_flags` is the OR of the flags seen on the sampled packets.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::BufRead;
use std::net::IpAddr;
use std::str::FromStr;

pub const FLAG_FIN: u8 = 0x01;
pub const FLAG_SYN: u8 = 0x02;
pub const FLAG_RST: u8 = 0x04;
pub const FLAG_PSH: u8 = 0x08;
pub const FLAG_ACK: u8 = 0x10;
pub const FLAG_URG: u8 = 0x20;

/// Header line of the flow CSV format.
pub const FLOW_CSV_HEADER: &str =
    "timestamp,src_addr,dst_addr,src_port,dst_port,protocol,packets,bytes,tcp_flags,sampling_denominator";

/// Transport protocol of a flow. Unrecognized IP protocol numbers are kept
/// verbatim so records round-trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    Tcp,
    Udp,
    Icmp,
    Other(u8),
}

impl Serialize for Protocol {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Protocol {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Tcp => write!(f, "TCP"),
            Protocol::Udp => write!(f, "UDP"),
            Protocol::Icmp => write!(f, "ICMP"),
            Protocol::Other(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TCP" | "6" => Ok(Protocol::Tcp),
            "UDP" | "17" => Ok(Protocol::Udp),
            "ICMP" | "1" => Ok(Protocol::Icmp),
            other => match other.parse::<u8>() {
                Ok(n) => Ok(Protocol::Other(n)),
                Err(_) => Err(Error::Parse {
                    field: "protocol",
                    reason: format!("unrecognized protocol `{s}`"),
                }),
            },
        }
    }
}

/// One sampled, unidirectional flow record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRecord {
    /// Flow start, Unix epoch seconds UTC.
    pub timestamp: i64,
    pub src_addr: IpAddr,
    pub dst_addr: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
    /// Sampled packet count (>= 1; a flow with no sampled packet is not exported).
    pub packets: u64,
    /// Sampled byte count (>= packets: every packet has at least one byte).
    pub bytes: u64,
    /// OR of TCP flags over the sampled packets; 0 for non-TCP flows and for
    /// TCP flows whose sampled packets carried no flags.
    pub tcp_flags: u8,
    /// Sampling denominator `s` of the 1-in-`s` exporter (>= 1).
    pub sampling_denominator: u64,
}

impl FlowRecord {
    /// Check the structural invariants that every record must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.packets == 0 {
            return Err(Error::Parse {
                field: "packets",
                reason: "sampled flow must carry at least one packet".into(),
            });
        }
        if self.bytes < self.packets {
            return Err(Error::Parse {
                field: "bytes",
                reason: format!(
                    "byte count {} below packet count {}",
                    self.bytes, self.packets
                ),
            });
        }
        if self.tcp_flags != 0 && self.protocol != Protocol::Tcp {
            return Err(Error::Parse {
                field: "tcp_flags",
                reason: format!("non-zero flags 0x{:02x} on a non-TCP flow", self.tcp_flags),
            });
        }
        if self.sampling_denominator == 0 {
            return Err(Error::Parse {
                field: "sampling_denominator",
                reason: "sampling denominator must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Parse one CSV line. The line must have exactly the ten header fields.
    pub fn parse_line(line: &str) -> Result<FlowRecord> {
        let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Parse {
                field: "record",
                reason: format!("expected 10 comma-separated fields, got {}", fields.len()),
            });
        }
        let rec = FlowRecord {
            timestamp: parse_num(fields[0], "timestamp")?,
            src_addr: parse_addr(fields[1], "src_addr")?,
            dst_addr: parse_addr(fields[2], "dst_addr")?,
            src_port: parse_num(fields[3], "src_port")?,
            dst_port: parse_num(fields[4], "dst_port")?,
            protocol: fields[5].parse()?,
            packets: parse_num(fields[6], "packets")?,
            bytes: parse_num(fields[7], "bytes")?,
            tcp_flags: parse_flags(fields[8])?,
            sampling_denominator: parse_num(fields[9], "sampling_denominator")?,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Canonical CSV rendering; `parse_line` of the result reproduces `self`.
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},0x{:02x},{}",
            self.timestamp,
            self.src_addr,
            self.dst_addr,
            self.src_port,
            self.dst_port,
            self.protocol,
            self.packets,
            self.bytes,
            self.tcp_flags,
            self.sampling_denominator
        )
    }
}

fn parse_num<T: FromStr>(s: &str, field: &'static str) -> Result<T>
where
    T::Err: fmt::Display,
{
    s.trim().parse().map_err(|e| Error::Parse {
        field,
        reason: format!("`{s}`: {e}"),
    })
}

fn parse_addr(s: &str, field: &'static str) -> Result<IpAddr> {
    s.trim().parse().map_err(|_| Error::Parse {
        field,
        reason: format!("`{s}` is not an IP address"),
    })
}

fn parse_flags(s: &str) -> Result<u8> {
    let s = s.trim();
    let hex = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X"));
    match hex {
        Some(h) => u8::from_str_radix(h, 16).map_err(|e| Error::Parse {
            field: "tcp_flags",
            reason: format!("`{s}`: {e}"),
        }),
        None => Err(Error::Parse {
            field: "tcp_flags",
            reason: format!("`{s}` must be hex with a 0x prefix"),
        }),
    }
}

/// How the exchange-point filter decides that a TCP flow belongs to an
/// established connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstablishedPolicy {
    /// ACK set with SYN clear, or an all-zero flag byte (exporters that strip
    /// flags under sampling). The default.
    AckOrZero,
    /// Only the all-zero flag byte qualifies.
    ZeroOnly,
}

impl Default for EstablishedPolicy {
    fn default() -> Self {
        EstablishedPolicy::AckOrZero
    }
}

/// Established-connection predicate with the default policy.
///
/// Non-TCP flows pass: the filter exists to drop TCP scan traffic (bare SYNs
/// swamp exchange-point vantage) and has nothing to say about UDP or ICMP.
pub fn is_established_tcp(flow: &FlowRecord) -> bool {
    is_established_tcp_with(flow, EstablishedPolicy::AckOrZero)
}

/// Established-connection predicate under an explicit policy.
pub fn is_established_tcp_with(flow: &FlowRecord, policy: EstablishedPolicy) -> bool {
    if flow.protocol != Protocol::Tcp {
        return true;
    }
    let f = flow.tcp_flags;
    match policy {
        EstablishedPolicy::AckOrZero => (f & FLAG_ACK != 0 && f & FLAG_SYN == 0) || f == 0,
        EstablishedPolicy::ZeroOnly => f == 0,
    }
}

/// Iterator over flow records in a CSV stream with file/line error context.
///
/// A leading header line equal to [`FLOW_CSV_HEADER`] is skipped. In lenient
/// mode malformed lines are collected into `skipped` instead of stopping the
/// run.
pub struct FlowReader<R> {
    reader: R,
    path: String,
    line_no: usize,
    lenient: bool,
    /// (line number, error message) for lines skipped in lenient mode.
    pub skipped: Vec<(usize, String)>,
}

impl<R: BufRead> FlowReader<R> {
    pub fn new(reader: R, path: &str, lenient: bool) -> Self {
        FlowReader {
            reader,
            path: path.to_string(),
            line_no: 0,
            lenient,
            skipped: Vec::new(),
        }
    }

    pub fn read_all(mut self) -> Result<(Vec<FlowRecord>, Vec<(usize, String)>)> {
        let mut out = Vec::new();
        let mut buf = String::new();
        loop {
            buf.clear();
            if self.reader.read_line(&mut buf)? == 0 {
                break;
            }
            self.line_no += 1;
            let line = buf.trim_end_matches(['\r', '\n']);
            if line.is_empty() {
                continue;
            }
            if self.line_no == 1 && line == FLOW_CSV_HEADER {
                continue;
            }
            match FlowRecord::parse_line(line) {
                Ok(rec) => out.push(rec),
                Err(e) if self.lenient => {
                    self.skipped.push((self.line_no, e.to_string()));
                }
                Err(e) => return Err(e.at(&self.path, self.line_no)),
            }
        }
        Ok((out, self.skipped))
    }
}

/// Read a whole flow CSV file, aborting on the first malformed line.
pub fn read_flows(path: &std::path::Path) -> Result<Vec<FlowRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let (records, _) = FlowReader::new(reader, &path.to_string_lossy(), false).read_all()?;
    Ok(records)
}
