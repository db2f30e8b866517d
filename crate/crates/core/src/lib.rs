//! Detection of consumer IoT devices behind subscriber lines from sparsely
//! sampled flow records.
//!
//! The library builds per-device-type signatures — monitored domains mapped
//! to dated service endpoints — out of lab ground truth, passive DNS and
//! certificate scans, then matches sampled flow records against them per
//! subscriber and time bin. A companion simulator generates synthetic device
//! traffic and re-samples it to measure what a given sampling rate can see.
//!
//! Module map:
//! - [`flow`], [`roles`], [`config`]: flow records, endpoint roles,
//!   anonymization, runtime configuration.
//! - [`psl`], [`pdns`], [`cert`]: registrable-domain derivation, passive-DNS
//!   exclusivity analysis, certificate-based endpoint expansion.
//! - [`dictionary`]: the signature pipeline, from ground truth to the rule
//!   hierarchy.
//! - [`detector`]: per-subscriber evidence accumulation and detection.
//! - [`aggregate`]: population time series and visibility statistics.
//! - [`simulate`]: synthetic traffic generation, packet sampling, and the
//!   detection-delay crosscheck.

pub mod aggregate;
pub mod cert;
pub mod cli;
pub mod config;
pub mod dates;
pub mod detector;
pub mod dictionary;
pub mod error;
pub mod flow;
pub mod lines;
pub mod pdns;
pub mod psl;
pub mod roles;
pub mod simulate;

pub use error::{Error, Result};
