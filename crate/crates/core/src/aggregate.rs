//! Population-level aggregation of detection events and visibility
//! statistics for sampled streams, including the CSV series behind the
//! report figures.
//!
//! Counts here are of *subscriber lines*, never raw addresses: events carry
//! anonymized identifiers, and the prefix-level series exists because access
//! networks rotate addresses — a line seen on seven days is seven distinct
//! identifiers but usually one stable prefix.

use crate::dates::{day_start, format_ts, hour_start};
use crate::detector::DetectionEvent;
use crate::error::{Error, Result};
use crate::roles::{PrefixId, SubscriberId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;

/// bin start -> count, for one rule label.
pub type CountSeries = BTreeMap<i64, u64>;

/// Distinct subscribers per (rule, bin) over a detection event stream.
pub fn unique_subscribers_per_bin(events: &[DetectionEvent]) -> BTreeMap<String, CountSeries> {
    let mut sets: BTreeMap<(&str, i64), BTreeSet<SubscriberId>> = BTreeMap::new();
    for ev in events {
        sets.entry((&ev.rule, ev.bin_start))
            .or_default()
            .insert(ev.subscriber);
    }
    let mut out: BTreeMap<String, CountSeries> = BTreeMap::new();
    for ((rule, bin), subs) in sets {
        out.entry(rule.to_string())
            .or_default()
            .insert(bin, subs.len() as u64);
    }
    out
}

/// Running union of distinct subscribers per rule, by day.
///
/// Days without events carry the previous total forward, so every label
/// yields one point per day from its first appearance to the end of the
/// horizon. `horizon_days` caps the series length from the earliest day in
/// the stream; `None` runs to the last day observed.
pub fn cumulative_subscribers(
    events: &[DetectionEvent],
    horizon_days: Option<usize>,
) -> BTreeMap<String, CountSeries> {
    cumulative_by(events, horizon_days, |ev| Ok(ev.subscriber)).expect("subscriber always present")
}

/// Per-label daily and cumulative distinct prefix counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrefixSeries {
    pub daily: CountSeries,
    pub cumulative: CountSeries,
}

/// Aggregate detections at anonymized-prefix granularity (the /24 analogue).
///
/// Address rotation makes subscriber identifiers unstable across days;
/// prefix-level counting absorbs rotation within a prefix. Every event's
/// subscriber must appear in `prefixes` (the map a detection run produces).
pub fn aggregate_prefixes(
    events: &[DetectionEvent],
    prefixes: &BTreeMap<SubscriberId, PrefixId>,
    horizon_days: Option<usize>,
) -> Result<BTreeMap<String, PrefixSeries>> {
    let lookup = |ev: &DetectionEvent| -> Result<PrefixId> {
        prefixes
            .get(&ev.subscriber)
            .copied()
            .ok_or_else(|| Error::MissingPrefix(ev.subscriber.to_string()))
    };
    // Daily distinct prefixes.
    let mut daily_sets: BTreeMap<(&str, i64), BTreeSet<PrefixId>> = BTreeMap::new();
    for ev in events {
        daily_sets
            .entry((&ev.rule, day_start(ev.bin_start)))
            .or_default()
            .insert(lookup(ev)?);
    }
    let mut out: BTreeMap<String, PrefixSeries> = BTreeMap::new();
    for ((rule, day), set) in daily_sets {
        out.entry(rule.to_string())
            .or_default()
            .daily
            .insert(day, set.len() as u64);
    }
    let cumulative = cumulative_by(events, horizon_days, lookup)?;
    for (rule, series) in cumulative {
        out.entry(rule).or_default().cumulative = series;
    }
    Ok(out)
}

/// Shared engine for daily running unions keyed by an arbitrary identifier.
fn cumulative_by<K: Ord + Copy>(
    events: &[DetectionEvent],
    horizon_days: Option<usize>,
    mut key: impl FnMut(&DetectionEvent) -> Result<K>,
) -> Result<BTreeMap<String, CountSeries>> {
    if events.is_empty() {
        return Ok(BTreeMap::new());
    }
    let mut per_day: BTreeMap<&str, BTreeMap<i64, BTreeSet<K>>> = BTreeMap::new();
    let mut first_day = i64::MAX;
    let mut last_day = i64::MIN;
    for ev in events {
        let day = day_start(ev.bin_start);
        first_day = first_day.min(day);
        last_day = last_day.max(day);
        per_day
            .entry(&ev.rule)
            .or_default()
            .entry(day)
            .or_default()
            .insert(key(ev)?);
    }
    if let Some(h) = horizon_days {
        if h == 0 {
            return Ok(BTreeMap::new());
        }
        last_day = last_day.min(first_day + (h as i64 - 1) * 86_400);
    }
    let mut out: BTreeMap<String, CountSeries> = BTreeMap::new();
    for (rule, days) in per_day {
        let mut seen: BTreeSet<K> = BTreeSet::new();
        let mut series = CountSeries::new();
        let mut day = first_day;
        while day <= last_day {
            if let Some(set) = days.get(&day) {
                seen.extend(set.iter().copied());
            }
            series.insert(day, seen.len() as u64);
            day += 86_400;
        }
        out.insert(rule.to_string(), series);
    }
    Ok(out)
}

/// One sighting of traffic toward a service address: the unit of the
/// visibility statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceObservation {
    pub timestamp: i64,
    pub ip: IpAddr,
    pub bytes: u64,
}

/// Treat each flow's destination as the service side and extract
/// observations. Matches the simulator's device -> service flow orientation.
pub fn observations_from_flows(flows: &[crate::flow::FlowRecord]) -> Vec<ServiceObservation> {
    flows
        .iter()
        .map(|f| ServiceObservation {
            timestamp: f.timestamp,
            ip: f.dst_addr,
            bytes: f.bytes,
        })
        .collect()
}

/// Visibility of one ground-truth hour through the sampled stream.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityBin {
    pub hour_start: i64,
    pub gt_ips: u64,
    pub visible_ips: u64,
    pub ip_fraction: f64,
    pub gt_domains: u64,
    pub visible_domains: u64,
    pub domain_fraction: f64,
}

/// Per-hour and overall visibility of service addresses and domains.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityStats {
    pub bins: Vec<VisibilityBin>,
    /// Mean of the per-hour fractions (hours weighted equally).
    pub overall_ip_fraction: f64,
    pub overall_domain_fraction: f64,
}

/// Compare a sampled stream against the ground truth it was sampled from.
///
/// For every hour with ground-truth traffic: which fraction of the contacted
/// service addresses, and of the domains they stand for, still appears in
/// the sampled stream? Sampled observations outside the ground-truth hour
/// range mean the streams are not aligned and abort the computation.
pub fn visibility_stats(
    gt: &[ServiceObservation],
    sampled: &[ServiceObservation],
    ip_domains: &BTreeMap<IpAddr, BTreeSet<String>>,
) -> Result<VisibilityStats> {
    if gt.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut gt_hours: BTreeMap<i64, BTreeSet<IpAddr>> = BTreeMap::new();
    for obs in gt {
        gt_hours
            .entry(hour_start(obs.timestamp))
            .or_default()
            .insert(obs.ip);
    }
    let first = *gt_hours.keys().next().unwrap();
    let last = *gt_hours.keys().next_back().unwrap();
    let mut sampled_hours: BTreeMap<i64, BTreeSet<IpAddr>> = BTreeMap::new();
    for obs in sampled {
        let hour = hour_start(obs.timestamp);
        if hour < first || hour > last {
            return Err(Error::WindowMismatch(format!(
                "sampled observation at {} outside ground-truth hours [{}, {}]",
                format_ts(obs.timestamp),
                format_ts(first),
                format_ts(last)
            )));
        }
        sampled_hours.entry(hour).or_default().insert(obs.ip);
    }
    let domains_of = |ips: &BTreeSet<IpAddr>| -> BTreeSet<&String> {
        ips.iter()
            .filter_map(|ip| ip_domains.get(ip))
            .flatten()
            .collect()
    };
    let empty = BTreeSet::new();
    let mut bins = Vec::new();
    let (mut ip_sum, mut dom_sum, mut dom_hours) = (0.0, 0.0, 0u64);
    for (hour, gt_ips) in &gt_hours {
        let sampled_ips = sampled_hours.get(hour).unwrap_or(&empty);
        let visible: BTreeSet<IpAddr> = gt_ips.intersection(sampled_ips).copied().collect();
        let gt_doms = domains_of(gt_ips);
        let vis_doms = domains_of(&visible);
        let ip_fraction = visible.len() as f64 / gt_ips.len() as f64;
        let domain_fraction = if gt_doms.is_empty() {
            0.0
        } else {
            vis_doms.len() as f64 / gt_doms.len() as f64
        };
        ip_sum += ip_fraction;
        if !gt_doms.is_empty() {
            dom_sum += domain_fraction;
            dom_hours += 1;
        }
        bins.push(VisibilityBin {
            hour_start: *hour,
            gt_ips: gt_ips.len() as u64,
            visible_ips: visible.len() as u64,
            ip_fraction,
            gt_domains: gt_doms.len() as u64,
            visible_domains: vis_doms.len() as u64,
            domain_fraction,
        });
    }
    Ok(VisibilityStats {
        overall_ip_fraction: ip_sum / bins.len() as f64,
        overall_domain_fraction: if dom_hours == 0 {
            0.0
        } else {
            dom_sum / dom_hours as f64
        },
        bins,
    })
}

/// Per-hour visibility of the traffic-heaviest service addresses.
#[derive(Debug, Clone, PartialEq)]
pub struct HeavyHitterSeries {
    pub top_fraction: f64,
    /// hour -> (top-set size, visible count, fraction).
    pub points: BTreeMap<i64, (u64, u64, f64)>,
    pub mean_fraction: f64,
}

/// For each ground-truth hour, rank service addresses by byte volume, keep
/// the top `top_fraction` (at least one), and measure how many of them the
/// sampled stream still shows. Ties break on the address so runs are stable.
pub fn heavy_hitter_visibility(
    gt: &[ServiceObservation],
    sampled: &[ServiceObservation],
    top_fraction: f64,
) -> Result<HeavyHitterSeries> {
    if gt.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "top fraction must be in (0, 1], got {top_fraction}"
        )));
    }
    let mut gt_hours: BTreeMap<i64, BTreeMap<IpAddr, u64>> = BTreeMap::new();
    for obs in gt {
        *gt_hours
            .entry(hour_start(obs.timestamp))
            .or_default()
            .entry(obs.ip)
            .or_default() += obs.bytes;
    }
    let mut sampled_hours: BTreeMap<i64, BTreeSet<IpAddr>> = BTreeMap::new();
    for obs in sampled {
        sampled_hours
            .entry(hour_start(obs.timestamp))
            .or_default()
            .insert(obs.ip);
    }
    let empty = BTreeSet::new();
    let mut points = BTreeMap::new();
    let mut sum = 0.0;
    for (hour, volumes) in &gt_hours {
        let mut ranked: Vec<(&IpAddr, &u64)> = volumes.iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        let k = ((top_fraction * ranked.len() as f64).ceil() as usize).max(1);
        let top: BTreeSet<IpAddr> = ranked.iter().take(k).map(|(ip, _)| **ip).collect();
        let visible = sampled_hours.get(hour).unwrap_or(&empty);
        let seen = top.intersection(visible).count() as u64;
        let fraction = seen as f64 / k as f64;
        sum += fraction;
        points.insert(*hour, (k as u64, seen, fraction));
    }
    Ok(HeavyHitterSeries {
        top_fraction,
        mean_fraction: sum / points.len() as f64,
        points,
    })
}

/// Share of one rule's subscribers seen behind one origin AS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsnShare {
    pub asn: u32,
    pub subscribers: u64,
    /// Percentage of the rule's distinct subscribers.
    pub share_pct: f64,
    /// ECDF over the rule's ASes, ordered by ascending share.
    pub ecdf: f64,
}

/// Distribution of detected subscribers over origin ASes, per rule.
///
/// Requires exchange-point events (every event must carry an ASN
/// annotation); the shares are per distinct subscriber, the ECDF steps over
/// ASes sorted by ascending share.
pub fn per_asn_distribution(
    events: &[DetectionEvent],
) -> Result<BTreeMap<String, Vec<AsnShare>>> {
    let mut per_rule: BTreeMap<&str, BTreeMap<u32, BTreeSet<SubscriberId>>> = BTreeMap::new();
    let mut totals: BTreeMap<&str, BTreeSet<SubscriberId>> = BTreeMap::new();
    for ev in events {
        let asn = ev
            .asn
            .ok_or_else(|| Error::MissingAsn(ev.subscriber.to_string()))?;
        per_rule
            .entry(&ev.rule)
            .or_default()
            .entry(asn)
            .or_default()
            .insert(ev.subscriber);
        totals.entry(&ev.rule).or_default().insert(ev.subscriber);
    }
    let mut out = BTreeMap::new();
    for (rule, by_asn) in per_rule {
        let total = totals[rule].len() as f64;
        let mut shares: Vec<AsnShare> = by_asn
            .into_iter()
            .map(|(asn, subs)| AsnShare {
                asn,
                subscribers: subs.len() as u64,
                share_pct: 100.0 * subs.len() as f64 / total,
                ecdf: 0.0,
            })
            .collect();
        shares.sort_by(|a, b| {
            a.share_pct
                .partial_cmp(&b.share_pct)
                .unwrap()
                .then(a.asn.cmp(&b.asn))
        });
        let n = shares.len() as f64;
        for (i, share) in shares.iter_mut().enumerate() {
            share.ecdf = (i + 1) as f64 / n;
        }
        out.insert(rule.to_string(), shares);
    }
    Ok(out)
}

// ---- CSV emission -------------------------------------------------------

fn fmt_frac(x: f64) -> String {
    format!("{x:.4}")
}

/// `bin,label,unique_subscribers`
pub fn hourly_csv(series: &BTreeMap<String, CountSeries>) -> String {
    let mut rows: Vec<(i64, &str, u64)> = Vec::new();
    for (label, points) in series {
        for (bin, count) in points {
            rows.push((*bin, label, *count));
        }
    }
    rows.sort();
    let mut out = String::from("bin,label,unique_subscribers\n");
    for (bin, label, count) in rows {
        out.push_str(&format!("{},{label},{count}\n", format_ts(bin)));
    }
    out
}

/// `day,label,cumulative_subscribers,cumulative_prefixes`
pub fn cumulative_csv(
    subscribers: &BTreeMap<String, CountSeries>,
    prefixes: Option<&BTreeMap<String, PrefixSeries>>,
) -> String {
    let mut rows: Vec<(i64, &str, u64, Option<u64>)> = Vec::new();
    for (label, points) in subscribers {
        for (day, count) in points {
            let pfx = prefixes
                .and_then(|p| p.get(label))
                .and_then(|s| s.cumulative.get(day))
                .copied();
            rows.push((*day, label, *count, pfx));
        }
    }
    rows.sort();
    let mut out = String::from("day,label,cumulative_subscribers,cumulative_prefixes\n");
    for (day, label, count, pfx) in rows {
        let pfx = pfx.map_or(String::new(), |v| v.to_string());
        out.push_str(&format!("{},{label},{count},{pfx}\n", format_ts(day)));
    }
    out
}

/// `hour,gt_service_ips,visible_service_ips,ip_fraction,gt_domains,visible_domains,domain_fraction`
pub fn visibility_csv(stats: &VisibilityStats) -> String {
    let mut out = String::from(
        "hour,gt_service_ips,visible_service_ips,ip_fraction,gt_domains,visible_domains,domain_fraction\n",
    );
    for bin in &stats.bins {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            format_ts(bin.hour_start),
            bin.gt_ips,
            bin.visible_ips,
            fmt_frac(bin.ip_fraction),
            bin.gt_domains,
            bin.visible_domains,
            fmt_frac(bin.domain_fraction)
        ));
    }
    out
}

/// `hour,top_fraction,top_count,visible_count,fraction`
pub fn heavy_hitter_csv(series: &[HeavyHitterSeries]) -> String {
    let mut out = String::from("hour,top_fraction,top_count,visible_count,fraction\n");
    let mut hours: BTreeSet<i64> = BTreeSet::new();
    for s in series {
        hours.extend(s.points.keys().copied());
    }
    for hour in hours {
        for s in series {
            if let Some((k, seen, fraction)) = s.points.get(&hour) {
                out.push_str(&format!(
                    "{},{},{k},{seen},{}\n",
                    format_ts(hour),
                    fmt_frac(s.top_fraction),
                    fmt_frac(*fraction)
                ));
            }
        }
    }
    out
}

/// `label,asn,subscribers,share_pct,ecdf`
pub fn asn_ecdf_csv(dist: &BTreeMap<String, Vec<AsnShare>>) -> String {
    let mut out = String::from("label,asn,subscribers,share_pct,ecdf\n");
    for (label, shares) in dist {
        for s in shares {
            out.push_str(&format!(
                "{label},{},{},{},{}\n",
                s.asn,
                s.subscribers,
                fmt_frac(s.share_pct),
                fmt_frac(s.ecdf)
            ));
        }
    }
    out
}
