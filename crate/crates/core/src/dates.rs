//! Calendar windows and time bins.
//!
//! All timestamps in this crate are Unix epoch seconds interpreted in UTC.
//! Days are UTC calendar days; hour and day bins are aligned tumbling windows.

use crate::error::{Error, Result};
use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};

/// An inclusive range of UTC calendar days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if start > end {
            return Err(Error::Config(format!(
                "date range starts {start} after it ends {end}"
            )));
        }
        Ok(DateRange { start, end })
    }

    pub fn contains(&self, day: NaiveDate) -> bool {
        self.start <= day && day <= self.end
    }

    /// Whether `[first, last]` overlaps this range at all.
    pub fn overlaps(&self, first: NaiveDate, last: NaiveDate) -> bool {
        first <= self.end && last >= self.start
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.start.iter_days().take_while(move |d| *d <= self.end)
    }

    pub fn num_days(&self) -> usize {
        (self.end - self.start).num_days() as usize + 1
    }
}

/// The length of a tumbling aggregation bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinLength {
    Hour,
    Day,
}

impl BinLength {
    pub fn secs(&self) -> i64 {
        match self {
            BinLength::Hour => 3600,
            BinLength::Day => 86_400,
        }
    }

    /// Start of the bin containing `ts` (aligned to the epoch, so UTC).
    pub fn floor(&self, ts: i64) -> i64 {
        ts - ts.rem_euclid(self.secs())
    }
}

impl std::str::FromStr for BinLength {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hour" => Ok(BinLength::Hour),
            "day" => Ok(BinLength::Day),
            other => Err(Error::Config(format!(
                "bin must be `hour` or `day`, got `{other}`"
            ))),
        }
    }
}

/// UTC calendar day containing a timestamp.
pub fn date_of(ts: i64) -> NaiveDate {
    DateTime::from_timestamp(ts, 0)
        .map(|dt| dt.date_naive())
        .unwrap_or(NaiveDate::MIN)
}

/// Start-of-hour timestamp (UTC) for `ts`.
pub fn hour_start(ts: i64) -> i64 {
    BinLength::Hour.floor(ts)
}

/// Start-of-day timestamp (UTC) for `ts`.
pub fn day_start(ts: i64) -> i64 {
    BinLength::Day.floor(ts)
}

/// RFC 3339 rendering of a bin start, used in CSV output.
pub fn format_ts(ts: i64) -> String {
    match DateTime::from_timestamp(ts, 0) {
        Some(dt) => dt.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        None => ts.to_string(),
    }
}
