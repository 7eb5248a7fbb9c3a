use std::fmt;

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};

const NANOS_PER_SEC: u64 = 1_000_000_000;

/// Capture time as nanoseconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(u64);

impl Timestamp {
    pub const fn from_nanos(nanos: u64) -> Self {
        Timestamp(nanos)
    }

    pub const fn from_micros(micros: u64) -> Self {
        Timestamp(micros * 1_000)
    }

    pub const fn from_secs(secs: u64) -> Self {
        Timestamp(secs * NANOS_PER_SEC)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    /// Whole seconds, truncated.
    pub const fn secs(self) -> u64 {
        self.0 / NANOS_PER_SEC
    }

    pub const fn subsec_nanos(self) -> u32 {
        (self.0 % NANOS_PER_SEC) as u32
    }

    /// Seconds elapsed from `earlier` to `self`, saturating at zero.
    pub fn seconds_since(self, earlier: Timestamp) -> f64 {
        // Exact below 2^53 ns (about 104 days), so one rounding in total.
        self.0.saturating_sub(earlier.0) as f64 / NANOS_PER_SEC as f64
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        DateTime::from_timestamp(self.secs() as i64, self.subsec_nanos())
            .unwrap_or(DateTime::<Utc>::MAX_UTC)
    }

    /// ISO-8601 UTC rendering with the shortest exact sub-second precision.
    pub fn to_iso8601(self) -> String {
        let dt = self.to_datetime();
        let sub = self.subsec_nanos();
        if sub == 0 {
            dt.format("%Y-%m-%dT%H:%M:%SZ").to_string()
        } else if sub % 1_000 == 0 {
            dt.format("%Y-%m-%dT%H:%M:%S%.6fZ").to_string()
        } else {
            dt.format("%Y-%m-%dT%H:%M:%S%.9fZ").to_string()
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso8601())
    }
}

/// Human calendar range in the style "March 15", "March 17 to 18",
/// "March 31 to April 2", widening to include years only when they differ.
pub fn calendar_range(first: Timestamp, last: Timestamp) -> String {
    let a = first.to_datetime();
    let b = last.to_datetime();
    if a.year() != b.year() {
        return format!("{} to {}", a.format("%B %-d %Y"), b.format("%B %-d %Y"));
    }
    if a.month() != b.month() {
        return format!("{} to {}", a.format("%B %-d"), b.format("%B %-d"));
    }
    if a.day() != b.day() {
        return format!("{} to {}", a.format("%B %-d"), b.day());
    }
    a.format("%B %-d").to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    // 2013-03-15T00:00:00Z
    const MARCH_15_2013: u64 = 1_363_305_600;

    #[test]
    fn seconds_since_is_exact_for_whole_seconds() {
        let a = Timestamp::from_secs(MARCH_15_2013);
        let b = Timestamp::from_secs(MARCH_15_2013 + 34_605);
        assert_eq!(b.seconds_since(a), 34_605.0);
        assert_eq!(a.seconds_since(b), 0.0);
    }

    #[test]
    fn iso_rendering_picks_precision() {
        assert_eq!(Timestamp::from_secs(MARCH_15_2013).to_iso8601(), "2013-03-15T00:00:00Z");
        assert_eq!(
            Timestamp::from_micros(MARCH_15_2013 * 1_000_000 + 250).to_iso8601(),
            "2013-03-15T00:00:00.000250Z"
        );
        assert_eq!(
            Timestamp::from_nanos(MARCH_15_2013 * 1_000_000_000 + 7).to_iso8601(),
            "2013-03-15T00:00:00.000000007Z"
        );
    }

    #[test]
    fn calendar_ranges() {
        let day = 86_400;
        let t = |d: u64| Timestamp::from_secs(MARCH_15_2013 + d * day + 3_600);
        assert_eq!(calendar_range(t(0), t(0)), "March 15");
        assert_eq!(calendar_range(t(2), t(3)), "March 17 to 18");
        assert_eq!(calendar_range(t(16), t(18)), "March 31 to April 2");
        assert_eq!(calendar_range(t(0), t(300)), "March 15 2013 to January 9 2014");
    }
}
