//! Characterization outputs: query-type shares, time series, domain
//! rankings, and the attack table.

mod geo;
mod table;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::dns::QType;
use crate::time::Timestamp;

pub use geo::{geo_enrich, load_geo_table, GeoError, GeoTable, UNKNOWN_LOCATION};
pub use table::{attack_rows, attack_table_csv, attack_table_json, fmt_rate, fmt_seconds, AttackRow};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportError {
    #[error("no queries to summarize")]
    EmptyInput,
    #[error("bucket width must be positive")]
    ZeroBucketWidth,
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for ReportError {
    fn from(e: csv::Error) -> Self {
        ReportError::Csv(e.to_string())
    }
}

/// Label used for the aggregated remainder row.
pub const OTHER_ROW: &str = "OTHER";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeShare {
    pub qtype: String,
    pub count: u64,
    /// Unrounded share of all queries, in percent.
    pub percent: f64,
    /// Two-decimal share; the rendered column sums to exactly 100.00.
    pub percent_2dp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeDistribution {
    pub total: u64,
    pub rows: Vec<TypeShare>,
}

/// Top `top_n` types by count (ties by type code), plus one `OTHER` row
/// holding everything else when anything is left over.
///
/// Two-decimal percentages are apportioned in basis points by largest
/// remainder, so each is within 0.01 of the exact share and the column
/// totals 100.00.
pub fn type_distribution(
    qtype_counts: &BTreeMap<QType, u64>,
    top_n: usize,
) -> Result<TypeDistribution, ReportError> {
    let total: u64 = qtype_counts.values().sum();
    if total == 0 {
        return Err(ReportError::EmptyInput);
    }
    let mut sorted: Vec<(QType, u64)> = qtype_counts
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(&t, &n)| (t, n))
        .collect();
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut rows: Vec<(String, u64)> = sorted
        .iter()
        .take(top_n)
        .map(|(t, n)| (t.to_string(), *n))
        .collect();
    let rest: u64 = sorted.iter().skip(top_n).map(|(_, n)| n).sum();
    if sorted.len() > top_n {
        rows.push((OTHER_ROW.to_string(), rest));
    }

    let counts: Vec<u64> = rows.iter().map(|(_, n)| *n).collect();
    let bps = apportion_basis_points(&counts, total);
    Ok(TypeDistribution {
        total,
        rows: rows
            .into_iter()
            .zip(bps)
            .map(|((qtype, count), bp)| TypeShare {
                qtype,
                count,
                percent: count as f64 * 100.0 / total as f64,
                percent_2dp: format!("{}.{:02}", bp / 100, bp % 100),
            })
            .collect(),
    })
}

/// Largest-remainder split of 10,000 basis points proportional to
/// `counts`, which must sum to `total`.
fn apportion_basis_points(counts: &[u64], total: u64) -> Vec<u64> {
    let total = u128::from(total);
    let mut parts: Vec<(u64, u128, usize)> = counts
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let scaled = u128::from(n) * 10_000;
            ((scaled / total) as u64, scaled % total, i)
        })
        .collect();
    let assigned: u64 = parts.iter().map(|p| p.0).sum();
    let mut leftover = 10_000u64.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..parts.len()).collect();
    order.sort_by(|&a, &b| parts[b].1.cmp(&parts[a].1).then(a.cmp(&b)));
    for i in order {
        if leftover == 0 {
            break;
        }
        if parts[i].1 > 0 {
            parts[i].0 += 1;
            leftover -= 1;
        }
    }
    parts.into_iter().map(|p| p.0).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TimeSeries {
    pub bucket_width_s: u64,
    /// Earliest timestamp, truncated to the whole second.
    pub origin_ts: Timestamp,
    pub buckets: Vec<u64>,
}

impl TimeSeries {
    pub fn total(&self) -> u64 {
        self.buckets.iter().sum()
    }

    pub fn bucket_start(&self, index: usize) -> Timestamp {
        Timestamp::from_secs(self.origin_ts.secs() + index as u64 * self.bucket_width_s)
    }

    /// Indices of the `n` fullest buckets, fullest first, ties by index.
    pub fn peaks(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.buckets.len()).collect();
        idx.sort_by(|&a, &b| self.buckets[b].cmp(&self.buckets[a]).then(a.cmp(&b)));
        idx.truncate(n);
        idx
    }
}

/// Per-second packet counts; mergeable, and convertible to any bucket width.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SecondHistogram {
    counts: BTreeMap<u64, u64>,
}

impl SecondHistogram {
    pub fn add(&mut self, ts: Timestamp) {
        *self.counts.entry(ts.secs()).or_insert(0) += 1;
    }

    pub fn absorb(&mut self, other: SecondHistogram) {
        for (s, n) in other.counts {
            *self.counts.entry(s).or_insert(0) += n;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn to_series(&self, bucket_width_s: u64) -> Result<TimeSeries, ReportError> {
        if bucket_width_s == 0 {
            return Err(ReportError::ZeroBucketWidth);
        }
        let Some((&origin, _)) = self.counts.first_key_value() else {
            return Ok(TimeSeries {
                bucket_width_s,
                origin_ts: Timestamp::default(),
                buckets: Vec::new(),
            });
        };
        let (&last, _) = self.counts.last_key_value().expect("non-empty");
        let mut buckets = vec![0u64; ((last - origin) / bucket_width_s + 1) as usize];
        for (&s, &n) in &self.counts {
            buckets[((s - origin) / bucket_width_s) as usize] += n;
        }
        Ok(TimeSeries {
            bucket_width_s,
            origin_ts: Timestamp::from_secs(origin),
            buckets,
        })
    }
}

/// Packet counts per `bucket_width_s` window starting at the earliest
/// timestamp (whole second), with empty windows kept as zeros.
pub fn time_series(timestamps: &[Timestamp], bucket_width_s: u64) -> Result<TimeSeries, ReportError> {
    let mut h = SecondHistogram::default();
    for &ts in timestamps {
        h.add(ts);
    }
    h.to_series(bucket_width_s)
}

/// Names by descending count, ties broken by name.
pub fn top_domains(domain_counts: &BTreeMap<String, u64>, top_n: usize) -> Vec<(String, u64)> {
    let mut v: Vec<(&String, &u64)> = domain_counts.iter().collect();
    // BTreeMap iteration is already name-ordered; a stable sort keeps it for ties.
    v.sort_by(|a, b| b.1.cmp(a.1));
    v.into_iter()
        .take(top_n)
        .map(|(k, v)| (k.clone(), *v))
        .collect()
}

pub fn type_distribution_csv(dist: &TypeDistribution) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["qtype", "count", "percent"])?;
    for r in &dist.rows {
        w.write_record([r.qtype.as_str(), &r.count.to_string(), &r.percent_2dp])?;
    }
    finish(w)
}

pub fn time_series_csv(series: &TimeSeries) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bucket", "start", "count"])?;
    for (i, n) in series.buckets.iter().enumerate() {
        w.write_record([i.to_string(), series.bucket_start(i).to_iso8601(), n.to_string()])?;
    }
    finish(w)
}

pub fn domains_csv(ranked: &[(String, u64)]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rank", "domain", "count"])?;
    for (i, (name, n)) in ranked.iter().enumerate() {
        w.write_record([(i + 1).to_string(), name.clone(), n.to_string()])?;
    }
    finish(w)
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>) -> Result<String, ReportError> {
    let bytes = w
        .into_inner()
        .map_err(|e| ReportError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
