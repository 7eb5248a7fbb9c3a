use serde::{Deserialize, Serialize};

use super::{finish, ReportError};
use crate::detect::AttackRecord;
use crate::time::calendar_range;

/// One attack table row with every value already rendered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub source: String,
    pub requested_domains: Vec<String>,
    pub detection_period: String,
    pub first_seen: String,
    pub last_seen: String,
    pub duration_s: f64,
    pub intensity: u64,
    pub any_queries: u64,
    pub unique_dark_ips: u64,
    pub avg_packet_size_bytes: f64,
    /// `None` when every packet shares one timestamp (unbounded rate).
    pub avg_rate_pps: Option<f64>,
    pub rate_category: String,
    pub location: Option<String>,
}

const CSV_HEADER: [&str; 13] = [
    "source",
    "requested_domains",
    "detection_period",
    "first_seen",
    "last_seen",
    "duration_s",
    "intensity",
    "any_queries",
    "unique_dark_ips",
    "avg_packet_size_bytes",
    "avg_rate_pps",
    "rate_category",
    "location",
];

/// Seconds with up to microsecond digits, trailing zeros dropped.
pub fn fmt_seconds(s: f64) -> String {
    let text = format!("{s:.6}");
    let trimmed = text.trim_end_matches('0').trim_end_matches('.');
    trimmed.to_string()
}

pub fn fmt_rate(pps: f64) -> String {
    if pps.is_infinite() {
        "inf".to_string()
    } else {
        format!("{pps:.2}")
    }
}

fn two_dp(x: f64) -> f64 {
    format!("{x:.2}").parse().expect("formatted float parses")
}

pub fn attack_rows(records: &[AttackRecord]) -> Vec<AttackRow> {
    records
        .iter()
        .map(|r| AttackRow {
            source: r.key.to_string(),
            requested_domains: r.requested_domains.clone(),
            detection_period: calendar_range(r.first_ts, r.last_ts),
            first_seen: r.first_ts.to_iso8601(),
            last_seen: r.last_ts.to_iso8601(),
            duration_s: fmt_seconds(r.duration_s).parse().expect("formatted float parses"),
            intensity: r.intensity,
            any_queries: r.any_queries,
            unique_dark_ips: r.unique_dark_ips,
            avg_packet_size_bytes: two_dp(r.avg_packet_size_bytes),
            avg_rate_pps: r.avg_rate_pps.is_finite().then(|| two_dp(r.avg_rate_pps)),
            rate_category: r.category.to_string(),
            location: r.location.clone(),
        })
        .collect()
}

pub fn attack_table_csv(records: &[AttackRecord]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for (rec, row) in records.iter().zip(attack_rows(records)) {
        w.write_record([
            row.source,
            row.requested_domains.join(";"),
            row.detection_period,
            row.first_seen,
            row.last_seen,
            fmt_seconds(rec.duration_s),
            row.intensity.to_string(),
            row.any_queries.to_string(),
            row.unique_dark_ips.to_string(),
            format!("{:.2}", rec.avg_packet_size_bytes),
            fmt_rate(rec.avg_rate_pps),
            row.rate_category,
            row.location.unwrap_or_default(),
        ])?;
    }
    finish(w)
}

pub fn attack_table_json(records: &[AttackRecord]) -> String {
    let mut s = serde_json::to_string_pretty(&attack_rows(records)).expect("rows serialize");
    s.push('\n');
    s
}
