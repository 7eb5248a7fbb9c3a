//! Offline geo labels by longest-prefix match.

use std::collections::HashMap;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::detect::AttackRecord;
use crate::scope::{mask, Ipv4Prefix};

pub const UNKNOWN_LOCATION: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeoError {
    #[error("line {line}: malformed geo row {row:?} (expected prefix,label)")]
    MalformedGeoRow { line: u64, row: String },
}

/// Prefix → label rows. Later rows for an identical prefix replace earlier ones.
#[derive(Debug, Clone, Default)]
pub struct GeoTable {
    by_len: Vec<HashMap<u32, String>>,
    rows: usize,
}

impl GeoTable {
    pub fn new() -> Self {
        GeoTable {
            by_len: vec![HashMap::new(); 33],
            rows: 0,
        }
    }

    pub fn insert(&mut self, prefix: Ipv4Prefix, label: impl Into<String>) {
        if self.by_len.is_empty() {
            self.by_len = vec![HashMap::new(); 33];
        }
        self.by_len[usize::from(prefix.prefix_len())].insert(prefix.first(), label.into());
        self.rows += 1;
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn lookup(&self, ip: Ipv4Addr) -> Option<&str> {
        let x = u32::from(ip);
        (0..self.by_len.len())
            .rev()
            .find_map(|len| self.by_len[len].get(&(x & mask(len as u8))))
            .map(String::as_str)
    }
}

/// Reads `prefix,label` CSV. Blank lines, `#` comments and a leading
/// `prefix,label` header are ignored; labels may be quoted.
pub fn load_geo_table(text: &str) -> Result<GeoTable, GeoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut table = GeoTable::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = |r: &csv::StringRecord| r.position().map_or(i as u64 + 1, |p| p.line());
        let rec = rec.map_err(|e| GeoError::MalformedGeoRow {
            line: e.position().map_or(i as u64 + 1, |p| p.line()),
            row: e.to_string(),
        })?;
        let malformed = || GeoError::MalformedGeoRow {
            line: line(&rec),
            row: rec.iter().collect::<Vec<_>>().join(","),
        };
        if i == 0 && rec.get(0).is_some_and(|f| f.eq_ignore_ascii_case("prefix")) {
            continue;
        }
        if rec.len() != 2 || rec[1].is_empty() {
            return Err(malformed());
        }
        let prefix: Ipv4Prefix = rec[0].parse().map_err(|_| malformed())?;
        table.insert(prefix, &rec[1]);
    }
    Ok(table)
}

/// Sets each record's location to its longest-prefix label, or "unknown".
pub fn geo_enrich(records: &mut [AttackRecord], geo: &GeoTable) {
    for r in records {
        let label = geo.lookup(r.key.src_ip).unwrap_or(UNKNOWN_LOCATION);
        r.location = Some(label.to_string());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn longest_prefix_wins() {
        let geo = load_geo_table("prefix,label\n10.0.0.0/8,XX\n10.1.0.0/16,\"Montreal, CA\"\n# note\n\n").unwrap();
        assert_eq!(geo.len(), 2);
        assert_eq!(geo.lookup("10.1.2.3".parse().unwrap()), Some("Montreal, CA"));
        assert_eq!(geo.lookup("10.2.2.3".parse().unwrap()), Some("XX"));
        assert_eq!(geo.lookup("11.0.0.1".parse().unwrap()), None);
    }

    #[test]
    fn default_route_and_host_routes() {
        let geo = load_geo_table("0.0.0.0/0,ZZ\n192.0.2.1/32,host").unwrap();
        assert_eq!(geo.lookup("192.0.2.1".parse().unwrap()), Some("host"));
        assert_eq!(geo.lookup("192.0.2.2".parse().unwrap()), Some("ZZ"));
    }

    #[test]
    fn malformed_rows() {
        assert!(matches!(
            load_geo_table("banana"),
            Err(GeoError::MalformedGeoRow { line: 1, .. })
        ));
        assert!(load_geo_table("10.0.0.0/8,XX\n10.0.0.1/8,YY").is_err());
        assert!(load_geo_table("10.0.0.0/8,").is_err());
        assert!(load_geo_table("10.0.0.0/8,a,b").is_err());
    }

    #[test]
    fn enrichment_labels_every_record() {
        use crate::detect::{AttackRecord, RateCategory};
        use crate::flow::FlowKey;
        use crate::time::Timestamp;
        let rec = |ip: &str| AttackRecord {
            key: FlowKey::new(ip.parse().unwrap()),
            requested_domains: vec![],
            first_ts: Timestamp::default(),
            last_ts: Timestamp::default(),
            duration_s: 0.0,
            intensity: 0,
            any_queries: 0,
            unique_dark_ips: 0,
            avg_packet_size_bytes: 0.0,
            avg_rate_pps: 0.0,
            category: RateCategory::Low,
            location: None,
        };
        let mut records = vec![rec("10.1.2.3"), rec("172.16.0.1")];
        geo_enrich(&mut records, &load_geo_table("10.0.0.0/8,XX").unwrap());
        assert_eq!(records[0].location.as_deref(), Some("XX"));
        assert_eq!(records[1].location.as_deref(), Some(UNKNOWN_LOCATION));
    }
}
