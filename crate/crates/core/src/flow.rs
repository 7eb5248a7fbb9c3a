//! Per-source aggregation of DNS queries into flows.
//!
//! A flow is every query from one source address in the analysis window.
//! With an idle timeout configured, a source's queries are split wherever
//! two consecutive timestamps are more than the timeout apart, and the
//! pieces are numbered by time as segments. Segmentation depends only on
//! the set of timestamps, never on arrival order, so tables built from any
//! partition of the stream merge to the single-pass result.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dns::{DnsQuerySummary, QType};
use crate::packet::PacketRecord;
use crate::time::Timestamp;
use crate::tld::TldDatabase;

/// Exact distinct-destination tracking limit per flow.
pub const MAX_DISTINCT_DSTS: usize = 1_048_576;
/// Names tallied individually per flow; the rest land in `other_domain_queries`.
pub const DEFAULT_DOMAIN_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlowError {
    #[error("flow {key} exceeds {limit} distinct destinations")]
    TooManyDestinations { key: FlowKey, limit: usize },
    #[error("cannot merge flow tables built with different settings")]
    IncompatibleShards,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub src_ip: Ipv4Addr,
    /// Always 0 unless an idle timeout split the source's traffic.
    pub segment: u32,
}

impl FlowKey {
    pub fn new(src_ip: Ipv4Addr) -> Self {
        FlowKey { src_ip, segment: 0 }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.segment == 0 {
            write!(f, "{}", self.src_ip)
        } else {
            write!(f, "{}#{}", self.src_ip, self.segment)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub key: FlowKey,
    pub first_ts: Timestamp,
    pub last_ts: Timestamp,
    pub total_queries: u64,
    pub any_queries: u64,
    pub distinct_dark_dsts: u64,
    pub distinct_any_dark_dsts: u64,
    pub total_frame_bytes: u64,
    pub qtype_counts: BTreeMap<QType, u64>,
    pub domain_counts: BTreeMap<String, u64>,
    /// Queries whose name fell outside the per-flow name cap.
    pub other_domain_queries: u64,
    pub domain_db_hit: bool,
}

impl FlowSummary {
    pub fn duration_s(&self) -> f64 {
        self.last_ts.seconds_since(self.first_ts)
    }
}

/// Name tally bounded to the `cap` lexicographically smallest names.
///
/// Keeping the smallest names (rather than the first seen) makes the kept
/// set a function of the multiset of names alone, so shard merges are exact.
#[derive(Debug, Clone, Default)]
struct DomainTally {
    counts: BTreeMap<String, u64>,
    other: u64,
}

impl DomainTally {
    fn add(&mut self, name: &str, n: u64, cap: usize) {
        if let Some(c) = self.counts.get_mut(name) {
            *c += n;
            return;
        }
        if self.counts.len() < cap {
            self.counts.insert(name.to_owned(), n);
            return;
        }
        match self.counts.last_key_value() {
            Some((largest, _)) if name < largest.as_str() => {
                let (_, evicted) = self.counts.pop_last().expect("non-empty");
                self.other += evicted;
                self.counts.insert(name.to_owned(), n);
            }
            _ => self.other += n,
        }
    }

    fn absorb(&mut self, other: DomainTally, cap: usize) {
        self.other += other.other;
        for (name, n) in other.counts {
            self.add(&name, n, cap);
        }
    }
}

#[derive(Debug, Clone)]
struct FlowState {
    first_ts: Timestamp,
    last_ts: Timestamp,
    total_queries: u64,
    any_queries: u64,
    dark_dsts: HashSet<u32>,
    any_dark_dsts: HashSet<u32>,
    total_frame_bytes: u64,
    qtype_counts: BTreeMap<QType, u64>,
    domains: DomainTally,
    domain_db_hit: bool,
}

impl FlowState {
    fn new(ts: Timestamp) -> Self {
        FlowState {
            first_ts: ts,
            last_ts: ts,
            total_queries: 0,
            any_queries: 0,
            dark_dsts: HashSet::new(),
            any_dark_dsts: HashSet::new(),
            total_frame_bytes: 0,
            qtype_counts: BTreeMap::new(),
            domains: DomainTally::default(),
            domain_db_hit: false,
        }
    }

    fn absorb(&mut self, other: FlowState, domain_cap: usize) {
        self.first_ts = self.first_ts.min(other.first_ts);
        self.last_ts = self.last_ts.max(other.last_ts);
        self.total_queries += other.total_queries;
        self.any_queries += other.any_queries;
        self.total_frame_bytes += other.total_frame_bytes;
        self.domain_db_hit |= other.domain_db_hit;
        union_into(&mut self.dark_dsts, other.dark_dsts);
        union_into(&mut self.any_dark_dsts, other.any_dark_dsts);
        for (t, n) in other.qtype_counts {
            *self.qtype_counts.entry(t).or_insert(0) += n;
        }
        self.domains.absorb(other.domains, domain_cap);
    }

    fn summarize(self, key: FlowKey) -> FlowSummary {
        FlowSummary {
            key,
            first_ts: self.first_ts,
            last_ts: self.last_ts,
            total_queries: self.total_queries,
            any_queries: self.any_queries,
            distinct_dark_dsts: self.dark_dsts.len() as u64,
            distinct_any_dark_dsts: self.any_dark_dsts.len() as u64,
            total_frame_bytes: self.total_frame_bytes,
            qtype_counts: self.qtype_counts,
            domain_counts: self.domains.counts,
            other_domain_queries: self.domains.other,
            domain_db_hit: self.domain_db_hit,
        }
    }
}

fn union_into(into: &mut HashSet<u32>, mut from: HashSet<u32>) {
    if from.len() > into.len() {
        std::mem::swap(into, &mut from);
    }
    into.extend(from);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowSettings {
    /// Idle gap, in nanoseconds, beyond which a source's traffic is split.
    pub idle_timeout_ns: Option<u64>,
    pub domain_cap: usize,
    pub max_distinct_dsts: usize,
}

impl Default for FlowSettings {
    fn default() -> Self {
        FlowSettings {
            idle_timeout_ns: None,
            domain_cap: DEFAULT_DOMAIN_CAP,
            max_distinct_dsts: MAX_DISTINCT_DSTS,
        }
    }
}

impl FlowSettings {
    pub fn with_idle_timeout_secs(mut self, secs: Option<u64>) -> Self {
        self.idle_timeout_ns = secs.map(|s| s.saturating_mul(1_000_000_000));
        self
    }
}

/// Per-source segments, sorted by start time.
#[derive(Debug, Clone)]
pub struct FlowTable {
    settings: FlowSettings,
    flows: HashMap<Ipv4Addr, Vec<FlowState>>,
}

impl Default for FlowTable {
    fn default() -> Self {
        FlowTable::new(FlowSettings::default())
    }
}

impl FlowTable {
    pub fn new(settings: FlowSettings) -> Self {
        FlowTable {
            settings,
            flows: HashMap::new(),
        }
    }

    pub fn settings(&self) -> FlowSettings {
        self.settings
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    /// Number of sources seen (not segments).
    pub fn sources(&self) -> usize {
        self.flows.len()
    }

    /// Adds one query. The caller has already checked the destination port
    /// and that the destination is inside the dark space.
    pub fn update(
        &mut self,
        pkt: &PacketRecord<'_>,
        query: &DnsQuerySummary,
        db: &TldDatabase,
    ) -> Result<(), FlowError> {
        let settings = self.settings;
        let ts = pkt.timestamp;
        let segments = self.flows.entry(pkt.src_ip).or_default();
        let idx = locate_segment(segments, ts, settings);
        let seg = &mut segments[idx];

        seg.first_ts = seg.first_ts.min(ts);
        seg.last_ts = seg.last_ts.max(ts);
        seg.total_queries += 1;
        seg.total_frame_bytes += u64::from(pkt.frame_bytes);
        *seg.qtype_counts.entry(query.qtype).or_insert(0) += 1;
        let dst = u32::from(pkt.dst_ip);
        seg.dark_dsts.insert(dst);
        if query.qtype == QType::ANY {
            seg.any_queries += 1;
            seg.any_dark_dsts.insert(dst);
            if !seg.domain_db_hit && db.matches(&query.qname) {
                seg.domain_db_hit = true;
            }
        }
        seg.domains.add(&query.qname, 1, settings.domain_cap);

        if seg.dark_dsts.len() > settings.max_distinct_dsts {
            return Err(FlowError::TooManyDestinations {
                key: FlowKey {
                    src_ip: pkt.src_ip,
                    segment: idx as u32,
                },
                limit: settings.max_distinct_dsts,
            });
        }
        Ok(())
    }

    /// Folds `other` into `self`. Counters add, sets union, time bounds
    /// widen, and segments that come within the idle timeout coalesce.
    pub fn absorb(&mut self, other: FlowTable) -> Result<(), FlowError> {
        if self.settings != other.settings {
            return Err(FlowError::IncompatibleShards);
        }
        let settings = self.settings;
        for (src, theirs) in other.flows {
            match self.flows.get_mut(&src) {
                None => {
                    self.flows.insert(src, theirs);
                }
                Some(ours) => {
                    let mut all = std::mem::take(ours);
                    all.extend(theirs);
                    *ours = coalesce(all, settings);
                    let over = ours
                        .iter()
                        .position(|s| s.dark_dsts.len() > settings.max_distinct_dsts);
                    if let Some(i) = over {
                        return Err(FlowError::TooManyDestinations {
                            key: FlowKey {
                                src_ip: src,
                                segment: i as u32,
                            },
                            limit: settings.max_distinct_dsts,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Summaries in ascending (source, segment) order.
    pub fn finalize(self) -> Vec<FlowSummary> {
        let mut sources: Vec<(Ipv4Addr, Vec<FlowState>)> = self.flows.into_iter().collect();
        sources.sort_unstable_by_key(|(ip, _)| *ip);
        sources
            .into_iter()
            .flat_map(|(src_ip, segs)| {
                segs.into_iter().enumerate().map(move |(i, s)| {
                    s.summarize(FlowKey {
                        src_ip,
                        segment: i as u32,
                    })
                })
            })
            .collect()
    }
}

/// Merges a list of shard tables into one.
pub fn merge(shards: Vec<FlowTable>) -> Result<FlowTable, FlowError> {
    let mut iter = shards.into_iter();
    let Some(mut acc) = iter.next() else {
        return Ok(FlowTable::default());
    };
    for shard in iter {
        acc.absorb(shard)?;
    }
    Ok(acc)
}

fn within(gap_from: Timestamp, gap_to: Timestamp, timeout: u64) -> bool {
    gap_to.as_nanos().saturating_sub(gap_from.as_nanos()) <= timeout
}

/// Index of the segment that `ts` belongs to, creating or bridging
/// segments as needed.
fn locate_segment(segments: &mut Vec<FlowState>, ts: Timestamp, settings: FlowSettings) -> usize {
    let Some(timeout) = settings.idle_timeout_ns else {
        if segments.is_empty() {
            segments.push(FlowState::new(ts));
        }
        return 0;
    };
    // Fast path: in-order arrival extends the latest segment.
    if let Some(last) = segments.last() {
        if ts >= last.first_ts && within(last.last_ts, ts, timeout) {
            return segments.len() - 1;
        }
    }
    // First segment whose start is after ts.
    let after = segments.partition_point(|s| s.first_ts <= ts);
    let joins_prev = after > 0 && within(segments[after - 1].last_ts, ts, timeout);
    let joins_next = after < segments.len() && within(ts, segments[after].first_ts, timeout);
    match (joins_prev, joins_next) {
        (true, true) => {
            let next = segments.remove(after);
            segments[after - 1].absorb(next, settings.domain_cap);
            after - 1
        }
        (true, false) => after - 1,
        (false, true) => after,
        (false, false) => {
            segments.insert(after, FlowState::new(ts));
            after
        }
    }
}

fn coalesce(mut segs: Vec<FlowState>, settings: FlowSettings) -> Vec<FlowState> {
    segs.sort_by_key(|s| (s.first_ts, s.last_ts));
    let mut out: Vec<FlowState> = Vec::with_capacity(segs.len());
    for seg in segs {
        let joins = match (out.last(), settings.idle_timeout_ns) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(prev), Some(t)) => within(prev.last_ts, seg.first_ts, t),
        };
        if joins {
            out.last_mut()
                .expect("checked")
                .absorb(seg, settings.domain_cap);
        } else {
            out.push(seg);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkt(src: [u8; 4], dst: [u8; 4], secs: u64) -> PacketRecord<'static> {
        PacketRecord {
            timestamp: Timestamp::from_secs(secs),
            src_ip: Ipv4Addr::from(src),
            dst_ip: Ipv4Addr::from(dst),
            protocol: 17,
            src_port: 4444,
            dst_port: 53,
            frame_bytes: 68,
            udp_payload: &[],
        }
    }

    fn q(name: &str, qtype: QType) -> DnsQuerySummary {
        DnsQuerySummary {
            transaction_id: 0,
            is_query: true,
            opcode: 0,
            recursion_desired: true,
            qname: name.to_string(),
            qtype,
            qclass: 1,
        }
    }

    fn db() -> TldDatabase {
        crate::tld::load_tld_db("net\ncom\n.").unwrap()
    }

    #[test]
    fn single_root_any_query() {
        let mut t = FlowTable::default();
        t.update(&pkt([1, 2, 3, 4], [10, 0, 0, 1], 5), &q(".", QType::ANY), &db()).unwrap();
        let f = t.finalize();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].total_queries, 1);
        assert_eq!(f[0].any_queries, 1);
        assert_eq!(f[0].distinct_any_dark_dsts, 1);
        assert!(f[0].domain_db_hit);
        assert_eq!(f[0].domain_counts.get("."), Some(&1));
        assert_eq!(f[0].total_frame_bytes, 68);
    }

    #[test]
    fn same_destination_counts_once() {
        let mut t = FlowTable::default();
        for s in 0..2 {
            t.update(&pkt([1, 2, 3, 4], [10, 0, 0, 1], s), &q("ripe.net", QType::A), &db()).unwrap();
        }
        let f = &t.finalize()[0];
        assert_eq!(f.distinct_dark_dsts, 1);
        assert_eq!(f.total_queries, 2);
        assert_eq!(f.any_queries, 0);
        assert!(!f.domain_db_hit, "non-ANY names do not satisfy the domain rule");
    }

    #[test]
    fn finalize_orders_by_source() {
        let mut t = FlowTable::default();
        t.update(&pkt([10, 1, 1, 1], [10, 0, 0, 1], 0), &q(".", QType::ANY), &db()).unwrap();
        t.update(&pkt([9, 9, 9, 9], [10, 0, 0, 1], 0), &q(".", QType::ANY), &db()).unwrap();
        let keys: Vec<String> = t.finalize().iter().map(|f| f.key.to_string()).collect();
        assert_eq!(keys, ["9.9.9.9", "10.1.1.1"]);
        assert!(FlowTable::default().finalize().is_empty());
    }

    #[test]
    fn merge_identity_and_additivity() {
        let mut a = FlowTable::default();
        let mut b = FlowTable::default();
        for s in 0..2 {
            a.update(&pkt([1, 1, 1, 1], [10, 0, 0, s as u8], s), &q(".", QType::ANY), &db()).unwrap();
        }
        for s in 2..5 {
            b.update(&pkt([1, 1, 1, 1], [10, 0, 0, s as u8], s), &q(".", QType::ANY), &db()).unwrap();
        }
        let solo = merge(vec![a.clone(), FlowTable::default()]).unwrap().finalize();
        assert_eq!(solo, a.clone().finalize());
        let m = merge(vec![a, b]).unwrap().finalize();
        assert_eq!(m[0].total_queries, 5);
        assert_eq!(m[0].distinct_dark_dsts, 5);
        assert_eq!(m[0].first_ts, Timestamp::from_secs(0));
        assert_eq!(m[0].last_ts, Timestamp::from_secs(4));
    }

    #[test]
    fn idle_timeout_splits_and_bridges() {
        let settings = FlowSettings::default().with_idle_timeout_secs(Some(10));
        let mut t = FlowTable::new(settings);
        for s in [0, 5, 100, 104] {
            t.update(&pkt([1, 1, 1, 1], [10, 0, 0, 1], s), &q(".", QType::ANY), &db()).unwrap();
        }
        let f = t.clone().finalize();
        assert_eq!(f.len(), 2);
        assert_eq!(f[1].key.to_string(), "1.1.1.1#1");
        assert_eq!(f[1].total_queries, 2);
        // Out-of-order packets join the right segment; a bridge packet chain merges.
        for s in [50, 40, 30, 20, 60, 70, 80, 90, 15] {
            t.update(&pkt([1, 1, 1, 1], [10, 0, 0, 2], s), &q(".", QType::ANY), &db()).unwrap();
        }
        let f = t.finalize();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].total_queries, 13);
        assert_eq!(f[0].duration_s(), 104.0);
    }

    #[test]
    fn domain_cap_keeps_smallest_names() {
        let settings = FlowSettings {
            domain_cap: 2,
            ..FlowSettings::default()
        };
        let mut t = FlowTable::new(settings);
        for name in ["c.net", "b.net", "d.net", "a.net", "c.net", "d.net"] {
            t.update(&pkt([1, 1, 1, 1], [10, 0, 0, 1], 0), &q(name, QType::ANY), &db()).unwrap();
        }
        let f = &t.finalize()[0];
        assert_eq!(f.domain_counts.len(), 2);
        assert_eq!(f.domain_counts.get("a.net"), Some(&1));
        assert_eq!(f.domain_counts.get("b.net"), Some(&1));
        assert_eq!(f.other_domain_queries, 4);
    }

    #[test]
    fn destination_limit_aborts() {
        let settings = FlowSettings {
            max_distinct_dsts: 3,
            ..FlowSettings::default()
        };
        let mut t = FlowTable::new(settings);
        for d in 0..3 {
            t.update(&pkt([1, 1, 1, 1], [10, 0, 0, d], 0), &q(".", QType::ANY), &db()).unwrap();
        }
        let err = t
            .update(&pkt([1, 1, 1, 1], [10, 0, 0, 9], 0), &q(".", QType::ANY), &db())
            .unwrap_err();
        assert!(matches!(err, FlowError::TooManyDestinations { limit: 3, .. }));
    }

    #[test]
    fn mismatched_shards_refuse_to_merge() {
        let a = FlowTable::default();
        let b = FlowTable::new(FlowSettings::default().with_idle_timeout_secs(Some(5)));
        assert_eq!(merge(vec![a, b]).unwrap_err(), FlowError::IncompatibleShards);
    }
}
