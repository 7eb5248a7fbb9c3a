//! Ground truth computed from the packet plan.
//!
//! Nothing here goes through the flow tracker or detector; aggregates are
//! recomputed directly from the planned packets so the manifest can serve
//! as an independent oracle for the analysis pipeline.

use std::collections::{BTreeMap, HashSet};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::{BehaviorKind, PlannedPacket, Scenario, VerdictRules, GENERATOR_ID};
use crate::detect::{DetectionConfig, RateCategory};
use crate::dns::QType;
use crate::flow::{FlowKey, FlowSummary};
use crate::scope::DarknetScope;
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub kind: BehaviorKind,
    pub src_ip: Ipv4Addr,
    pub expected: FlowSummary,
    pub detected: bool,
    /// Present only for detected sources.
    pub category: Option<RateCategory>,
    pub duration_s: f64,
    /// `None` when all packets share one timestamp.
    pub rate_pps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestPacket {
    pub ts: Timestamp,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub qname: String,
    pub qtype: QType,
    pub frame_bytes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub generator: String,
    pub seed: u64,
    /// Merged dark ranges as `first-last` address pairs.
    pub darknet: Vec<(Ipv4Addr, Ipv4Addr)>,
    pub detection: DetectionConfig,
    pub total_packets: u64,
    pub qtype_totals: BTreeMap<QType, u64>,
    pub bucket_width_s: u64,
    pub series_origin: Timestamp,
    pub series_buckets: Vec<u64>,
    /// Sorted by source address.
    pub sources: Vec<SourceManifest>,
    /// Every packet in capture order. Empty unless requested on export.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub packets: Vec<ManifestPacket>,
}

impl ScenarioManifest {
    pub(super) fn from_plan(
        scenario: &Scenario,
        scope: &DarknetScope,
        seed: u64,
        rules: &VerdictRules,
        plan: &[PlannedPacket],
        frames: &[Vec<u8>],
    ) -> Self {
        let cfg = &rules.detection;
        let mut qtype_totals = BTreeMap::new();
        for p in plan {
            *qtype_totals.entry(p.qtype).or_insert(0) += 1;
        }

        let (series_origin, series_buckets) = match plan.iter().map(|p| p.ts.secs()).min() {
            None => (Timestamp::default(), Vec::new()),
            Some(origin) => {
                let width = scenario.bucket_width_s;
                let last = plan.iter().map(|p| p.ts.secs()).max().unwrap_or(origin);
                let mut buckets = vec![0u64; ((last - origin) / width + 1) as usize];
                for p in plan {
                    buckets[((p.ts.secs() - origin) / width) as usize] += 1;
                }
                (Timestamp::from_secs(origin), buckets)
            }
        };

        let mut per_source: Vec<Vec<(&PlannedPacket, u32)>> = vec![Vec::new(); scenario.sources.len()];
        for (p, f) in plan.iter().zip(frames) {
            per_source[p.source].push((p, f.len() as u32));
        }
        let mut sources: Vec<SourceManifest> = scenario
            .sources
            .iter()
            .zip(&per_source)
            .map(|(behavior, mine)| expect_source(behavior.kind, behavior.src_ip, mine, rules, cfg))
            .collect();
        sources.sort_by_key(|s| s.src_ip);

        ScenarioManifest {
            generator: GENERATOR_ID.to_string(),
            seed,
            darknet: scope
                .ranges()
                .iter()
                .map(|&(lo, hi)| (Ipv4Addr::from(lo), Ipv4Addr::from(hi)))
                .collect(),
            detection: *cfg,
            total_packets: plan.len() as u64,
            qtype_totals,
            bucket_width_s: scenario.bucket_width_s,
            series_origin,
            series_buckets,
            sources,
            packets: plan
                .iter()
                .zip(frames)
                .map(|(p, f)| ManifestPacket {
                    ts: p.ts,
                    src_ip: p.src_ip,
                    dst_ip: p.dst_ip,
                    qname: p.qname.clone(),
                    qtype: p.qtype,
                    frame_bytes: f.len() as u32,
                })
                .collect(),
        }
    }

    pub fn detected_sources(&self) -> Vec<Ipv4Addr> {
        self.sources.iter().filter(|s| s.detected).map(|s| s.src_ip).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

fn expect_source(
    kind: BehaviorKind,
    src_ip: Ipv4Addr,
    packets: &[(&PlannedPacket, u32)],
    rules: &VerdictRules,
    cfg: &DetectionConfig,
) -> SourceManifest {
    let first_ts = packets.iter().map(|(p, _)| p.ts).min().unwrap_or_default();
    let last_ts = packets.iter().map(|(p, _)| p.ts).max().unwrap_or_default();
    let mut dsts = HashSet::new();
    let mut any_dsts = HashSet::new();
    let mut any_queries = 0u64;
    let mut total_frame_bytes = 0u64;
    let mut qtype_counts = BTreeMap::new();
    let mut domain_counts = BTreeMap::new();
    let mut domain_db_hit = false;
    for (p, len) in packets {
        dsts.insert(p.dst_ip);
        total_frame_bytes += u64::from(*len);
        *qtype_counts.entry(p.qtype).or_insert(0u64) += 1;
        *domain_counts.entry(p.qname.clone()).or_insert(0u64) += 1;
        if p.qtype == QType::ANY {
            any_queries += 1;
            any_dsts.insert(p.dst_ip);
            domain_db_hit |= rules.db.matches(&p.qname);
        }
    }
    let total = packets.len() as u64;
    let duration_ns = last_ts.as_nanos() - first_ts.as_nanos();
    let duration_s = duration_ns as f64 / 1e9;
    let rate_pps = (duration_ns > 0).then(|| total as f64 / duration_s);

    let detected = any_queries >= cfg.min_any_queries
        && any_dsts.len() as u64 >= cfg.min_distinct_hosts
        && (domain_db_hit || !cfg.require_domain_db_hit);
    let band = match rate_pps {
        None => RateCategory::High,
        Some(r) if r <= cfg.low_rate_max_pps => RateCategory::Low,
        Some(r) if r < cfg.high_rate_min_pps => RateCategory::Medium,
        Some(_) => RateCategory::High,
    };
    let category = detected.then_some(band);

    SourceManifest {
        kind,
        src_ip,
        expected: FlowSummary {
            key: FlowKey::new(src_ip),
            first_ts,
            last_ts,
            total_queries: total,
            any_queries,
            distinct_dark_dsts: dsts.len() as u64,
            distinct_any_dark_dsts: any_dsts.len() as u64,
            total_frame_bytes,
            qtype_counts,
            domain_counts,
            other_domain_queries: 0,
            domain_db_hit,
        },
        detected,
        category,
        duration_s,
        rate_pps,
    }
}
