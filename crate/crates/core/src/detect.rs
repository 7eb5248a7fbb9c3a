//! Threshold detection of amplification flows and rate banding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FlowKey, FlowSummary};
use crate::report::top_domains;
use crate::time::Timestamp;

/// How many of a flow's most requested names an attack record carries.
pub const REQUESTED_DOMAINS_SHOWN: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    ZeroThreshold(&'static str),
    #[error("rate bands need 0 < low ({low}) < high ({high})")]
    BadRateBands { low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    /// ANY queries a flow must send.
    pub min_any_queries: u64,
    /// Distinct dark destinations that must receive ANY queries.
    pub min_distinct_hosts: u64,
    /// Require at least one ANY query name found in the root/TLD list.
    pub require_domain_db_hit: bool,
    /// Rates at or below this are Low.
    pub low_rate_max_pps: f64,
    /// Rates at or above this are High.
    pub high_rate_min_pps: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            min_any_queries: 25,
            min_distinct_hosts: 25,
            require_domain_db_hit: true,
            low_rate_max_pps: 0.5,
            high_rate_min_pps: 4700.0,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.min_any_queries == 0 {
            return Err(ConfigError::ZeroThreshold("min_any_queries"));
        }
        if self.min_distinct_hosts == 0 {
            return Err(ConfigError::ZeroThreshold("min_distinct_hosts"));
        }
        let (low, high) = (self.low_rate_max_pps, self.high_rate_min_pps);
        if !(low > 0.0 && low < high) {
            return Err(ConfigError::BadRateBands { low, high });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RateCategory {
    Low,
    Medium,
    High,
}

impl fmt::Display for RateCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RateCategory::Low => "Low",
            RateCategory::Medium => "Medium",
            RateCategory::High => "High",
        })
    }
}

impl FromStr for RateCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(RateCategory::Low),
            "medium" => Ok(RateCategory::Medium),
            "high" => Ok(RateCategory::High),
            _ => Err(format!("unknown rate category {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackRecord {
    pub key: FlowKey,
    pub requested_domains: Vec<String>,
    pub first_ts: Timestamp,
    pub last_ts: Timestamp,
    pub duration_s: f64,
    /// All DNS queries from the flow.
    pub intensity: u64,
    pub any_queries: u64,
    pub unique_dark_ips: u64,
    pub avg_packet_size_bytes: f64,
    /// `f64::INFINITY` for a flow whose packets share one timestamp.
    pub avg_rate_pps: f64,
    pub category: RateCategory,
    pub location: Option<String>,
}

/// Packets per second over the observed span.
///
/// Zero packets give 0; a non-empty flow with no measurable span gives
/// `f64::INFINITY`.
pub fn compute_rate(intensity: u64, duration_s: f64) -> f64 {
    if intensity == 0 {
        0.0
    } else if duration_s > 0.0 {
        intensity as f64 / duration_s
    } else {
        f64::INFINITY
    }
}

pub fn classify_rate(rate_pps: f64, cfg: &DetectionConfig) -> RateCategory {
    if rate_pps <= cfg.low_rate_max_pps {
        RateCategory::Low
    } else if rate_pps >= cfg.high_rate_min_pps {
        RateCategory::High
    } else {
        RateCategory::Medium
    }
}

/// Whether a flow meets every detection threshold.
pub fn is_attack(flow: &FlowSummary, cfg: &DetectionConfig) -> bool {
    flow.any_queries >= cfg.min_any_queries
        && flow.distinct_any_dark_dsts >= cfg.min_distinct_hosts
        && (!cfg.require_domain_db_hit || flow.domain_db_hit)
}

pub fn detect(flow: &FlowSummary, cfg: &DetectionConfig) -> Option<AttackRecord> {
    if !is_attack(flow, cfg) {
        return None;
    }
    let duration_s = flow.duration_s();
    let avg_rate_pps = compute_rate(flow.total_queries, duration_s);
    Some(AttackRecord {
        key: flow.key,
        requested_domains: top_domains(&flow.domain_counts, REQUESTED_DOMAINS_SHOWN)
            .into_iter()
            .map(|(name, _)| name)
            .collect(),
        first_ts: flow.first_ts,
        last_ts: flow.last_ts,
        duration_s,
        intensity: flow.total_queries,
        any_queries: flow.any_queries,
        unique_dark_ips: flow.distinct_dark_dsts,
        avg_packet_size_bytes: flow.total_frame_bytes as f64 / flow.total_queries as f64,
        avg_rate_pps,
        category: classify_rate(avg_rate_pps, cfg),
        location: None,
    })
}

/// Detection over finalized flows; output keeps the input's key order.
pub fn detect_all(flows: &[FlowSummary], cfg: &DetectionConfig) -> Vec<AttackRecord> {
    flows.iter().filter_map(|f| detect(f, cfg)).collect()
}
