//! Detection and characterization of DNS amplification DDoS activity from
//! darknet packet captures.
//!
//! Queries arriving at unused address space are decoded from classic pcap,
//! aggregated per source into flows, tested against fixed thresholds (ANY
//! queries, distinct dark destinations, a known requested domain), and
//! banded by average packet rate. The [`synth`] module produces labeled
//! captures that serve as ground truth for the whole pipeline.

pub mod detect;
pub mod dns;
pub mod flow;
pub mod packet;
pub mod pcap;
pub mod pipeline;
pub mod report;
pub mod scope;
pub mod synth;
pub mod time;
pub mod tld;

pub use detect::{classify_rate, compute_rate, detect, AttackRecord, DetectionConfig, RateCategory};
pub use dns::{parse_dns_query, DnsOutcome, DnsQuerySummary, QType};
pub use flow::{FlowKey, FlowSettings, FlowSummary, FlowTable};
pub use scope::{load_scope, DarknetScope, Ipv4Prefix};
pub use time::Timestamp;
pub use tld::{domain_in_db, load_tld_db, TldDatabase};
