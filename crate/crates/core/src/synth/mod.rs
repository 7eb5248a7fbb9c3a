//! Deterministic, labeled darknet traces.
//!
//! A scenario lists query sources, each tagged with the kind of actor it
//! models: a spoofed victim whose address fronts a flood, a compromised
//! host sending at medium rates, a slow scanner mapping open resolvers,
//! a misconfigured host hammering one address, or plain non-ANY noise.
//! [`generate`] plans every packet, derives the expected aggregates and
//! verdicts from the plan, and only then writes the capture.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), seeded with the scenario
//! seed and using the source index as the stream number. Inter-packet gaps
//! are exponential with mean `1 / rate_pps`, drawn by inversion and rounded
//! to whole microseconds. Manifests, not the random streams, are the
//! cross-implementation contract.

mod encode;
mod manifest;

use std::collections::{BTreeMap, HashSet};
use std::net::Ipv4Addr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::DetectionConfig;
use crate::dns::{normalize_qname, QType};
use crate::flow::DEFAULT_DOMAIN_CAP;
use crate::pcap::{LinkType, PcapWriter};
use crate::scope::DarknetScope;
use crate::time::Timestamp;
use crate::tld::TldDatabase;

pub use encode::{build_query_frame, encode_dns_query, encode_name, EncodeError, ETHERNET_MIN_FRAME};
pub use manifest::{ManifestPacket, ScenarioManifest, SourceManifest};

/// 2013-03-01T00:00:00Z
pub const DEFAULT_EPOCH_S: u64 = 1_362_096_000;
pub const DEFAULT_BUCKET_WIDTH_S: u64 = 3_600;
pub const GENERATOR_ID: &str = "darkamp-synth/1 chacha8 exp-gaps";

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("source {index} ({src_ip}) wants {wanted} targets but the dark space holds {available}")]
    ScopeTooSmall {
        index: usize,
        src_ip: Ipv4Addr,
        wanted: u64,
        available: u64,
    },
    #[error("source {index}: {reason}")]
    InvalidBehavior { index: usize, reason: String },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("writing capture: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    /// Victim of a spoofed-address flood; High rate band.
    SpoofedVictimFlood,
    /// Host under attacker control; Medium rate band.
    CompromisedHost,
    /// Resolver discovery at low speed (≤ 0.5 pps).
    Scanner,
    /// Many packets to a single dark address.
    Misconfiguration,
    /// Queries of types other than ANY.
    NonAnyNoise,
}

fn default_qtypes() -> BTreeMap<String, f64> {
    BTreeMap::from([("ANY".to_string(), 1.0)])
}

fn default_domains() -> BTreeMap<String, f64> {
    BTreeMap::from([(".".to_string(), 1.0)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceBehavior {
    pub kind: BehaviorKind,
    pub src_ip: Ipv4Addr,
    /// Distinct dark addresses swept, in a random order, cyclically.
    pub target_count: u64,
    /// Nominal packets per second.
    pub rate_pps: f64,
    /// Packet count; defaults to `round(rate_pps * duration_s)`.
    #[serde(default)]
    pub packets: Option<u64>,
    /// Nominal span. `0` places every packet on the start instant.
    #[serde(default)]
    pub duration_s: Option<f64>,
    #[serde(default)]
    pub start_offset_s: f64,
    /// Query type → relative weight.
    #[serde(default = "default_qtypes")]
    pub qtypes: BTreeMap<String, f64>,
    /// Query name → relative weight.
    #[serde(default = "default_domains")]
    pub domains: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_epoch")]
    pub epoch_s: u64,
    #[serde(default = "default_bucket_width")]
    pub bucket_width_s: u64,
    /// Dark space the scenario targets; callers may override it.
    #[serde(default)]
    pub darknet: Vec<String>,
    pub sources: Vec<SourceBehavior>,
}

fn default_epoch() -> u64 {
    DEFAULT_EPOCH_S
}

fn default_bucket_width() -> u64 {
    DEFAULT_BUCKET_WIDTH_S
}

impl Scenario {
    pub fn new(sources: Vec<SourceBehavior>) -> Self {
        Scenario {
            epoch_s: DEFAULT_EPOCH_S,
            bucket_width_s: DEFAULT_BUCKET_WIDTH_S,
            darknet: Vec::new(),
            sources,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, GenerateError> {
        serde_json::from_str(text).map_err(|e| GenerateError::InvalidScenario(e.to_string()))
    }
}

/// Settings the manifest's verdicts are computed against.
#[derive(Debug, Clone)]
pub struct VerdictRules {
    pub db: TldDatabase,
    pub detection: DetectionConfig,
}

impl Default for VerdictRules {
    fn default() -> Self {
        VerdictRules {
            db: TldDatabase::builtin(),
            detection: DetectionConfig::default(),
        }
    }
}

/// One packet of the plan, before encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct PlannedPacket {
    pub source: usize,
    pub seq: u64,
    pub ts: Timestamp,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub txid: u16,
    pub qtype: QType,
    pub qname: String,
}

#[derive(Debug, Clone)]
pub struct GeneratedTrace {
    pub pcap: Vec<u8>,
    pub manifest: ScenarioManifest,
}

struct PreparedSource {
    qtypes: Vec<QType>,
    qtype_weights: WeightedIndex<f64>,
    names: Vec<String>,
    name_weights: WeightedIndex<f64>,
    packets: u64,
}

fn check_weights<'a>(
    index: usize,
    what: &str,
    weights: impl Iterator<Item = &'a f64>,
) -> Result<(), GenerateError> {
    let mut any = false;
    for &w in weights {
        if !(w.is_finite() && w >= 0.0) {
            return Err(GenerateError::InvalidBehavior {
                index,
                reason: format!("{what} weight {w} is not a finite non-negative number"),
            });
        }
        any |= w > 0.0;
    }
    if !any {
        return Err(GenerateError::InvalidBehavior {
            index,
            reason: format!("{what} weights are all zero or missing"),
        });
    }
    Ok(())
}

fn prepare(index: usize, b: &SourceBehavior, scope: &DarknetScope) -> Result<PreparedSource, GenerateError> {
    let invalid = |reason: String| GenerateError::InvalidBehavior { index, reason };
    if !(b.rate_pps.is_finite() && b.rate_pps > 0.0) {
        return Err(invalid(format!("rate_pps {} must be positive", b.rate_pps)));
    }
    if b.target_count == 0 {
        return Err(invalid("target_count must be at least 1".into()));
    }
    if let Some(d) = b.duration_s {
        if !(d.is_finite() && d >= 0.0) {
            return Err(invalid(format!("duration_s {d} must be non-negative")));
        }
    }
    if !(b.start_offset_s.is_finite() && b.start_offset_s >= 0.0) {
        return Err(invalid("start_offset_s must be non-negative".into()));
    }
    let packets = match (b.packets, b.duration_s) {
        (Some(n), _) => n,
        (None, Some(d)) => (b.rate_pps * d).round() as u64,
        (None, None) => return Err(invalid("give packets or duration_s".into())),
    };
    if packets == 0 {
        return Err(invalid("source emits no packets".into()));
    }

    check_weights(index, "qtype", b.qtypes.values())?;
    check_weights(index, "domain", b.domains.values())?;
    let mut qtypes = Vec::new();
    for name in b.qtypes.keys() {
        qtypes.push(name.parse::<QType>().map_err(|e| invalid(e.to_string()))?);
    }
    let mut names = Vec::new();
    for name in b.domains.keys() {
        let n = normalize_qname(name);
        encode_name(&n)?;
        names.push(n);
    }
    let unique: HashSet<&String> = names.iter().collect();
    if unique.len() != names.len() {
        return Err(invalid("domains repeat after normalization".into()));
    }
    if names.len() > DEFAULT_DOMAIN_CAP {
        return Err(invalid(format!("more than {DEFAULT_DOMAIN_CAP} domains")));
    }

    let low = DetectionConfig::default().low_rate_max_pps;
    let high = DetectionConfig::default().high_rate_min_pps;
    let weighted_any = b
        .qtypes
        .iter()
        .any(|(t, &w)| w > 0.0 && t.parse::<QType>().ok() == Some(QType::ANY));
    match b.kind {
        BehaviorKind::SpoofedVictimFlood if b.rate_pps < high => {
            return Err(invalid(format!("spoofed victim floods run at ≥ {high} pps")));
        }
        BehaviorKind::CompromisedHost if !(b.rate_pps > low && b.rate_pps < high) => {
            return Err(invalid(format!("compromised hosts run between {low} and {high} pps")));
        }
        BehaviorKind::Scanner if b.rate_pps > low => {
            return Err(invalid(format!("scanners run at ≤ {low} pps")));
        }
        BehaviorKind::Misconfiguration if b.target_count != 1 => {
            return Err(invalid("misconfiguration targets exactly one address".into()));
        }
        BehaviorKind::NonAnyNoise if weighted_any => {
            return Err(invalid("non-ANY noise cannot weight ANY".into()));
        }
        _ => {}
    }

    let available = scope.address_count();
    if b.target_count > available {
        return Err(GenerateError::ScopeTooSmall {
            index,
            src_ip: b.src_ip,
            wanted: b.target_count,
            available,
        });
    }

    Ok(PreparedSource {
        qtype_weights: WeightedIndex::new(b.qtypes.values().copied()).map_err(|e| invalid(e.to_string()))?,
        qtypes,
        name_weights: WeightedIndex::new(b.domains.values().copied()).map_err(|e| invalid(e.to_string()))?,
        names,
        packets,
    })
}

fn plan_source(
    index: usize,
    b: &SourceBehavior,
    prep: &PreparedSource,
    scope: &DarknetScope,
    epoch_s: u64,
    seed: u64,
) -> Vec<PlannedPacket> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let targets: Vec<Ipv4Addr> =
        rand::seq::index::sample(&mut rng, scope.address_count() as usize, b.target_count as usize)
            .into_iter()
            .map(|i| scope.nth_address(i as u64).expect("index within scope"))
            .collect();

    let flash = b.duration_s == Some(0.0);
    let mut t_us = epoch_s * 1_000_000 + (b.start_offset_s * 1e6).round() as u64;
    let mut out = Vec::with_capacity(prep.packets as usize);
    for seq in 0..prep.packets {
        if seq > 0 && !flash {
            let u: f64 = rng.gen();
            let gap_s = -(1.0 - u).ln() / b.rate_pps;
            t_us += (gap_s * 1e6).round() as u64;
        }
        let qtype = prep.qtypes[prep.qtype_weights.sample(&mut rng)];
        let qname = prep.names[prep.name_weights.sample(&mut rng)].clone();
        out.push(PlannedPacket {
            source: index,
            seq,
            ts: Timestamp::from_micros(t_us),
            src_ip: b.src_ip,
            dst_ip: targets[(seq % b.target_count) as usize],
            src_port: rng.gen_range(1024..=65535),
            txid: rng.gen(),
            qtype,
            qname,
        });
    }
    out
}

/// Plans, labels and writes a scenario. Identical inputs give identical
/// bytes and manifest.
pub fn generate(
    scenario: &Scenario,
    scope: &DarknetScope,
    seed: u64,
    rules: &VerdictRules,
) -> Result<GeneratedTrace, GenerateError> {
    if scenario.bucket_width_s == 0 {
        return Err(GenerateError::InvalidScenario("bucket_width_s must be positive".into()));
    }
    let mut seen = HashSet::new();
    for b in &scenario.sources {
        if !seen.insert(b.src_ip) {
            return Err(GenerateError::InvalidScenario(format!(
                "source {} listed more than once",
                b.src_ip
            )));
        }
    }

    let mut plan = Vec::new();
    for (i, b) in scenario.sources.iter().enumerate() {
        let prep = prepare(i, b, scope)?;
        plan.extend(plan_source(i, b, &prep, scope, scenario.epoch_s, seed));
    }
    plan.sort_by_key(|p| (p.ts, p.source, p.seq));

    let mut frames = Vec::with_capacity(plan.len());
    for p in &plan {
        let dns = encode_dns_query(&p.qname, p.qtype, p.txid)?;
        frames.push(build_query_frame(p.src_ip, p.dst_ip, p.src_port, p.seq as u16, &dns));
    }

    let manifest = ScenarioManifest::from_plan(scenario, scope, seed, rules, &plan, &frames);

    let mut writer = PcapWriter::new(Vec::new(), LinkType::Ethernet, 65_535)?;
    for (p, frame) in plan.iter().zip(&frames) {
        writer.write_frame(p.ts, frame)?;
    }
    Ok(GeneratedTrace {
        pcap: writer.into_inner(),
        manifest,
    })
}
