//! Scenario builders and a deliberately naive reference implementation used
//! to check the real pipeline.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::net::Ipv4Addr;

use darkamp::detect::DetectionConfig;
use darkamp::dns::{parse_dns_query, DnsOutcome, QType};
use darkamp::flow::{FlowKey, FlowSummary, DEFAULT_DOMAIN_CAP};
use darkamp::packet::{decode_frame, Decoded};
use darkamp::pcap::parse_pcap_stream;
use darkamp::pcap::PcapReader;
use darkamp::synth::{BehaviorKind, GeneratedTrace, ManifestPacket, Scenario, SourceBehavior};
use darkamp::TldDatabase;
use rand::Rng;

pub const DARKNET: [&str; 2] = ["10.0.0.0/16", "172.16.0.0/20"];

#[allow(clippy::too_many_arguments)]
pub fn source(
    kind: BehaviorKind,
    src_ip: Ipv4Addr,
    target_count: u64,
    rate_pps: f64,
    packets: Option<u64>,
    duration_s: Option<f64>,
    start_offset_s: f64,
    qtypes: &[(&str, f64)],
    domains: &[(&str, f64)],
) -> SourceBehavior {
    SourceBehavior {
        kind,
        src_ip,
        target_count,
        rate_pps,
        packets,
        duration_s,
        start_offset_s,
        qtypes: qtypes.iter().map(|(k, w)| (k.to_string(), *w)).collect(),
        domains: domains.iter().map(|(k, w)| (k.to_string(), *w)).collect(),
    }
}

const ANY: &[(&str, f64)] = &[("ANY", 1.0)];
const ROOT: &[(&str, f64)] = &[(".", 1.0)];

fn ip(a: u8, b: u8, c: u8, d: u8) -> Ipv4Addr {
    Ipv4Addr::new(a, b, c, d)
}

/// Ten attacks (3 High with one flash, 4 Medium, 3 Low) and fifty
/// look-alikes that must not be flagged.
pub fn labeled_scenario() -> Scenario {
    use BehaviorKind::*;
    let mut s = vec![
        source(SpoofedVictimFlood, ip(203, 0, 113, 1), 3000, 20_000.0, None, Some(2.0), 10.0, ANY, ROOT),
        source(
            SpoofedVictimFlood,
            ip(203, 0, 113, 2),
            1500,
            12_000.0,
            None,
            Some(3.0),
            400.0,
            &[("ANY", 9.0), ("A", 1.0)],
            &[(".", 2.0), ("isc.org", 1.0)],
        ),
        source(SpoofedVictimFlood, ip(203, 0, 113, 3), 800, 50_000.0, Some(800), Some(0.0), 900.0, ANY, ROOT),
        source(CompromisedHost, ip(198, 51, 100, 1), 400, 5.0, None, Some(600.0), 0.0, ANY, &[("ripe.net", 1.0)]),
        source(CompromisedHost, ip(198, 51, 100, 2), 250, 60.0, None, Some(90.0), 120.0, ANY, ROOT),
        source(
            CompromisedHost,
            ip(198, 51, 100, 3),
            900,
            800.0,
            None,
            Some(10.0),
            300.0,
            &[("ANY", 3.0), ("TXT", 1.0)],
            &[(".", 1.0), ("example.com", 1.0)],
        ),
        source(CompromisedHost, ip(198, 51, 100, 4), 2000, 2500.0, None, Some(4.0), 1200.0, ANY, &[("ietf.org", 1.0)]),
        source(Scanner, ip(192, 0, 2, 1), 40, 0.1, Some(40), None, 0.0, ANY, ROOT),
        source(Scanner, ip(192, 0, 2, 2), 60, 0.2, Some(60), None, 30.0, ANY, &[("com", 1.0)]),
        source(Scanner, ip(192, 0, 2, 3), 30, 0.25, Some(30), None, 60.0, ANY, ROOT),
    ];

    let mut n = 0u8;
    let mut next_ip = || {
        n += 1;
        ip(100, 64, 0, n)
    };
    // Misconfiguration: one destination, no matter how many packets.
    for i in 0..15u64 {
        s.push(source(
            Misconfiguration,
            next_ip(),
            1,
            1.0 + i as f64 * 20.0,
            Some(100 + i * 60),
            None,
            i as f64 * 50.0,
            ANY,
            ROOT,
        ));
    }
    // Scanners just under one of the two thresholds.
    for i in 0..15u64 {
        let (targets, packets) = match i % 3 {
            0 => (24, 24),
            1 => (24, 80),
            _ => (100, 24),
        };
        s.push(source(Scanner, next_ip(), targets, 0.3, Some(packets), None, i as f64 * 20.0, ANY, ROOT));
    }
    // Floods of other query types.
    for i in 0..10u64 {
        s.push(source(
            NonAnyNoise,
            next_ip(),
            200 + i * 30,
            100.0 + i as f64 * 300.0,
            Some(600),
            None,
            i as f64 * 30.0,
            &[("A", 4.0), ("TXT", 1.0), ("MX", 1.0), ("RRSIG", 0.2)],
            &[(".", 1.0), ("ripe.net", 1.0)],
        ));
    }
    // ANY floods whose names are not in the root/TLD list.
    for i in 0..10u64 {
        s.push(source(
            CompromisedHost,
            next_ip(),
            150 + i * 10,
            40.0 + i as f64 * 90.0,
            Some(500),
            None,
            i as f64 * 40.0,
            ANY,
            &[("x.notatld", 1.0), ("printer.lan", 1.0), ("corp.internal", 1.0)],
        ));
    }
    Scenario {
        darknet: DARKNET.iter().map(|s| s.to_string()).collect(),
        ..Scenario::new(s)
    }
}

const POOL: &[&str] = &[".", "ripe.net", "isc.org", "com", "example.com", "x.notatld", "printer.lan", "a.b.c.invalid"];

/// A random mix of behaviors totalling `total` packets.
pub fn random_scenario<R: Rng>(rng: &mut R, total: u64) -> Scenario {
    use BehaviorKind::*;
    let mut sources = Vec::new();
    let mut left = total;
    let mut i = 0u32;
    while left > 0 {
        i += 1;
        let src = Ipv4Addr::from(0x6440_0000 + i * 7);
        let start = rng.gen_range(0.0..3600.0);
        let domains: Vec<(&str, f64)> = (0..rng.gen_range(1..4))
            .map(|_| (POOL[rng.gen_range(0..POOL.len())], rng.gen_range(0.1..2.0)))
            .collect::<BTreeMap<_, _>>()
            .into_iter()
            .collect();
        let mut b = match rng.gen_range(0..5) {
            0 => {
                let flash = rng.gen_bool(0.3);
                source(
                    SpoofedVictimFlood,
                    src,
                    rng.gen_range(20..3000),
                    rng.gen_range(5_000.0..50_000.0),
                    Some(rng.gen_range(500..6000)),
                    flash.then_some(0.0),
                    start,
                    ANY,
                    &domains,
                )
            }
            1 => source(
                CompromisedHost,
                src,
                rng.gen_range(1..600),
                rng.gen_range(1.0..4000.0),
                Some(rng.gen_range(10..5000)),
                None,
                start,
                &[("ANY", rng.gen_range(0.5..4.0)), ("A", rng.gen_range(0.0..1.0))],
                &domains,
            ),
            2 => {
                let n = rng.gen_range(10..80);
                source(Scanner, src, rng.gen_range(10..80), rng.gen_range(0.02..0.5), Some(n), None, start, ANY, &domains)
            }
            3 => source(
                Misconfiguration,
                src,
                1,
                rng.gen_range(1.0..200.0),
                Some(rng.gen_range(10..2000)),
                None,
                start,
                ANY,
                &domains,
            ),
            _ => source(
                NonAnyNoise,
                src,
                rng.gen_range(1..500),
                rng.gen_range(1.0..3000.0),
                Some(rng.gen_range(10..3000)),
                None,
                start,
                &[("A", 2.0), ("TXT", 1.0), ("MX", 0.5)],
                &domains,
            ),
        };
        let n = b.packets.unwrap().min(left);
        b.packets = Some(n);
        left -= n;
        sources.push(b);
    }
    Scenario {
        darknet: DARKNET.iter().map(|s| s.to_string()).collect(),
        ..Scenario::new(sources)
    }
}

/// Per-source summaries straight from the packet list: sort, split on idle
/// gaps, count.
pub fn oracle_flows(packets: &[ManifestPacket], db: &TldDatabase, idle_timeout_ns: Option<u64>) -> Vec<FlowSummary> {
    let mut by_src: BTreeMap<Ipv4Addr, Vec<&ManifestPacket>> = BTreeMap::new();
    for p in packets {
        by_src.entry(p.src_ip).or_default().push(p);
    }
    let mut out = Vec::new();
    for (src, mut pkts) in by_src {
        pkts.sort_by_key(|p| p.ts);
        let mut groups: Vec<Vec<&ManifestPacket>> = vec![Vec::new()];
        for p in pkts {
            let current = groups.last_mut().unwrap();
            let split = match (current.last(), idle_timeout_ns) {
                (Some(prev), Some(t)) => p.ts.as_nanos() - prev.ts.as_nanos() > t,
                _ => false,
            };
            if split {
                groups.push(vec![p]);
            } else {
                current.push(p);
            }
        }
        for (segment, g) in groups.into_iter().enumerate() {
            let mut dsts = HashSet::new();
            let mut any_dsts = HashSet::new();
            let mut qtype_counts = BTreeMap::new();
            let mut names: BTreeMap<String, u64> = BTreeMap::new();
            let mut any_queries = 0;
            let mut hit = false;
            for p in &g {
                dsts.insert(p.dst_ip);
                *qtype_counts.entry(p.qtype).or_insert(0) += 1;
                *names.entry(p.qname.clone()).or_insert(0) += 1;
                if p.qtype == QType::ANY {
                    any_queries += 1;
                    any_dsts.insert(p.dst_ip);
                    hit |= db.matches(&p.qname);
                }
            }
            let other: u64 = names.values().skip(DEFAULT_DOMAIN_CAP).sum();
            let domain_counts = names.into_iter().take(DEFAULT_DOMAIN_CAP).collect();
            out.push(FlowSummary {
                key: FlowKey {
                    src_ip: src,
                    segment: segment as u32,
                },
                first_ts: g.first().unwrap().ts,
                last_ts: g.last().unwrap().ts,
                total_queries: g.len() as u64,
                any_queries,
                distinct_dark_dsts: dsts.len() as u64,
                distinct_any_dark_dsts: any_dsts.len() as u64,
                total_frame_bytes: g.iter().map(|p| u64::from(p.frame_bytes)).sum(),
                qtype_counts,
                domain_counts,
                other_domain_queries: other,
                domain_db_hit: hit,
            });
        }
    }
    out
}

pub fn oracle_attacks(flows: &[FlowSummary], cfg: &DetectionConfig) -> BTreeSet<FlowKey> {
    flows
        .iter()
        .filter(|f| {
            f.any_queries >= cfg.min_any_queries
                && f.distinct_any_dark_dsts >= cfg.min_distinct_hosts
                && (f.domain_db_hit || !cfg.require_domain_db_hit)
        })
        .map(|f| f.key)
        .collect()
}

/// Re-parses the capture and compares every packet with the manifest.
/// Returns the number of packets compared.
pub fn round_trip(trace: &GeneratedTrace) -> Result<u64, String> {
    let (frames, _, truncated) = parse_pcap_stream(&trace.pcap).map_err(|e| e.to_string())?;
    if truncated != 0 {
        return Err("capture is truncated".into());
    }
    let reader = PcapReader::new(&trace.pcap[..]).map_err(|e| e.to_string())?;
    let (link, precision) = (reader.link_type(), reader.precision());
    let expected = &trace.manifest.packets;
    if frames.len() != expected.len() || frames.len() as u64 != trace.manifest.total_packets {
        return Err(format!("{} frames but {} manifest packets", frames.len(), expected.len()));
    }
    for (i, (frame, want)) in frames.iter().zip(expected).enumerate() {
        let pkt = match decode_frame(frame, link, precision) {
            Ok(Decoded::Packet(p)) => p,
            other => return Err(format!("packet {i}: decoded as {other:?}")),
        };
        let q = match parse_dns_query(pkt.udp_payload) {
            Ok(DnsOutcome::Query(q)) => q,
            other => return Err(format!("packet {i}: dns {other:?}")),
        };
        let got = ManifestPacket {
            ts: pkt.timestamp,
            src_ip: pkt.src_ip,
            dst_ip: pkt.dst_ip,
            qname: q.qname,
            qtype: q.qtype,
            frame_bytes: pkt.frame_bytes,
        };
        if &got != want || pkt.dst_port != 53 || !q.is_query {
            return Err(format!("packet {i}: parsed {got:?}, manifest {want:?}"));
        }
    }
    Ok(frames.len() as u64)
}

/// Index of flows by key, for field-by-field comparison.
pub fn by_key(flows: &[FlowSummary]) -> HashMap<FlowKey, &FlowSummary> {
    flows.iter().map(|f| (f.key, f)).collect()
}
