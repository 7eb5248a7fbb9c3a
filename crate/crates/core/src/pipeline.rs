//! End-to-end analysis: captures in, flows, attacks and report files out.
//!
//! Frames can be spread over worker shards; each shard builds its own flow
//! table and the tables are merged afterwards. The merge is exact, so the
//! result does not depend on the number of shards.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use serde::Serialize;
use thiserror::Error;

use crate::detect::{detect_all, AttackRecord, ConfigError, DetectionConfig, RateCategory};
use crate::dns::{parse_dns_query, DnsError, DnsOutcome, QType};
use crate::flow::{FlowError, FlowSettings, FlowSummary, FlowTable};
use crate::packet::{decode_bytes, Decoded, SkipReason, DNS_PORT};
use crate::pcap::{CapturedFrame, LinkType, PcapError, PcapReader, TsPrecision};
use crate::report::{
    attack_table_csv, attack_table_json, domains_csv, geo_enrich, time_series_csv, top_domains,
    type_distribution, type_distribution_csv, GeoTable, ReportError, SecondHistogram, TimeSeries,
    TypeDistribution,
};
use crate::scope::DarknetScope;
use crate::time::Timestamp;
use crate::tld::TldDatabase;

const BATCH_FRAMES: usize = 2048;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Input { path: String, source: PcapError },
    #[error("{path}: {source}")]
    Open { path: String, source: std::io::Error },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("writing {path}: {source}")]
    Output { path: String, source: std::io::Error },
    #[error("ingestion worker panicked")]
    Worker,
}

#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    pub scope: DarknetScope,
    pub db: TldDatabase,
    pub detection: DetectionConfig,
    pub flow: FlowSettings,
    pub bucket_width_s: u64,
    /// Ingestion shards; 0 and 1 both mean single-threaded.
    pub threads: usize,
    pub top_qtypes: usize,
    pub top_domains: usize,
    pub geo: Option<GeoTable>,
}

impl AnalysisConfig {
    pub fn new(scope: DarknetScope, db: TldDatabase) -> Self {
        AnalysisConfig {
            scope,
            db,
            detection: DetectionConfig::default(),
            flow: FlowSettings::default(),
            bucket_width_s: 3_600,
            threads: 1,
            top_qtypes: 5,
            top_domains: 20,
            geo: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TruncationNote {
    pub file: String,
    pub offset: u64,
    pub reason: String,
}

/// Where every frame went.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub frames: u64,
    pub skipped: BTreeMap<SkipReason, u64>,
    pub malformed_ip: u64,
    pub not_dns_port: u64,
    pub out_of_scope: u64,
    pub malformed_dns: u64,
    pub compression_loops: u64,
    pub dns_responses: u64,
    pub dns_no_question: u64,
    /// DNS queries to the dark space; the population every report covers.
    pub queries: u64,
    pub truncated_records: u64,
    pub truncations: Vec<TruncationNote>,
}

impl IngestStats {
    fn absorb(&mut self, other: IngestStats) {
        self.frames += other.frames;
        for (k, v) in other.skipped {
            *self.skipped.entry(k).or_insert(0) += v;
        }
        self.malformed_ip += other.malformed_ip;
        self.not_dns_port += other.not_dns_port;
        self.out_of_scope += other.out_of_scope;
        self.malformed_dns += other.malformed_dns;
        self.compression_loops += other.compression_loops;
        self.dns_responses += other.dns_responses;
        self.dns_no_question += other.dns_no_question;
        self.queries += other.queries;
        self.truncated_records += other.truncated_records;
        self.truncations.extend(other.truncations);
    }
}

/// One shard's accumulated state.
#[derive(Debug, Clone)]
pub struct Ingest {
    pub table: FlowTable,
    pub histogram: SecondHistogram,
    pub qtype_totals: BTreeMap<QType, u64>,
    pub stats: IngestStats,
}

impl Ingest {
    pub fn new(settings: FlowSettings) -> Self {
        Ingest {
            table: FlowTable::new(settings),
            histogram: SecondHistogram::default(),
            qtype_totals: BTreeMap::new(),
            stats: IngestStats::default(),
        }
    }

    /// Runs one frame through decode, filtering, DNS parsing and flow update.
    pub fn observe(
        &mut self,
        frame: &[u8],
        ts: Timestamp,
        link: LinkType,
        scope: &DarknetScope,
        db: &TldDatabase,
    ) -> Result<(), FlowError> {
        self.stats.frames += 1;
        let pkt = match decode_bytes(frame, ts, link) {
            Ok(Decoded::Packet(p)) => p,
            Ok(Decoded::Skipped(reason)) => {
                *self.stats.skipped.entry(reason).or_insert(0) += 1;
                return Ok(());
            }
            Err(_) => {
                self.stats.malformed_ip += 1;
                return Ok(());
            }
        };
        if pkt.dst_port != DNS_PORT {
            self.stats.not_dns_port += 1;
            return Ok(());
        }
        if !scope.contains(pkt.dst_ip) {
            self.stats.out_of_scope += 1;
            return Ok(());
        }
        let query = match parse_dns_query(pkt.udp_payload) {
            Ok(DnsOutcome::Query(q)) => q,
            Ok(DnsOutcome::Response) => {
                self.stats.dns_responses += 1;
                return Ok(());
            }
            Ok(DnsOutcome::NoQuestion) => {
                self.stats.dns_no_question += 1;
                return Ok(());
            }
            Err(DnsError::CompressionLoop) => {
                self.stats.compression_loops += 1;
                return Ok(());
            }
            Err(DnsError::MalformedDns(_)) => {
                self.stats.malformed_dns += 1;
                return Ok(());
            }
        };
        self.stats.queries += 1;
        self.histogram.add(pkt.timestamp);
        *self.qtype_totals.entry(query.qtype).or_insert(0) += 1;
        self.table.update(&pkt, &query, db)
    }

    pub fn absorb(&mut self, other: Ingest) -> Result<(), FlowError> {
        self.table.absorb(other.table)?;
        self.histogram.absorb(other.histogram);
        for (k, v) in other.qtype_totals {
            *self.qtype_totals.entry(k).or_insert(0) += v;
        }
        self.stats.absorb(other.stats);
        Ok(())
    }
}

/// A capture to analyse: a display name plus its bytes.
pub struct Source<R> {
    pub name: String,
    pub reader: R,
}

impl Source<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, PipelineError> {
        let file = File::open(path).map_err(|source| PipelineError::Open {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Source {
            name: path.display().to_string(),
            reader: BufReader::with_capacity(1 << 20, file),
        })
    }
}

struct Batch {
    link: LinkType,
    precision: TsPrecision,
    frames: Vec<CapturedFrame>,
}

fn ingest_batch(ingest: &mut Ingest, batch: &Batch, cfg: &AnalysisConfig) -> Result<(), FlowError> {
    for f in &batch.frames {
        ingest.observe(&f.payload, f.timestamp(batch.precision), batch.link, &cfg.scope, &cfg.db)?;
    }
    Ok(())
}

/// Reads every source in order as one logical capture window.
pub fn ingest_sources<R: Read>(sources: Vec<Source<R>>, cfg: &AnalysisConfig) -> Result<Ingest, PipelineError> {
    let shards = cfg.threads.max(1);
    if shards == 1 {
        let mut ingest = Ingest::new(cfg.flow);
        for source in sources {
            let mut reader = open_capture(source.reader, &source.name)?;
            let (link, precision) = (reader.link_type(), reader.precision());
            while let Some(frame) = next_frame(&mut reader, &source.name)? {
                ingest.observe(&frame.payload, frame.timestamp(precision), link, &cfg.scope, &cfg.db)?;
            }
            note_truncation(&mut ingest.stats, &reader, &source.name);
        }
        return Ok(ingest);
    }

    thread::scope(|s| {
        let mut senders = Vec::with_capacity(shards);
        let mut handles = Vec::with_capacity(shards);
        for _ in 0..shards {
            let (tx, rx) = mpsc::sync_channel::<Batch>(4);
            senders.push(tx);
            handles.push(s.spawn(move || -> Result<Ingest, FlowError> {
                let mut ingest = Ingest::new(cfg.flow);
                let mut failure = None;
                for batch in rx {
                    if failure.is_none() {
                        if let Err(e) = ingest_batch(&mut ingest, &batch, cfg) {
                            failure = Some(e);
                        }
                    }
                }
                failure.map_or(Ok(ingest), Err)
            }));
        }

        let mut reader_stats = IngestStats::default();
        let read_result = (|| -> Result<(), PipelineError> {
            let mut next_shard = 0;
            for source in sources {
                let mut reader = open_capture(source.reader, &source.name)?;
                let (link, precision) = (reader.link_type(), reader.precision());
                loop {
                    let mut frames = Vec::with_capacity(BATCH_FRAMES);
                    while frames.len() < BATCH_FRAMES {
                        match next_frame(&mut reader, &source.name)? {
                            Some(f) => frames.push(f),
                            None => break,
                        }
                    }
                    if frames.is_empty() {
                        break;
                    }
                    let batch = Batch {
                        link,
                        precision,
                        frames,
                    };
                    if senders[next_shard].send(batch).is_err() {
                        return Err(PipelineError::Worker);
                    }
                    next_shard = (next_shard + 1) % shards;
                }
                note_truncation(&mut reader_stats, &reader, &source.name);
            }
            Ok(())
        })();
        drop(senders);

        let mut merged = Ingest::new(cfg.flow);
        let mut worker_error = None;
        for h in handles {
            match h.join() {
                Ok(Ok(shard)) => {
                    if worker_error.is_none() {
                        if let Err(e) = merged.absorb(shard) {
                            worker_error = Some(PipelineError::Flow(e));
                        }
                    }
                }
                Ok(Err(e)) => {
                    worker_error.get_or_insert(PipelineError::Flow(e));
                }
                Err(_) => {
                    worker_error.get_or_insert(PipelineError::Worker);
                }
            }
        }
        read_result?;
        if let Some(e) = worker_error {
            return Err(e);
        }
        merged.stats.absorb(reader_stats);
        Ok(merged)
    })
}

fn open_capture<R: Read>(reader: R, name: &str) -> Result<PcapReader<R>, PipelineError> {
    PcapReader::new(reader).map_err(|source| PipelineError::Input {
        path: name.to_string(),
        source,
    })
}

fn next_frame<R: Read>(reader: &mut PcapReader<R>, name: &str) -> Result<Option<CapturedFrame>, PipelineError> {
    reader.next_frame().map_err(|source| PipelineError::Input {
        path: name.to_string(),
        source,
    })
}

fn note_truncation<R: Read>(stats: &mut IngestStats, reader: &PcapReader<R>, name: &str) {
    if let Some(t) = reader.truncation() {
        stats.truncated_records += 1;
        stats.truncations.push(TruncationNote {
            file: name.to_string(),
            offset: t.offset,
            reason: t.reason.to_string(),
        });
    }
}

/// Finished analysis of one capture window.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub flows: Vec<FlowSummary>,
    pub attacks: Vec<AttackRecord>,
    pub stats: IngestStats,
    pub qtype_totals: BTreeMap<QType, u64>,
    pub histogram: SecondHistogram,
}

impl Analysis {
    pub fn from_ingest(ingest: Ingest, cfg: &AnalysisConfig) -> Result<Self, PipelineError> {
        cfg.detection.validate()?;
        let flows = ingest.table.finalize();
        let mut attacks = detect_all(&flows, &cfg.detection);
        if let Some(geo) = &cfg.geo {
            geo_enrich(&mut attacks, geo);
        }
        Ok(Analysis {
            flows,
            attacks,
            stats: ingest.stats,
            qtype_totals: ingest.qtype_totals,
            histogram: ingest.histogram,
        })
    }

    pub fn time_series(&self, bucket_width_s: u64) -> Result<TimeSeries, ReportError> {
        self.histogram.to_series(bucket_width_s)
    }

    pub fn type_distribution(&self, top_n: usize) -> Result<Option<TypeDistribution>, ReportError> {
        match type_distribution(&self.qtype_totals, top_n) {
            Ok(d) => Ok(Some(d)),
            Err(ReportError::EmptyInput) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Name counts summed over every flow.
    pub fn domain_totals(&self) -> BTreeMap<String, u64> {
        let mut totals = BTreeMap::new();
        for f in &self.flows {
            for (name, n) in &f.domain_counts {
                *totals.entry(name.clone()).or_insert(0) += n;
            }
        }
        totals
    }

    pub fn summary(&self, inputs: &[String]) -> RunSummary {
        let mut by_category = CategoryCounts::default();
        for a in &self.attacks {
            match a.category {
                RateCategory::Low => by_category.low += 1,
                RateCategory::Medium => by_category.medium += 1,
                RateCategory::High => by_category.high += 1,
            }
        }
        RunSummary {
            inputs: inputs.to_vec(),
            stats: self.stats.clone(),
            sources: self.flows.iter().map(|f| f.key.src_ip).collect::<std::collections::BTreeSet<_>>().len() as u64,
            flows: self.flows.len() as u64,
            attacks: self.attacks.len() as u64,
            attacks_by_category: by_category,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub stats: IngestStats,
    pub sources: u64,
    pub flows: u64,
    pub attacks: u64,
    pub attacks_by_category: CategoryCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "PascalCase")]
pub struct CategoryCounts {
    pub low: u64,
    pub medium: u64,
    pub high: u64,
}

/// Convenience wrapper: ingest then finalize.
pub fn analyze<R: Read>(sources: Vec<Source<R>>, cfg: &AnalysisConfig) -> Result<Analysis, PipelineError> {
    let ingest = ingest_sources(sources, cfg)?;
    Analysis::from_ingest(ingest, cfg)
}

pub fn analyze_bytes(pcap: &[u8], cfg: &AnalysisConfig) -> Result<Analysis, PipelineError> {
    analyze(
        vec![Source {
            name: "<memory>".to_string(),
            reader: pcap,
        }],
        cfg,
    )
}

pub const REPORT_FILES: [&str; 6] = [
    "attacks.csv",
    "attacks.json",
    "qtype_dist.csv",
    "timeseries.csv",
    "domains.csv",
    "summary.json",
];

/// Rendered report files keyed by file name.
pub fn render_reports(
    analysis: &Analysis,
    cfg: &AnalysisConfig,
    inputs: &[String],
) -> Result<BTreeMap<&'static str, String>, PipelineError> {
    let qtype_csv = match analysis.type_distribution(cfg.top_qtypes)? {
        Some(d) => type_distribution_csv(&d)?,
        None => "qtype,count,percent\n".to_string(),
    };
    let series = analysis.time_series(cfg.bucket_width_s)?;
    let domains = top_domains(&analysis.domain_totals(), cfg.top_domains);
    let mut summary = serde_json::to_string_pretty(&analysis.summary(inputs)).expect("summary serializes");
    summary.push('\n');
    Ok(BTreeMap::from([
        ("attacks.csv", attack_table_csv(&analysis.attacks)?),
        ("attacks.json", attack_table_json(&analysis.attacks)),
        ("qtype_dist.csv", qtype_csv),
        ("timeseries.csv", time_series_csv(&series)?),
        ("domains.csv", domains_csv(&domains)?),
        ("summary.json", summary),
    ]))
}

pub fn write_reports(dir: &Path, files: &BTreeMap<&'static str, String>) -> Result<Vec<PathBuf>, PipelineError> {
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::Output {
        path: dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|source| PipelineError::Output {
            path: path.display().to_string(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcap::PcapWriter;
    use crate::scope::load_scope;
    use crate::synth::{build_query_frame, encode_dns_query};
    use crate::tld::load_tld_db;

    fn cfg() -> AnalysisConfig {
        AnalysisConfig::new(load_scope(&["10.0.0.0/16"]).unwrap(), load_tld_db("net\n.").unwrap())
    }

    fn capture(frames: &[(u64, Vec<u8>)]) -> Vec<u8> {
        let mut w = PcapWriter::new(Vec::new(), LinkType::Ethernet, 65_535).unwrap();
        for (s, f) in frames {
            w.write_frame(Timestamp::from_secs(*s), f).unwrap();
        }
        w.into_inner()
    }

    fn query(dst: [u8; 4], name: &str, qtype: QType) -> Vec<u8> {
        build_query_frame(
            "198.51.100.1".parse().unwrap(),
            dst.into(),
            3333,
            1,
            &encode_dns_query(name, qtype, 7).unwrap(),
        )
    }

    #[test]
    fn frames_are_routed_to_counters() {
        let mut outside = query([10, 1, 0, 1], ".", QType::ANY);
        outside[30] = 11; // dst 11.1.0.1
        let mut response = query([10, 0, 0, 2], ".", QType::ANY);
        response[42 + 2] |= 0x80;
        let mut arp = query([10, 0, 0, 3], ".", QType::ANY);
        arp[12..14].copy_from_slice(&[0x08, 0x06]);
        let mut port = query([10, 0, 0, 4], ".", QType::ANY);
        port[36..38].copy_from_slice(&80u16.to_be_bytes());
        let frames = vec![
            (0, query([10, 0, 0, 1], ".", QType::ANY)),
            (1, outside),
            (2, response),
            (3, arp),
            (4, port),
            (5, vec![0u8; 10]),
        ];
        let a = analyze_bytes(&capture(&frames), &cfg()).unwrap();
        assert_eq!(a.stats.frames, 6);
        assert_eq!(a.stats.queries, 1);
        assert_eq!(a.stats.out_of_scope, 1);
        assert_eq!(a.stats.dns_responses, 1);
        assert_eq!(a.stats.not_dns_port, 1);
        assert_eq!(a.stats.skipped.get(&SkipReason::Arp), Some(&1));
        assert_eq!(a.stats.skipped.get(&SkipReason::TruncatedLink), Some(&1));
        assert_eq!(a.flows.len(), 1);
        assert!(a.attacks.is_empty());
    }

    #[test]
    fn empty_capture_renders_empty_reports() {
        let a = analyze_bytes(&capture(&[]), &cfg()).unwrap();
        let files = render_reports(&a, &cfg(), &[]).unwrap();
        assert_eq!(files.len(), REPORT_FILES.len());
        assert_eq!(files["attacks.json"], "[]\n");
        assert_eq!(files["qtype_dist.csv"], "qtype,count,percent\n");
        assert_eq!(files["timeseries.csv"], "bucket,start,count\n");
        assert_eq!(files["domains.csv"], "rank,domain,count\n");
    }

    #[test]
    fn sharded_ingest_matches_single_thread() {
        let frames: Vec<(u64, Vec<u8>)> = (0..10_000u32)
            .map(|i| {
                let dst = [10, 0, (i % 7) as u8, (i % 251) as u8];
                let qtype = if i % 3 == 0 { QType::A } else { QType::ANY };
                (u64::from(i / 10), query(dst, if i % 5 == 0 { "ripe.net" } else { "." }, qtype))
            })
            .collect();
        let raw = capture(&frames);
        let single = analyze_bytes(&raw, &cfg()).unwrap();
        for threads in [2, 3, 8] {
            let c = AnalysisConfig { threads, ..cfg() };
            let sharded = analyze_bytes(&raw, &c).unwrap();
            assert_eq!(sharded.flows, single.flows);
            assert_eq!(sharded.attacks, single.attacks);
            assert_eq!(sharded.stats, single.stats);
            assert_eq!(render_reports(&sharded, &c, &[]).unwrap(), render_reports(&single, &cfg(), &[]).unwrap());
        }
    }

    #[test]
    fn truncated_file_is_noted() {
        let mut raw = capture(&[(0, query([10, 0, 0, 1], ".", QType::ANY)), (1, query([10, 0, 0, 2], ".", QType::ANY))]);
        raw.truncate(raw.len() - 3);
        let a = analyze_bytes(&raw, &cfg()).unwrap();
        assert_eq!(a.stats.queries, 1);
        assert_eq!(a.stats.truncated_records, 1);
        assert_eq!(a.stats.truncations[0].file, "<memory>");
    }

    #[test]
    fn bad_magic_names_the_input() {
        let err = analyze_bytes(&[0u8; 24], &cfg()).unwrap_err();
        assert!(err.to_string().starts_with("<memory>: not a classic pcap file"), "{err}");
    }
}
