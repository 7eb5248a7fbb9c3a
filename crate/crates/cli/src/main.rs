//! `darkamp`: analyze darknet captures for DNS amplification activity, or
//! generate labeled synthetic captures.
//!
//! Exit status: 0 on success, 1 on internal failure, 2 on usage or input
//! errors.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use darkamp::detect::DetectionConfig;
use darkamp::flow::FlowSettings;
use darkamp::pipeline::{analyze, render_reports, write_reports, AnalysisConfig, PipelineError, Source};
use darkamp::report::load_geo_table;
use darkamp::synth::{generate, GenerateError, Scenario, VerdictRules};
use darkamp::{load_scope, load_tld_db, DarknetScope, TldDatabase};

#[derive(Parser)]
#[command(name = "darkamp", version, about = "DNS amplification analysis of darknet captures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect and characterize amplification sources in pcap files.
    Analyze(AnalyzeArgs),
    /// Write a synthetic capture and its ground-truth manifest.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct ScopeArgs {
    /// Dark prefix in CIDR form; repeatable.
    #[arg(long = "darknet", value_name = "CIDR")]
    darknet: Vec<String>,
    /// File with one CIDR per line ('#' starts a comment).
    #[arg(long, value_name = "PATH")]
    darknet_file: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Capture files, read in order as one window.
    #[arg(required = true, value_name = "PCAP")]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    scope: ScopeArgs,
    /// Root/TLD list; the bundled IANA list is used when absent.
    #[arg(long, env = "DARKAMP_TLD_DB", value_name = "PATH")]
    tld_db: Option<PathBuf>,
    /// Directory for the report files.
    #[arg(long, short, default_value = "darkamp-report", value_name = "DIR")]
    out: PathBuf,
    /// Time-series bucket width in seconds.
    #[arg(long, default_value_t = 3600, value_parser = clap::value_parser!(u64).range(1..))]
    bucket_width: u64,
    /// CSV of `prefix,label` rows for the location column.
    #[arg(long, value_name = "PATH")]
    geo: Option<PathBuf>,
    /// Split a source's traffic after this many idle seconds.
    #[arg(long, value_name = "SECS")]
    flow_timeout: Option<u64>,
    /// Ingestion shards. Output is identical for every value.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// ANY queries a flow needs to count as an attack.
    #[arg(long, default_value_t = 25)]
    min_any: u64,
    /// Distinct dark hosts that must receive ANY queries.
    #[arg(long, default_value_t = 25)]
    min_hosts: u64,
    /// Rates at or below this are Low.
    #[arg(long, default_value_t = 0.5)]
    low_max_pps: f64,
    /// Rates at or above this are High.
    #[arg(long, default_value_t = 4700.0)]
    high_min_pps: f64,
    /// Do not require a requested name from the root/TLD list.
    #[arg(long)]
    no_domain_check: bool,
    /// Query types listed before the OTHER row.
    #[arg(long, default_value_t = 5)]
    top_qtypes: usize,
    /// Rows in domains.csv.
    #[arg(long, default_value_t = 20)]
    top_domains: usize,
}

#[derive(Args)]
struct GenerateArgs {
    /// Scenario JSON.
    #[arg(long, value_name = "PATH")]
    scenario: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Capture to write.
    #[arg(long, short, value_name = "PCAP")]
    out: PathBuf,
    /// Ground-truth manifest to write.
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Replaces the scenario's own dark space.
    #[command(flatten)]
    scope: ScopeArgs,
    /// Root/TLD list the manifest verdicts use.
    #[arg(long, env = "DARKAMP_TLD_DB", value_name = "PATH")]
    tld_db: Option<PathBuf>,
    /// Include every packet in the manifest.
    #[arg(long)]
    manifest_packets: bool,
}

struct Failure {
    code: u8,
    message: String,
}

fn input(message: impl Display) -> Failure {
    Failure {
        code: 2,
        message: message.to_string(),
    }
}

fn internal(message: impl Display) -> Failure {
    Failure {
        code: 1,
        message: message.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn resolve_scope(args: &ScopeArgs, fallback: &[String]) -> Result<Option<DarknetScope>, Failure> {
    let mut cidrs = args.darknet.clone();
    if let Some(path) = &args.darknet_file {
        for line in read_text(path)?.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                cidrs.push(line.to_string());
            }
        }
    }
    if cidrs.is_empty() {
        cidrs = fallback.to_vec();
    }
    if cidrs.is_empty() {
        return Ok(None);
    }
    load_scope(&cidrs).map(Some).map_err(input)
}

fn resolve_db(path: Option<&Path>) -> Result<TldDatabase, Failure> {
    match path {
        None => Ok(TldDatabase::builtin()),
        Some(p) => load_tld_db(&read_text(p)?).map_err(|e| input(format!("{}: {e}", p.display()))),
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Worker => internal(e),
        PipelineError::Output { .. } => internal(e),
        other => input(other),
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let scope = resolve_scope(&args.scope, &[])?
        .ok_or_else(|| input("no dark space given; use --darknet or --darknet-file"))?;
    let db = resolve_db(args.tld_db.as_deref())?;
    let detection = DetectionConfig {
        min_any_queries: args.min_any,
        min_distinct_hosts: args.min_hosts,
        require_domain_db_hit: !args.no_domain_check,
        low_rate_max_pps: args.low_max_pps,
        high_rate_min_pps: args.high_min_pps,
    };
    detection.validate().map_err(input)?;
    let geo = match &args.geo {
        None => None,
        Some(p) => Some(load_geo_table(&read_text(p)?).map_err(|e| input(format!("{}: {e}", p.display())))?),
    };
    let cfg = AnalysisConfig {
        detection,
        flow: FlowSettings::default().with_idle_timeout_secs(args.flow_timeout),
        bucket_width_s: args.bucket_width,
        threads: args.threads,
        top_qtypes: args.top_qtypes,
        top_domains: args.top_domains,
        geo,
        ..AnalysisConfig::new(scope, db)
    };

    // Open everything up front so a bad path fails before any work.
    let mut sources = Vec::with_capacity(args.inputs.len());
    for path in &args.inputs {
        sources.push(Source::open(path).map_err(pipeline_failure)?);
    }
    let names: Vec<String> = args.inputs.iter().map(|p| p.display().to_string()).collect();
    let analysis = analyze(sources, &cfg).map_err(pipeline_failure)?;
    let files = render_reports(&analysis, &cfg, &names).map_err(internal)?;
    write_reports(&args.out, &files).map_err(pipeline_failure)?;

    let s = &analysis.stats;
    eprintln!(
        "{} frames, {} dark DNS queries, {} flows, {} attacks; reports in {}",
        s.frames,
        s.queries,
        analysis.flows.len(),
        analysis.attacks.len(),
        args.out.display()
    );
    for t in &s.truncations {
        eprintln!("warning: {} truncated at byte {}: {}", t.file, t.offset, t.reason);
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Failure> {
    let scenario = Scenario::from_json(&read_text(&args.scenario)?)
        .map_err(|e| input(format!("{}: {e}", args.scenario.display())))?;
    let scope = resolve_scope(&args.scope, &scenario.darknet)?
        .ok_or_else(|| input("scenario has no darknet; use --darknet or --darknet-file"))?;
    let rules = VerdictRules {
        db: resolve_db(args.tld_db.as_deref())?,
        ..VerdictRules::default()
    };
    let mut trace = generate(&scenario, &scope, args.seed, &rules).map_err(|e| match e {
        GenerateError::Io(_) => internal(e),
        other => input(other),
    })?;
    fs::write(&args.out, &trace.pcap).map_err(|e| internal(format!("{}: {e}", args.out.display())))?;
    if let Some(path) = &args.manifest {
        if !args.manifest_packets {
            trace.manifest.packets.clear();
        }
        fs::write(path, trace.manifest.to_json()).map_err(|e| internal(format!("{}: {e}", path.display())))?;
    }
    eprintln!(
        "{} packets from {} sources ({} attacks) written to {}",
        trace.manifest.total_packets,
        trace.manifest.sources.len(),
        trace.manifest.detected_sources().len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Generate(g) => cmd_generate(g),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("darkamp: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
