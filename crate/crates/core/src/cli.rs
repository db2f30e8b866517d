//! Command-line pipeline: dictionary building, domain classification,
//! detection, aggregation, simulation, and reporting, composed via files.
//!
//! Every subcommand writes only into the chosen output directory, and all
//! outputs are deterministic for fixed inputs, salt, and seeds unless the
//! `--stamp` provenance header is requested.

use crate::aggregate;
use crate::cert;
use crate::config::{DetectorConfig, VantageMode};
use crate::dates::{format_ts, BinLength, DateRange};
use crate::detector::{run_detection, DetectionEvent};
use crate::dictionary::{
    self, classify_domains, derive_rules, disjointness_check, extract_device_domains,
    prune_shared, read_ground_truth, ClassifierRules, DomainClass, HierarchyConfig,
    IoTDictionary, PortSpec,
};
use crate::error::{Error, Result};
use crate::flow::{FlowReader, FlowRecord};
use crate::pdns::{DnsStore, InfraClass};
use crate::psl::SuffixRules;
use crate::simulate::{
    self, delays_csv, false_positives_csv, generate_ground_truth, run_crosscheck, sample_stream,
    DeviceProfile, ExperimentSpec, SamplerConfig, TrafficSchedule,
};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};

/// Salt used by simulation-only commands when none is configured; synthetic
/// subscribers need no secrecy, but the detector still requires a key.
const SIMULATION_SALT: &str = "simulated-salt";

#[derive(Debug, Parser)]
#[command(
    name = "iotscope",
    version,
    about = "Detect consumer IoT devices in sampled flow data via domain-based signatures"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Vantage point: `isp` (home-network side) or `ixp` (exchange point).
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<VantageMode>,

    /// Evidence fraction D in [0, 1]; overrides each rule's default.
    #[arg(long, global = true)]
    threshold: Option<f64>,

    /// Detection bin length: `hour` or `day`.
    #[arg(long, global = true, value_parser = parse_bin)]
    bin: Option<BinLength>,

    /// Anonymization key for subscriber identifiers.
    #[arg(long, global = true)]
    salt: Option<String>,

    /// Seed for simulation commands.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Packet sampling probability for simulation commands.
    #[arg(long, global = true)]
    q: Option<f64>,

    /// Output directory; created if missing. No command writes elsewhere.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Abort on the first malformed input line (the default behavior).
    #[arg(long, global = true, conflicts_with = "lenient")]
    strict: bool,

    /// Skip malformed input lines, reporting them on stderr.
    #[arg(long, global = true)]
    lenient: bool,

    /// Detector configuration file (TOML: roles, ASN map, thresholds).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Prepend a timestamped provenance header to CSV/text outputs.
    /// Off by default so reruns are byte-identical.
    #[arg(long, global = true)]
    stamp: bool,
}

fn parse_mode(s: &str) -> std::result::Result<VantageMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_bin(s: &str) -> std::result::Result<BinLength, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    s.parse().map_err(|_| format!("`{s}` is not a YYYY-MM-DD date"))
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the detection dictionary from ground truth, DNS history,
    /// certificates, and a hierarchy configuration.
    BuildDict(BuildDictArgs),
    /// Classify domains into primary/support/generic via pattern files.
    ClassifyDomains(ClassifyArgs),
    /// Classify domain hosting infrastructure as dedicated or shared.
    InfraClassify(InfraArgs),
    /// Detect devices per subscriber line in a flow stream.
    Detect(DetectArgs),
    /// Aggregate detection events into population time series.
    Aggregate(AggregateArgs),
    /// Generate synthetic device traffic and its sampled view.
    Simulate(SimulateArgs),
    /// Measure detection delay and false positives under sampling.
    Crosscheck(CrosscheckArgs),
    /// Summarize detection events as a human-readable report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct WindowArgs {
    /// First day of the study window (YYYY-MM-DD, inclusive).
    #[arg(long, value_parser = parse_date)]
    window_start: NaiveDate,
    /// Last day of the study window (YYYY-MM-DD, inclusive).
    #[arg(long, value_parser = parse_date)]
    window_end: NaiveDate,
}

impl WindowArgs {
    fn range(&self) -> Result<DateRange> {
        DateRange::new(self.window_start, self.window_end)
    }
}

#[derive(Debug, Args)]
struct BuildDictArgs {
    /// Ground-truth contact CSV captured from lab devices.
    #[arg(long)]
    ground_truth: PathBuf,
    /// Passive-DNS history (JSONL).
    #[arg(long)]
    pdns: PathBuf,
    /// Certificate scan dataset (JSONL).
    #[arg(long)]
    certs: PathBuf,
    /// Public-suffix rule file.
    #[arg(long)]
    psl: PathBuf,
    /// Domain classification patterns (`<glob> <class>` per line).
    #[arg(long)]
    patterns: PathBuf,
    /// Exact-domain classification overrides.
    #[arg(long)]
    overrides: Option<PathBuf>,
    /// Hierarchy configuration (JSON).
    #[arg(long)]
    hierarchy: PathBuf,
    #[command(flatten)]
    window: WindowArgs,
    /// Accept certificates whose extra SANs leave the domain's family.
    #[arg(long)]
    allow_foreign_sans: bool,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    /// Domains to classify, one per line.
    #[arg(long)]
    domains: PathBuf,
    #[arg(long)]
    patterns: PathBuf,
    #[arg(long)]
    overrides: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InfraArgs {
    /// Domains to classify, one per line.
    #[arg(long)]
    domains: PathBuf,
    #[arg(long)]
    pdns: PathBuf,
    #[arg(long)]
    psl: PathBuf,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(Debug, Args)]
struct DetectArgs {
    /// Dictionary produced by build-dict.
    #[arg(long)]
    dictionary: PathBuf,
    /// Flow CSV file; repeat for several files.
    #[arg(long, required = true)]
    flows: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct AggregateArgs {
    /// Detection events (JSONL) from detect.
    #[arg(long)]
    events: PathBuf,
    /// subscriber,prefix map from detect; enables prefix-level series.
    #[arg(long)]
    prefixes: Option<PathBuf>,
    /// Cap the cumulative series at this many days.
    #[arg(long)]
    horizon_days: Option<usize>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Device profiles (JSON list).
    #[arg(long)]
    profiles: PathBuf,
    /// Hours of traffic to generate.
    #[arg(long, default_value_t = 24)]
    hours: u32,
    /// `active`, `idle`, or a comma-separated hourly cycle.
    #[arg(long, default_value = "active")]
    schedule: String,
    /// Generation epoch (Unix seconds).
    #[arg(long, default_value_t = simulate::DEFAULT_START)]
    start_ts: i64,
    /// Tumbling window merging sessions into flow records.
    #[arg(long, default_value_t = 60)]
    window_secs: u32,
}

#[derive(Debug, Args)]
struct CrosscheckArgs {
    /// Device profiles (JSON list).
    #[arg(long)]
    profiles: PathBuf,
    /// Dictionary produced by build-dict.
    #[arg(long)]
    dictionary: PathBuf,
    /// Experiment spec (JSON: d_grid, q, duration_hours, seeds, ...).
    #[arg(long)]
    spec: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Detection events (JSONL) from detect.
    #[arg(long)]
    events: PathBuf,
}

/// Parse arguments from the process environment and run; returns the exit
/// code (0 success, 2 input error, 3 invariant violation, 4 config error).
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Entry point for tests: run with explicit arguments.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => match dispatch(&cli) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Err(e) => {
            let _ = e.print();
            2
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("threshold must be in [0, 1], got {t}")));
        }
    }
    match &cli.command {
        Command::BuildDict(args) => cmd_build_dict(cli, args),
        Command::ClassifyDomains(args) => cmd_classify_domains(cli, args),
        Command::InfraClassify(args) => cmd_infra_classify(cli, args),
        Command::Detect(args) => cmd_detect(cli, args),
        Command::Aggregate(args) => cmd_aggregate(cli, args),
        Command::Simulate(args) => cmd_simulate(cli, args),
        Command::Crosscheck(args) => cmd_crosscheck(cli, args),
        Command::Report(args) => cmd_report(cli, args),
    }
}

// ---- output helpers -----------------------------------------------------

impl Cli {
    fn write_text(&self, name: &str, content: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        let mut file = std::fs::File::create(&path)?;
        if self.stamp {
            writeln!(file, "# generated {}", chrono::Utc::now().to_rfc3339())?;
        }
        file.write_all(content.as_bytes())?;
        Ok(())
    }

    /// JSON outputs are never stamped; a comment line would break parsers.
    fn write_json(&self, name: &str, content: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join(name), content)?;
        Ok(())
    }

    fn detector_config(&self) -> Result<DetectorConfig> {
        let mut cfg = match &self.config {
            Some(path) => DetectorConfig::from_file(path)?,
            None => DetectorConfig::default(),
        };
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(bin) = self.bin {
            cfg.bin = bin;
        }
        if let Some(t) = self.threshold {
            cfg.threshold = Some(t);
        }
        if let Some(salt) = &self.salt {
            cfg.salt = salt.as_bytes().to_vec();
        }
        Ok(cfg)
    }

    /// Like `detector_config`, with the simulation fallback salt.
    fn simulation_config(&self) -> Result<DetectorConfig> {
        let mut cfg = self.detector_config()?;
        if cfg.salt.is_empty() {
            cfg.salt = SIMULATION_SALT.as_bytes().to_vec();
        }
        if cfg.roles.subscriber_ranges.is_empty() {
            // Synthetic subscribers live in the shared-address-space range
            // unless the configuration says otherwise.
            cfg.roles.subscriber_ranges = vec!["100.64.0.0/10".parse()?];
        }
        Ok(cfg)
    }

    fn report_skipped(&self, path: &Path, skipped: &[(usize, String)]) {
        for (line, reason) in skipped {
            eprintln!("{}:{line}: skipped: {reason}", path.display());
        }
    }

    /// Default sampling probability per vantage mode: exchange points sample
    /// an order of magnitude sparser.
    fn sampling_q(&self) -> f64 {
        self.q.unwrap_or(match self.mode.unwrap_or(VantageMode::Isp) {
            VantageMode::Isp => 0.001,
            VantageMode::Ixp => 0.0001,
        })
    }
}

fn read_domain_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_ascii_lowercase())
        .collect())
}

fn load_dictionary(path: &Path) -> Result<IoTDictionary> {
    IoTDictionary::from_file(path)
}

fn read_events(path: &Path) -> Result<Vec<DetectionEvent>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: DetectionEvent = serde_json::from_str(&line)
            .map_err(|e| Error::from(e).at(&path.to_string_lossy(), i + 1))?;
        events.push(ev);
    }
    Ok(events)
}

fn classes_csv(classes: &BTreeMap<String, DomainClass>) -> String {
    let mut out = String::from("domain,class\n");
    for (domain, class) in classes {
        out.push_str(&format!("{domain},{class}\n"));
    }
    out
}

fn infra_csv(infra: &BTreeMap<String, InfraClass>) -> String {
    let mut out = String::from("domain,class\n");
    for (domain, class) in infra {
        let name = match class {
            InfraClass::Dedicated => "dedicated",
            InfraClass::Shared => "shared",
            InfraClass::Insufficient => "insufficient",
        };
        out.push_str(&format!("{domain},{name}\n"));
    }
    out
}

// ---- subcommands --------------------------------------------------------

fn cmd_build_dict(cli: &Cli, args: &BuildDictArgs) -> Result<()> {
    let window = args.window.range()?;
    let lenient = cli.lenient;
    let mut warnings: Vec<String> = Vec::new();

    let (gt, skipped) = read_ground_truth(&args.ground_truth, lenient)?;
    cli.report_skipped(&args.ground_truth, &skipped);
    let stats = extract_device_domains(&gt)?;
    for (device, st) in &stats {
        if st.laconic {
            warnings.push(format!(
                "device {device} is laconic ({} domains)",
                st.domains.len()
            ));
        }
    }

    // Signatures and the merged per-domain port observations.
    let mut signatures: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut ports: BTreeMap<String, BTreeSet<PortSpec>> = BTreeMap::new();
    let mut all_domains: BTreeSet<String> = BTreeSet::new();
    for (device, st) in &stats {
        let domains: BTreeSet<String> = st.domains.keys().cloned().collect();
        all_domains.extend(domains.iter().cloned());
        for (domain, usage) in &st.domains {
            ports.entry(domain.clone()).or_default().extend(&usage.ports);
        }
        signatures.insert(device.clone(), domains);
    }

    let classifier = ClassifierRules::from_files(&args.patterns, args.overrides.as_deref())?;
    let classification = classify_domains(&all_domains, &classifier);
    warnings.extend(classification.warnings.iter().cloned());

    let psl = SuffixRules::from_file(&args.psl)?;
    let (dns, skipped) = DnsStore::from_jsonl(&args.pdns, lenient)?;
    cli.report_skipped(&args.pdns, &skipped);
    let (certs, skipped) = cert::read_certs(&args.certs, lenient)?;
    cli.report_skipped(&args.certs, &skipped);

    let days: Vec<NaiveDate> = window.days().collect();
    let mut infra: BTreeMap<String, InfraClass> = BTreeMap::new();
    for domain in &all_domains {
        infra.insert(
            domain.clone(),
            dns.classify_domain_infra(domain, &days, &psl),
        );
    }

    let pruned = prune_shared(&signatures, &infra, &classification.classes);
    for excluded in &pruned.excluded {
        warnings.push(format!(
            "device {} excluded: {}",
            excluded.device_id, excluded.reason
        ));
    }

    let retained_domains: BTreeSet<String> = pruned
        .retained
        .values()
        .flat_map(|set| set.iter().cloned())
        .collect();
    let endpoints = dictionary::build_daily_endpoint_sets(
        &retained_domains,
        &ports,
        &dns,
        &certs,
        &window,
        &psl,
        args.allow_foreign_sans,
    )?;

    let hierarchy = HierarchyConfig::from_file(&args.hierarchy)?;
    let build = derive_rules(
        &pruned.retained,
        &classification.classes,
        &endpoints.daily,
        &hierarchy,
        window,
    )?;
    warnings.extend(build.warnings.iter().cloned());
    let overlaps = disjointness_check(&build.dictionary);

    cli.write_json("dictionary.json", &build.dictionary.to_json_string())?;
    cli.write_text("classes.csv", &classes_csv(&classification.classes))?;
    cli.write_text("infra.csv", &infra_csv(&infra))?;
    cli.write_json(
        "cert_resolved.json",
        &(serde_json::to_string_pretty(&endpoints.cert_resolved)? + "\n"),
    )?;
    cli.write_json(
        "exclusions.json",
        &(serde_json::to_string_pretty(&pruned)? + "\n"),
    )?;
    cli.write_json(
        "disjointness.json",
        &(serde_json::to_string_pretty(&overlaps)? + "\n"),
    )?;
    cli.write_text(
        "build_warnings.txt",
        &warnings
            .iter()
            .map(|w| w.as_str())
            .chain(std::iter::once(""))
            .collect::<Vec<_>>()
            .join("\n"),
    )?;
    eprintln!(
        "dictionary: {} rules over {} devices ({} excluded, {} rule overlaps)",
        build.dictionary.rules.len(),
        pruned.retained.len(),
        pruned.excluded.len(),
        overlaps.len()
    );
    Ok(())
}

fn cmd_classify_domains(cli: &Cli, args: &ClassifyArgs) -> Result<()> {
    let domains = read_domain_list(&args.domains)?;
    let classifier = ClassifierRules::from_files(&args.patterns, args.overrides.as_deref())?;
    let classification = classify_domains(&domains, &classifier);
    for warning in &classification.warnings {
        eprintln!("warning: {warning}");
    }
    cli.write_text("classes.csv", &classes_csv(&classification.classes))
}

fn cmd_infra_classify(cli: &Cli, args: &InfraArgs) -> Result<()> {
    let window = args.window.range()?;
    let domains = read_domain_list(&args.domains)?;
    let psl = SuffixRules::from_file(&args.psl)?;
    let (dns, skipped) = DnsStore::from_jsonl(&args.pdns, cli.lenient)?;
    cli.report_skipped(&args.pdns, &skipped);
    let days: Vec<NaiveDate> = window.days().collect();
    let mut infra = BTreeMap::new();
    for domain in &domains {
        infra.insert(
            domain.clone(),
            dns.classify_domain_infra(domain, &days, &psl),
        );
    }
    cli.write_text("infra.csv", &infra_csv(&infra))
}

fn read_flow_files(paths: &[PathBuf], lenient: bool, cli: &Cli) -> Result<Vec<FlowRecord>> {
    let mut flows = Vec::new();
    for path in paths {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::MissingInput(format!("{}: {e}", path.display()))
        })?;
        let reader = std::io::BufReader::new(file);
        let (mut records, skipped) =
            FlowReader::new(reader, &path.to_string_lossy(), lenient).read_all()?;
        cli.report_skipped(path, &skipped);
        flows.append(&mut records);
    }
    Ok(flows)
}

fn summary_csv(events: &[DetectionEvent], dict: &IoTDictionary) -> String {
    use crate::detector::Usage;
    // (bin, label) -> (subscribers, active subscribers).
    let mut subs: BTreeMap<(i64, &str), BTreeSet<&crate::roles::SubscriberId>> = BTreeMap::new();
    let mut active: BTreeMap<(i64, &str), BTreeSet<&crate::roles::SubscriberId>> = BTreeMap::new();
    for ev in events {
        subs.entry((ev.bin_start, &ev.rule))
            .or_default()
            .insert(&ev.subscriber);
        if ev.usage == Usage::Active {
            active
                .entry((ev.bin_start, &ev.rule))
                .or_default()
                .insert(&ev.subscriber);
        }
    }
    let mut out = String::from("bin,label,level,subscribers,active_subscribers\n");
    for ((bin, label), set) in &subs {
        let level = dict
            .rules
            .get(*label)
            .map(|r| r.level.to_string())
            .unwrap_or_else(|| "unknown".to_string());
        let active_count = active.get(&(*bin, *label)).map_or(0, BTreeSet::len);
        out.push_str(&format!(
            "{},{label},{level},{},{active_count}\n",
            format_ts(*bin),
            set.len()
        ));
    }
    out
}

fn cmd_detect(cli: &Cli, args: &DetectArgs) -> Result<()> {
    let dict = load_dictionary(&args.dictionary)?;
    let cfg = cli.detector_config()?;
    let flows = read_flow_files(&args.flows, cli.lenient, cli)?;
    let run = run_detection(&flows, &dict, &cfg)?;
    if run.flows_without_day > 0 {
        eprintln!(
            "note: {} flows fell on days outside the dictionary window",
            run.flows_without_day
        );
    }
    let mut events_out = String::new();
    for ev in &run.events {
        events_out.push_str(&serde_json::to_string(ev)?);
        events_out.push('\n');
    }
    cli.write_json("events.jsonl", &events_out)?;
    cli.write_text("summary.csv", &summary_csv(&run.events, &dict))?;
    let mut prefixes = String::from("subscriber,prefix\n");
    for (sub, prefix) in &run.store.prefixes {
        prefixes.push_str(&format!("{sub},{prefix}\n"));
    }
    cli.write_text("prefixes.csv", &prefixes)?;
    eprintln!(
        "detected {} events across {} flows",
        run.events.len(),
        flows.len()
    );
    Ok(())
}

fn read_prefix_map(
    path: &Path,
) -> Result<BTreeMap<crate::roles::SubscriberId, crate::roles::PrefixId>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line == "subscriber,prefix" || line.trim().is_empty() {
            continue;
        }
        let (sub, prefix) = line.split_once(',').ok_or_else(|| {
            Error::Parse {
                field: "prefixes",
                reason: "expected subscriber,prefix".into(),
            }
            .at(&path.to_string_lossy(), i + 1)
        })?;
        map.insert(sub.parse()?, prefix.parse()?);
    }
    Ok(map)
}

fn cmd_aggregate(cli: &Cli, args: &AggregateArgs) -> Result<()> {
    let events = read_events(&args.events)?;
    let hourly = aggregate::unique_subscribers_per_bin(&events);
    cli.write_text("fig7_hourly.csv", &aggregate::hourly_csv(&hourly))?;

    let cumulative = aggregate::cumulative_subscribers(&events, args.horizon_days);
    let prefix_series = match &args.prefixes {
        Some(path) => {
            let map = read_prefix_map(path)?;
            Some(aggregate::aggregate_prefixes(&events, &map, args.horizon_days)?)
        }
        None => None,
    };
    cli.write_text(
        "fig9_cumulative.csv",
        &aggregate::cumulative_csv(&cumulative, prefix_series.as_ref()),
    )?;

    // The per-AS distribution only exists for exchange-point events; a
    // header-only file keeps the output shape stable elsewhere.
    let with_asn = events.iter().filter(|e| e.asn.is_some()).count();
    let fig11 = if with_asn == events.len() && !events.is_empty() {
        aggregate::asn_ecdf_csv(&aggregate::per_asn_distribution(&events)?)
    } else if with_asn == 0 {
        String::from("label,asn,subscribers,share_pct,ecdf\n")
    } else {
        return Err(Error::MissingAsn(format!(
            "{} of {} events lack an ASN annotation",
            events.len() - with_asn,
            events.len()
        )));
    };
    cli.write_text("fig11_asn_ecdf.csv", &fig11)?;
    Ok(())
}

fn read_profiles(path: &Path) -> Result<Vec<DeviceProfile>> {
    let text = std::fs::read_to_string(path)?;
    let profiles: Vec<DeviceProfile> = serde_json::from_str(&text)?;
    if profiles.is_empty() {
        return Err(Error::EmptyInput);
    }
    for p in &profiles {
        p.validate()?;
    }
    Ok(profiles)
}

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let profiles = read_profiles(&args.profiles)?;
    let schedule: TrafficSchedule = args.schedule.parse()?;
    let seed = cli.seed.unwrap_or(1);
    let q = cli.sampling_q();
    let (events, flows) = generate_ground_truth(
        &profiles,
        args.hours,
        &schedule,
        seed,
        args.start_ts,
        args.window_secs,
    )?;
    let sampled = sample_stream(&flows, &SamplerConfig { q, seed: seed ^ 1 })?;

    let mut gt_csv = String::from(dictionary::GROUND_TRUTH_CSV_HEADER);
    gt_csv.push('\n');
    for ev in &events {
        gt_csv.push_str(&ev.to_csv_line());
        gt_csv.push('\n');
    }
    cli.write_text("gt_events.csv", &gt_csv)?;
    cli.write_text("flows.csv", &flows_csv(&flows))?;
    cli.write_text("sampled_flows.csv", &flows_csv(&sampled))?;

    // Visibility of the ground truth through the sampled stream.
    let mut ip_domains: BTreeMap<IpAddr, BTreeSet<String>> = BTreeMap::new();
    for profile in &profiles {
        for d in &profile.domains {
            ip_domains.entry(d.ip).or_default().insert(d.domain.clone());
        }
    }
    let gt_obs = aggregate::observations_from_flows(&flows);
    let sampled_obs = aggregate::observations_from_flows(&sampled);
    let stats = aggregate::visibility_stats(&gt_obs, &sampled_obs, &ip_domains)?;
    cli.write_text("fig3a_visibility.csv", &aggregate::visibility_csv(&stats))?;
    let mut series = Vec::new();
    for top in [0.1, 0.2, 0.3] {
        series.push(aggregate::heavy_hitter_visibility(&gt_obs, &sampled_obs, top)?);
    }
    cli.write_text("fig4_heavyhitter.csv", &aggregate::heavy_hitter_csv(&series))?;
    eprintln!(
        "generated {} sessions -> {} flows, {} after sampling at q={q}",
        events.len(),
        flows.len(),
        sampled.len()
    );
    Ok(())
}

fn flows_csv(flows: &[FlowRecord]) -> String {
    let mut out = String::from(crate::flow::FLOW_CSV_HEADER);
    out.push('\n');
    for flow in flows {
        out.push_str(&flow.to_csv_line());
        out.push('\n');
    }
    out
}

fn cmd_crosscheck(cli: &Cli, args: &CrosscheckArgs) -> Result<()> {
    let profiles = read_profiles(&args.profiles)?;
    let dict = load_dictionary(&args.dictionary)?;
    let text = std::fs::read_to_string(&args.spec)?;
    let mut spec: ExperimentSpec = serde_json::from_str(&text)?;
    if let Some(q) = cli.q {
        spec.q = q;
    }
    if let Some(seed) = cli.seed {
        spec.seeds = vec![seed];
    }
    let cfg = cli.simulation_config()?;
    let report = run_crosscheck(&profiles, &dict, &spec, &cfg)?;
    cli.write_text("delays.csv", &delays_csv(&report))?;
    cli.write_text("false_positives.csv", &false_positives_csv(&report))?;
    let detected = report.delays.iter().filter(|r| r.delay.is_some()).count();
    eprintln!(
        "crosscheck: {detected}/{} (rule, D, seed) cells detected, {} false positives",
        report.delays.len(),
        report.false_positives.len()
    );
    Ok(())
}

fn cmd_report(cli: &Cli, args: &ReportArgs) -> Result<()> {
    use crate::detector::Usage;
    let events = read_events(&args.events)?;
    let mut out = String::new();
    out.push_str("detection report\n================\n\n");
    let subscribers: BTreeSet<_> = events.iter().map(|e| &e.subscriber).collect();
    let rules: BTreeSet<_> = events.iter().map(|e| &e.rule).collect();
    out.push_str(&format!(
        "events: {}\nsubscriber lines: {}\nrules fired: {}\n\n",
        events.len(),
        subscribers.len(),
        rules.len()
    ));
    // Per rule: events, subscribers, active subscribers, terminal share.
    out.push_str(&format!(
        "{:<28} {:<13} {:>7} {:>12} {:>8} {:>9}\n",
        "rule", "level", "events", "subscribers", "active", "terminal"
    ));
    let mut per_rule: BTreeMap<&str, (String, u64, BTreeSet<&crate::roles::SubscriberId>, BTreeSet<&crate::roles::SubscriberId>, u64)> =
        BTreeMap::new();
    for ev in &events {
        let entry = per_rule.entry(&ev.rule).or_insert_with(|| {
            (ev.level.to_string(), 0, BTreeSet::new(), BTreeSet::new(), 0)
        });
        entry.1 += 1;
        entry.2.insert(&ev.subscriber);
        if ev.usage == Usage::Active {
            entry.3.insert(&ev.subscriber);
        }
        if ev.terminal {
            entry.4 += 1;
        }
    }
    for (rule, (level, count, subs, active, terminal)) in &per_rule {
        out.push_str(&format!(
            "{rule:<28} {level:<13} {count:>7} {:>12} {:>8} {terminal:>9}\n",
            subs.len(),
            active.len()
        ));
    }
    cli.write_text("report.txt", &out)
}
