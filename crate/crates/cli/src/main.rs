use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gpumem_core::analyzer::write_block_dump;
use gpumem_core::estimator::{run_pipeline, EstimateError, PipelineConfig};
use gpumem_core::metrics::{read_run_records, MetricsReport};
use gpumem_core::orchestrator::{read_sequence, write_sequence, OrchestratorConfig};
use gpumem_core::sim::fuzz::{random_case, FuzzParams};
use gpumem_core::sim::reference::simulate_reference;
use gpumem_core::sim::{first_divergence, simulate, write_curve, SimConfig, SimOutcome};
use gpumem_core::synth::{generate, SynthSpec, ZeroGradPlacement};
use gpumem_core::trace::{FieldMapping, IngestError, IngestOptions};
use gpumem_core::units::parse_size;
use gpumem_core::Exact;

const EXIT_OOM: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "gpumem", version, about = "Estimate peak GPU memory of a training job from a CPU profiler trace")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Print diagnostics to stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the peak memory of a profiled training job.
    Estimate(EstimateArgs),
    /// Replay an orchestrated event sequence through the allocator model.
    Simulate(SimulateArgs),
    /// Compute MRE, PEF and MCP over a table of recorded runs.
    Metrics(MetricsArgs),
    /// Generate a synthetic trace and its expected block inventory.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Report,
    Curve,
    SequenceDump,
    BlockDump,
}

#[derive(Args)]
struct EstimateArgs {
    /// Trace-event JSON file, optionally gzip-compressed.
    trace: PathBuf,
    /// Target device capacity, e.g. 12GiB or 16000000000.
    #[arg(long, value_parser = parse_capacity)]
    capacity: Option<u64>,
    /// TOML file overriding trace field names and annotation labels.
    #[arg(long, env = "GPUMEM_MAPPING")]
    mapping: Option<PathBuf>,
    /// TOML file overriding allocator constants.
    #[arg(long)]
    sim_config: Option<PathBuf>,
    /// 1-based iteration to analyze.
    #[arg(long, default_value_t = 2)]
    analysis_iteration: usize,
    /// Threads used to parse the trace (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long, value_enum, default_value_t = Format::Report)]
    format: Format,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Sequence file as written by `estimate --format sequence-dump`.
    #[arg(required_unless_present = "fuzz")]
    sequence: Option<PathBuf>,
    #[arg(long, value_parser = parse_capacity)]
    capacity: Option<u64>,
    #[arg(long)]
    sim_config: Option<PathBuf>,
    /// Curve output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also run the naive reference allocator and compare timelines.
    #[arg(long)]
    oracle_check: bool,
    /// Cross-check this many random sequences instead of reading a file.
    #[arg(long, conflicts_with = "sequence")]
    fuzz: Option<u64>,
    /// First seed of the random sequences.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MetricsArgs {
    /// CSV run-record table with a header row.
    runs: PathBuf,
    /// Print exact rationals instead of floating point.
    #[arg(long)]
    exact: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML synth spec (default: the small fixture spec).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, value_enum)]
    zero_grad: Option<ZeroGradArg>,
    /// Trace output file.
    #[arg(long)]
    out: PathBuf,
    /// Inventory sidecar (default: <out>.inventory.csv).
    #[arg(long)]
    inventory: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ZeroGradArg {
    BeforeBackward,
    StartOfIteration,
    Absent,
}

impl From<ZeroGradArg> for ZeroGradPlacement {
    fn from(z: ZeroGradArg) -> Self {
        match z {
            ZeroGradArg::BeforeBackward => ZeroGradPlacement::BeforeBackward,
            ZeroGradArg::StartOfIteration => ZeroGradPlacement::StartOfIteration,
            ZeroGradArg::Absent => ZeroGradPlacement::Absent,
        }
    }
}

fn parse_capacity(text: &str) -> Result<u64, String> {
    match parse_size(text) {
        Ok(0) => Err("capacity must be positive".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(args) => cmd_estimate(args, cli.verbose),
        Command::Simulate(args) => cmd_simulate(args, cli.verbose),
        Command::Metrics(args) => cmd_metrics(args),
        Command::Synth(args) => cmd_synth(args, cli.verbose),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn load_sim_config(path: Option<&Path>, capacity: Option<u64>) -> Result<SimConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            SimConfig::from_toml(&text).map_err(anyhow::Error::msg).with_context(|| format!("in {}", p.display()))?
        }
        None => SimConfig::default(),
    };
    if let Some(c) = capacity {
        cfg.device_capacity_bytes = c;
    }
    Ok(cfg)
}

fn cmd_estimate(args: EstimateArgs, verbose: u8) -> Result<u8> {
    let mapping = match &args.mapping {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read mapping {}", p.display()))?;
            FieldMapping::from_toml(&text).map_err(anyhow::Error::msg).with_context(|| format!("in {}", p.display()))?
        }
        None => FieldMapping::default(),
    };
    let sim = load_sim_config(args.sim_config.as_deref(), None)?;
    let config = PipelineConfig {
        ingest: IngestOptions { threads: args.threads },
        orchestrator: OrchestratorConfig {
            analysis_iteration: args.analysis_iteration,
            ..OrchestratorConfig::default()
        },
        sim,
        capacity_bytes: args.capacity,
    };
    let bytes = fs::read(&args.trace).map_err(|e| {
        anyhow::anyhow!("{} ({})", EstimateError::Ingest(IngestError::Io(e)), args.trace.display())
    })?;
    let run = run_pipeline(&bytes, &mapping, &config)?;
    let report = &run.report;
    if verbose > 0 {
        let d = &report.diagnostics;
        eprintln!(
            "iterations={} blocks={} attributed={} events={} dropped={} rejected={} orphan_frees={} mismatches={}",
            d.iteration_count,
            d.blocks_reconstructed,
            d.blocks_attributed,
            d.events_simulated,
            d.dropped_unrecognized + d.dropped_other_device,
            d.rejected_records,
            d.orphan_frees,
            d.size_mismatches,
        );
    }

    let mut out = output(args.out.as_deref())?;
    match args.format {
        Format::Report => out.write_all(report.to_toml().as_bytes())?,
        Format::Curve => write_curve(&mut out, &report.curve)?,
        Format::SequenceDump => write_sequence(&mut out, &run.sequence)?,
        Format::BlockDump => {
            let mut blocks = run.reconstruction.blocks.clone();
            for classified in &run.blocks {
                blocks[classified.block_id].lifecycle = classified.lifecycle;
            }
            write_block_dump(&mut out, &blocks, &run.parsed.events, &run.forest)?;
        }
    }
    out.flush()?;
    if report.predicted_oom {
        eprintln!(
            "predicted OOM: peak {} bytes exceeds capacity {} bytes",
            report.peak_reserved_bytes,
            report.config.device_capacity_bytes.map_or("?".into(), |c| c.to_string())
        );
        return Ok(EXIT_OOM);
    }
    Ok(0)
}

fn cmd_simulate(args: SimulateArgs, verbose: u8) -> Result<u8> {
    let cfg = load_sim_config(args.sim_config.as_deref(), args.capacity)?;
    if let Some(cases) = args.fuzz {
        let params = FuzzParams::default();
        for seed in args.seed..args.seed + cases {
            let case = random_case(seed, &params);
            let fast = simulate(&case.sequence, &case.config)?;
            let slow = simulate_reference(&case.sequence.events, &case.config)?;
            if let Some(index) = first_divergence(&fast, &slow) {
                eprintln!("seed {seed}: timelines diverge at event {index}");
                return Ok(EXIT_DIVERGENCE);
            }
        }
        println!("{cases} random sequences, timelines identical");
        return Ok(0);
    }

    let path = args.sequence.expect("clap requires a sequence without --fuzz");
    let file = fs::File::open(&path).with_context(|| format!("cannot open {}", path.display()))?;
    let seq = read_sequence(BufReader::new(file)).with_context(|| format!("in {}", path.display()))?;
    let outcome = simulate(&seq, &cfg)?;
    if args.oracle_check {
        let reference = simulate_reference(&seq.events, &cfg)?;
        if let Some(index) = first_divergence(&outcome, &reference) {
            eprintln!("timelines diverge at event {index}");
            return Ok(EXIT_DIVERGENCE);
        }
        if verbose > 0 {
            eprintln!("reference allocator agrees on {} events", outcome.curve.len());
        }
    }
    let mut out = output(args.out.as_deref())?;
    write_curve(&mut out, &outcome.curve)?;
    out.flush()?;
    report_peak(&outcome, verbose);
    if let Some(oom) = outcome.oom {
        eprintln!(
            "simulated OOM at t={}us: block {} requested {} bytes",
            oom.ts_us, oom.block_id, oom.requested_bytes
        );
        return Ok(EXIT_OOM);
    }
    Ok(0)
}

fn report_peak(outcome: &SimOutcome, verbose: u8) {
    if verbose > 0 {
        eprintln!(
            "peak_reserved_bytes={} peak_allocated_bytes={}",
            outcome.peak_reserved_bytes, outcome.peak_allocated_bytes
        );
    }
}

fn cmd_metrics(args: MetricsArgs) -> Result<u8> {
    let file = fs::File::open(&args.runs).with_context(|| format!("cannot open {}", args.runs.display()))?;
    let records = read_run_records(file).with_context(|| format!("in {}", args.runs.display()))?;
    let text = if args.exact {
        MetricsReport::<Exact>::compute(&records)?.render()
    } else {
        MetricsReport::<f64>::compute(&records)?.render()
    };
    let mut out = output(args.out.as_deref())?;
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(0)
}

fn cmd_synth(args: SynthArgs, verbose: u8) -> Result<u8> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            SynthSpec::from_toml(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => SynthSpec::small(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.iterations {
        spec.iterations = n;
    }
    if let Some(z) = args.zero_grad {
        spec.zero_grad = z.into();
    }
    let generated = generate(&spec)?;
    fs::write(&args.out, &generated.trace).with_context(|| format!("cannot write {}", args.out.display()))?;
    let inventory_path = args.inventory.unwrap_or_else(|| {
        let mut name = args.out.clone().into_os_string();
        name.push(".inventory.csv");
        PathBuf::from(name)
    });
    let file = fs::File::create(&inventory_path)
        .with_context(|| format!("cannot create {}", inventory_path.display()))?;
    generated.inventory.write_csv(file)?;
    if verbose > 0 {
        eprintln!(
            "{} records, {} blocks -> {} (+ {})",
            generated.record_count,
            generated.inventory.blocks.len(),
            args.out.display(),
            inventory_path.display()
        );
    }
    if generated.inventory.blocks.is_empty() {
        bail!("generated trace has no blocks");
    }
    Ok(0)
}
