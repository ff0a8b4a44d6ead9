//! `pendler` — mines home/work anchors, commute distances, and commute
//! timing from call records or vehicle GPS traces, and generates the
//! synthetic worlds used to validate that recovery.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pendler_cli::config::{AnalysisConfig, ConfigError};
use pendler_cli::pipeline::{run_pipeline, PipelineError, PipelineOutput};
use pendler_cli::tables::emit_tables;
use pendler_core::synth::{
    evaluate_recovery, generate_world, read_ground_truth_csv, simulate_calls, write_cdr_csv,
    write_gps_csv, write_ground_truth_csv, write_towers_csv, Regime, SynthError, WorldConfig,
};

#[derive(Parser)]
#[command(
    name = "pendler",
    version,
    about = "Commute mining from call records and GPS traces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full analysis over a call-record or GPS input.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic world: towers, call records, GPS traces, truth.
    Synth(SynthArgs),
    /// Run the analysis, then score it against a ground-truth file.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Config file of `key = value` lines; flags and --set override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Call-record CSV (`user_id,timestamp,tower_id`); needs --towers.
    #[arg(long)]
    cdr: Option<PathBuf>,
    /// GPS CSV (`vehicle_id,timestamp,lat,lon`); towers are derived.
    #[arg(long)]
    gps: Option<PathBuf>,
    /// Tower registry CSV (`tower_id,lat,lon`).
    #[arg(long)]
    towers: Option<PathBuf>,
    /// Output directory for the result tables.
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// Region label stamped into the statistics tables.
    #[arg(long)]
    label: Option<String>,
    /// Ad-hoc config override, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// World config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the generated CSVs.
    #[arg(long, default_value = "world")]
    outdir: PathBuf,
    /// Ad-hoc world override, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    analyze: AnalyzeArgs,
    /// Ground-truth CSV written by `synth`.
    #[arg(long)]
    truth: PathBuf,
}

/// Top-level failure, split by exit code: bad configuration (2) versus bad
/// or unwritable data (3).
enum AppError {
    Config(String),
    Data(String),
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Config(msg) | AppError::Data(msg) => f.write_str(msg),
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<PipelineError> for AppError {
    fn from(e: PipelineError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<SynthError> for AppError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::BadGroundTruth { .. } => AppError::Data(e.to_string()),
            _ => AppError::Config(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                AppError::Config(_) => ExitCode::from(2),
                AppError::Data(_) => ExitCode::from(3),
            }
        }
    }
}

fn read_config_file(path: &Path) -> Result<String, ConfigError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| ConfigError::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(text)
}

/// Splits a `--set key=value` argument.
fn split_set(pair: &str) -> Result<(&str, &str), AppError> {
    pair.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| AppError::Config(format!("--set needs KEY=VALUE, got {pair:?}")))
}

/// Layers an analysis config: defaults, then the config file, then explicit
/// flags, then `--set` overrides, and validates the result.
fn resolve_analysis(args: &AnalyzeArgs) -> Result<AnalysisConfig, AppError> {
    let mut cfg = AnalysisConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_kv_text(&read_config_file(path)?)?;
    }
    if let Some(p) = &args.cdr {
        cfg.cdr = Some(p.clone());
    }
    if let Some(p) = &args.gps {
        cfg.gps = Some(p.clone());
    }
    if let Some(p) = &args.towers {
        cfg.towers = Some(p.clone());
    }
    if let Some(p) = &args.outdir {
        cfg.outdir = p.clone();
    }
    if let Some(l) = &args.label {
        cfg.label = l.clone();
    }
    for pair in &args.set {
        let (key, value) = split_set(pair)?;
        if !cfg.apply_kv(key, value)? {
            return Err(ConfigError::UnknownKey(key.to_owned()).into());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_and_emit(cfg: &AnalysisConfig) -> Result<PipelineOutput, AppError> {
    let out = run_pipeline(cfg)?;
    emit_tables(cfg, &out)?;
    print!("{}", out.report.render());
    print!("{}", out.report.render_timing());
    println!("wrote tables to {}", cfg.outdir.display());
    Ok(out)
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), AppError> {
    let cfg = resolve_analysis(&args)?;
    run_and_emit(&cfg)?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), AppError> {
    let mut cfg = WorldConfig::default();
    if let Some(path) = &args.config {
        cfg = WorldConfig::from_kv_text(&read_config_file(path)?)?;
    }
    for pair in &args.set {
        let (key, value) = split_set(pair)?;
        if !cfg.apply_kv(key, value)? {
            return Err(AppError::Config(format!("unknown world key {key:?}")));
        }
    }
    let world = generate_world(&cfg)?;
    let (events, fixes) = simulate_calls(&world);

    std::fs::create_dir_all(&args.outdir)
        .map_err(|e| AppError::Data(format!("create {}: {e}", args.outdir.display())))?;
    let write = |name: &str,
                 body: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>|
     -> Result<(), AppError> {
        let path = args.outdir.join(name);
        let err = |e: std::io::Error| AppError::Data(format!("write {}: {e}", path.display()));
        let mut w = File::create(&path).map(BufWriter::new).map_err(err)?;
        body(&mut w).map_err(err)?;
        w.flush().map_err(err)
    };
    write("towers.csv", &|w| write_towers_csv(w, &world.registry))?;
    write("cdr.csv", &|w| write_cdr_csv(w, &events))?;
    if world.config.regime == Regime::CarOnly {
        write("gps.csv", &|w| write_gps_csv(w, &fixes))?;
    }
    write("ground_truth.csv", &|w| {
        write_ground_truth_csv(w, &world.truth)
    })?;
    write("world.txt", &|w| {
        w.write_all(world.config.to_kv_text().as_bytes())
    })?;
    println!(
        "wrote world to {}: {} towers, {} agents, {} calls, {} fixes",
        args.outdir.display(),
        world.registry.len(),
        world.agents.len(),
        events.len(),
        fixes.len()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), AppError> {
    let cfg = resolve_analysis(&args.analyze)?;
    let truth_file = File::open(&args.truth).map_err(|e| {
        AppError::Config(format!(
            "unreadable truth file {}: {e}",
            args.truth.display()
        ))
    })?;
    let truth = read_ground_truth_csv(truth_file)?;
    let out = run_and_emit(&cfg)?;
    let report = evaluate_recovery(&out.outcomes, &out.samples, &truth, &out.registry);
    let path = cfg.outdir.join("recovery.txt");
    File::create(&path)
        .and_then(|mut f| f.write_all(report.render().as_bytes()))
        .map_err(|e| AppError::Data(format!("write {}: {e}", path.display())))?;
    print!("{}", report.render());
    Ok(())
}
