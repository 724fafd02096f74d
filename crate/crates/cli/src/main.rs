//! `perfix`: run federated experiments, the layer-sensitivity study and
//! resource accounting, and plot their CSV outputs.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! runtime failures.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use perfix_core::config::ExperimentConfig;
use perfix_core::federation::{Experiment, Report};
use perfix_core::metrics::{
    gain_density, read_accuracy_csv, resource_report, sensitivity_suite, write_accuracy_csv, write_gain_csv,
    write_resources_csv, write_sensitivity_csv,
};
use perfix_core::strategies::Strategy;
use perfix_core::{Error, LayerTag};
use serde::Serialize;
use sha2::{Digest, Sha256};

use plot::PlotKind;

#[derive(Parser)]
#[command(name = "perfix", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment file (TOML, or JSON with a .json extension)
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the top-level seed
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent client updates per round
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one strategy
    Run(RunArgs),
    /// Stand-alone and combined runs for every layer type plus references
    Sensitivity(RunArgs),
    /// Storage, FLOPs and communication of every registered strategy
    Resources(RunArgs),
    /// Per-client accuracy gain of one run over another
    Gain {
        #[arg(long)]
        method: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        bin_width: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a gain-density or sensitivity CSV as SVG
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Output directory (default: the CSV's directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failures classified by exit code.
enum Failure {
    Input(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Format(_) | Error::Ingestion { .. } => Failure::Input(e),
            other => Failure::Runtime(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

struct Loaded {
    config: ExperimentConfig,
    out: PathBuf,
    hash: String,
    jobs: usize,
}

fn load(args: &RunArgs) -> CliResult<Loaded> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Failure::Input(Error::config(args.config.display().to_string(), e.to_string())))?;
    let mut config = if args.config.extension().is_some_and(|e| e == "json") {
        ExperimentConfig::from_json_str(&text)
    } else {
        ExperimentConfig::from_toml_str(&text)
    }
    .map_err(Failure::Input)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.jobs == 0 {
        return Err(Failure::Input(Error::config("--jobs", "must be at least 1")));
    }
    let from_config = config.output_dir.take();
    let out = args
        .out
        .clone()
        .or(from_config)
        .unwrap_or_else(|| PathBuf::from("perfix-out"));
    // the hash covers everything but the output location
    let hash = hex::encode(Sha256::digest(config.to_toml().as_bytes()));
    config.output_dir = Some(out.clone());
    fs::create_dir_all(&out)?;
    Ok(Loaded {
        config,
        out,
        hash,
        jobs: args.jobs,
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: &'a str,
    /// Decimal string so 64-bit seeds survive JSON readers.
    seed: String,
    jobs: usize,
    config: &'a ExperimentConfig,
}

fn write_manifest(l: &Loaded, command: &str) -> CliResult {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: &l.hash,
        seed: l.config.seed.to_string(),
        jobs: l.jobs,
        config: &l.config,
    };
    write_json(&l.out.join("manifest.json"), &m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n")?;
    Ok(())
}

fn create(path: &Path) -> CliResult<fs::File> {
    Ok(fs::File::create(path)?)
}

fn cmd_run(args: &RunArgs) -> CliResult {
    let l = load(args)?;
    write_manifest(&l, "run")?;
    let mut experiment = Experiment::setup(&l.config)?;
    fs::write(l.out.join("partition.json"), experiment.plan.to_json())?;
    let report: Report = experiment.run(l.jobs)?;
    experiment.save_checkpoint(&l.out.join("checkpoint"), &l.hash)?;
    write_accuracy_csv(&report.accuracy, create(&l.out.join("accuracy.csv"))?)?;
    write_json(&l.out.join("accuracy.json"), &report.accuracy)?;
    write_resources_csv(&report.resources, create(&l.out.join("resources.csv"))?)?;
    write_json(&l.out.join("resources.json"), &report.resources)?;
    fs::write(l.out.join("report.json"), report.to_json() + "\n")?;
    println!(
        "{}: accuracy {:.4} ± {:.4} over {} clients",
        report.strategy, report.accuracy.mean, report.accuracy.std, report.num_clients
    );
    Ok(())
}

fn cmd_sensitivity(args: &RunArgs) -> CliResult {
    let l = load(args)?;
    write_manifest(&l, "sensitivity")?;
    let rows = sensitivity_suite(&LayerTag::SENSITIVITY, &l.config, l.jobs)?;
    write_sensitivity_csv(&rows, create(&l.out.join("sensitivity.csv"))?)?;
    write_json(&l.out.join("sensitivity.json"), &rows)?;
    for r in &rows {
        match r.overall {
            Some(o) => println!("{:<22} overall {o:.4}", r.layer_type),
            None => println!("{:<22} {:.4}", r.layer_type, r.standalone.mean),
        }
    }
    Ok(())
}

fn cmd_resources(args: &RunArgs) -> CliResult {
    let l = load(args)?;
    write_manifest(&l, "resources")?;
    let rows = resource_report(&Strategy::registered(), &l.config.model_config()?, &l.config.plugin)?;
    write_resources_csv(&rows, create(&l.out.join("resources.csv"))?)?;
    write_json(&l.out.join("resources.json"), &rows)?;
    for r in &rows {
        println!(
            "{:<28} storage {:>11} ({:6.2}%)  flops {:>14} ({:6.2}%)  comm {:>11} ({:6.2}%)",
            r.strategy, r.storage, r.storage_pct, r.flops, r.flops_pct, r.comm, r.comm_pct
        );
    }
    Ok(())
}

fn open_input(path: &Path) -> CliResult<fs::File> {
    fs::File::open(path).map_err(|e| Failure::Input(Error::config(path.display().to_string(), e.to_string())))
}

fn cmd_gain(method: &Path, baseline: &Path, bin_width: f64, out: &Path) -> CliResult {
    let m = read_accuracy_csv(open_input(method)?).map_err(Failure::Input)?;
    let b = read_accuracy_csv(open_input(baseline)?).map_err(Failure::Input)?;
    let density = gain_density(&m, &b, bin_width).map_err(Failure::Input)?;
    fs::create_dir_all(out)?;
    write_gain_csv(&density, create(&out.join("gain_density.csv"))?)?;
    write_json(&out.join("gain_density.json"), &density)?;
    Ok(())
}

fn cmd_plot(csv: &Path, kind: PlotKind, out: Option<&Path>) -> CliResult {
    let svg = plot::render(kind, open_input(csv)?).map_err(Failure::Input)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| csv.parent().map(Path::to_path_buf).unwrap_or_default());
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir)?;
    }
    let path = dir.join(format!("{}.svg", kind.file_stem()));
    fs::write(&path, svg)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PERFIX_LOG", "error")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sensitivity(a) => cmd_sensitivity(a),
        Command::Resources(a) => cmd_resources(a),
        Command::Gain {
            method,
            baseline,
            bin_width,
            out,
        } => cmd_gain(method, baseline, *bin_width, out),
        Command::Plot { csv, kind, out } => cmd_plot(csv, *kind, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
