//! `cclab`: command-line front end for the Carnot-Caratheodory lab.
//!
//! Exit codes: 0 success, 1 computation or verification failure, 2
//! configuration error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CalibrateArgs, Ctx, DiameterArgs, DistanceArgs, ExtremalArgs, QuasiArgs, VerifyArgs};
use config::{resolve_structure, ConfigFile, StructureSpec};
use output::OutDir;

#[derive(Parser, Debug)]
#[command(
    name = "cclab",
    version,
    about = "Calibrations and certified ball-diameter bounds for sub-Riemannian structures"
)]
struct Cli {
    /// Builtin structure name or path to a JSON structure definition.
    #[arg(long, global = true)]
    structure: Option<String>,
    /// JSON config file with per-command sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: cclab-out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the result as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// List builtin structures.
    ListStructures,
    /// Integrate a normal extremal and write its trajectory.
    Extremal(ExtremalArgs),
    /// Build a calibration at a point and store it.
    Calibrate(CalibrateArgs),
    /// Build a quasi-calibration at a point and store it.
    QuasiCalibrate(QuasiArgs),
    /// Re-run the verification suite on a stored (quasi-)calibration.
    Verify(VerifyArgs),
    /// Two-sided estimate of the distance between two points.
    Distance(DistanceArgs),
    /// Certified ball-diameter sweep.
    Diameter(DiameterArgs),
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Compute(String),
}

impl Failure {
    /// Precondition violations are configuration errors; everything else is a computation failure.
    pub fn from_core(e: cclab::Error) -> Self {
        use cclab::Error as E;
        match e {
            E::UnknownStructure(_)
            | E::InvalidArgument(_)
            | E::PointOutsideDomain { .. }
            | E::RegularityMismatch { .. }
            | E::CapExceeded { .. } => Failure::Config(e.to_string()),
            _ => Failure::Compute(e.to_string()),
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Compute(_) => 1,
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Command::ListStructures = cli.command {
        return commands::list_structures(cli.json);
    }
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let out = OutDir::create(
        &cli.out
            .clone()
            .or(file.out.clone())
            .unwrap_or_else(|| "cclab-out".into()),
    )?;
    let spec = cli
        .structure
        .clone()
        .map(StructureSpec::Name)
        .or(file.structure.clone());
    if let Command::Verify(args) = cli.command {
        return commands::verify(args, &file, seed, &out, cli.json);
    }
    let spec = spec.ok_or_else(|| Failure::Config("no structure given (use --structure or a config file)".into()))?;
    let (structure, structure_spec) = resolve_structure(&spec)?;
    let ctx = Ctx {
        structure,
        structure_spec,
        seed,
        out,
        json: cli.json,
    };
    match cli.command {
        Command::Extremal(a) => commands::extremal(&ctx, a, &file),
        Command::Calibrate(a) => commands::calibrate(&ctx, a, &file),
        Command::QuasiCalibrate(a) => commands::quasi_calibrate(&ctx, a, &file),
        Command::Distance(a) => commands::distance(&ctx, a, &file),
        Command::Diameter(a) => commands::diameter(&ctx, a, &file),
        Command::ListStructures | Command::Verify(_) => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("error: {m}"),
                Failure::Compute(m) => eprintln!("failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
